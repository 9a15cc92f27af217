//! Six-stage convolutional classifier with optional suppression after each
//! stage, the localization-map readout and the refinement network.
//!
//! Inputs are centred to roughly unit scale. Stage `i` is `conv3x3 → ReLU → [DRS] → [maxpool 2×2]`. A `1×1` head maps
//! the last stage to `C` class maps `F`, and `P = σ(GAP(F))`. The refiner is
//! the same backbone without suppression; its head output is used as-is.

mod params;
mod train;

pub use params::{Param, ParamStore};
pub use train::{
    multilabel_accuracy, train_classifier, train_refiner, EpochStats, TrainSchedule,
};

use crate::drs::{self, Controller, ControllerMode, DrsConfig};
use crate::error::{Error, Result};
use crate::kv::{format_list, KeyValues};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, Tensor};

pub const STAGES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub widths: [usize; STAGES],
    pub kernel: usize,
    /// Whether a 2×2 max-pool follows each stage.
    pub pool_after: [bool; STAGES],
    /// Suppression sites, one flag per stage.
    pub drs_sites: [bool; STAGES],
    pub drs: DrsConfig,
    pub classes: usize,
    /// Training crop side.
    pub input_side: usize,
}

impl NetworkConfig {
    /// Toy backbone: two pools (so `F` is a quarter of the input side) and
    /// suppression on every stage with constant δ = 0.55.
    pub fn toy(classes: usize, input_side: usize) -> Self {
        NetworkConfig {
            widths: [16, 32, 64, 64, 96, 96],
            kernel: 3,
            pool_after: [true, true, false, false, false, false],
            drs_sites: [true; STAGES],
            drs: DrsConfig { mode: ControllerMode::Constant, delta: 0.55 },
            classes,
            input_side,
        }
    }

    pub fn without_drs(&self) -> Self {
        NetworkConfig { drs_sites: [false; STAGES], ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("classes must be at least 1".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.input_side < self.min_side() {
            return Err(Error::Config(format!("input side {} below minimum {}", self.input_side, self.min_side())));
        }
        self.drs.validate()
    }

    pub fn pools(&self) -> usize {
        self.pool_after.iter().filter(|&&p| p).count()
    }

    /// Smallest input side that survives every pooling stage.
    pub fn min_side(&self) -> usize {
        1 << self.pools()
    }

    /// Spatial side of `F` for input side `side`.
    pub fn output_side(&self, side: usize) -> usize {
        (0..self.pools()).fold(side, |s, _| s / 2)
    }

    pub fn has_learnable_sites(&self) -> bool {
        self.drs.mode == ControllerMode::Learnable && self.drs_sites.contains(&true)
    }

    pub fn to_kv(&self) -> KeyValues {
        let flags = |f: &[bool; STAGES]| format_list(&f.map(u8::from));
        let mut kv = KeyValues::new();
        kv.set("widths", format_list(&self.widths));
        kv.set("kernel", self.kernel);
        kv.set("pool_after", flags(&self.pool_after));
        kv.set("drs_layers", flags(&self.drs_sites));
        kv.set("drs_mode", self.drs.mode);
        kv.set("delta", self.drs.delta);
        kv.set("classes", self.classes);
        kv.set("input_side", self.input_side);
        kv
    }

    /// Reads keys over `base`; missing keys keep their `base` value.
    pub fn from_kv(kv: &KeyValues, base: &NetworkConfig) -> Result<Self> {
        kv.reject_unknown(
            "network",
            &["widths", "kernel", "pool_after", "drs_layers", "drs_mode", "delta", "classes", "input_side"],
        )?;
        let six = |key: &str| -> Result<Option<Vec<usize>>> {
            match kv.get_list::<usize>(key)? {
                Some(v) if v.len() != STAGES => Err(Error::Config(format!("{key} needs {STAGES} entries, got {}", v.len()))),
                other => Ok(other),
            }
        };
        let flags = |key: &str, dflt: [bool; STAGES]| -> Result<[bool; STAGES]> {
            Ok(match six(key)? {
                Some(v) => {
                    if v.iter().any(|&b| b > 1) {
                        return Err(Error::Config(format!("{key} entries must be 0 or 1")));
                    }
                    std::array::from_fn(|i| v[i] == 1)
                }
                None => dflt,
            })
        };
        let cfg = NetworkConfig {
            widths: six("widths")?.map_or(base.widths, |v| std::array::from_fn(|i| v[i])),
            kernel: kv.get("kernel")?.unwrap_or(base.kernel),
            pool_after: flags("pool_after", base.pool_after)?,
            drs_sites: flags("drs_layers", base.drs_sites)?,
            drs: DrsConfig {
                mode: kv.get("drs_mode")?.unwrap_or(base.drs.mode),
                delta: kv.get("delta")?.unwrap_or(base.drs.delta),
            },
            classes: kv.get("classes")?.unwrap_or(base.classes),
            input_side: kv.get("input_side")?.unwrap_or(base.input_side),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter nodes of one network, aligned with its [`ParamStore`].
pub struct Bound<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    ids: Vec<NodeId>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    /// Records every parameter on `g`, trainable or frozen.
    pub fn new(g: &mut Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        let ids = store
            .iter()
            .map(|p| if trainable { g.param(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect();
        Bound { store, ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        Ok(self.ids[self.store.index_of(name)?])
    }
}

/// Head output `F` and, for the classifier, scores `P`.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub features: NodeId,
    pub scores: NodeId,
}

fn backbone<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    net: &Bound<T>,
    x: NodeId,
    suppress: bool,
) -> Result<NodeId> {
    let (_, k, h, w) = g.value(x)?.dims4()?;
    if k != 3 {
        return Err(Error::shape("classifier", format!("expected 3 input channels, got {k}")));
    }
    if h.min(w) < cfg.min_side() {
        return Err(Error::shape("classifier", format!("input {h}x{w} smaller than {}", cfg.min_side())));
    }
    // Centre pixel values: (x - 0.5) / 0.25.
    let shift = g.constant(Tensor::full([1, 3, 1, 1], T::lit(-0.5)));
    let scale = g.constant(Tensor::full([1, 3, 1, 1], T::lit(4.0)));
    let x = g.add(x, shift)?;
    let mut x = g.mul(x, scale)?;
    let pad = cfg.kernel / 2;
    for i in 0..STAGES {
        let (wt, b) = (net.node(&format!("conv{}.weight", i + 1))?, net.node(&format!("conv{}.bias", i + 1))?);
        x = g.conv2d(x, wt, b, 1, pad)?;
        x = g.relu(x)?;
        if suppress && cfg.drs_sites[i] {
            let controller = match cfg.drs.mode {
                ControllerMode::Constant => Controller::Constant { delta: cfg.drs.delta },
                ControllerMode::Learnable => Controller::Learnable {
                    weight: net.node(&format!("drs{}.weight", i + 1))?,
                    bias: net.node(&format!("drs{}.bias", i + 1))?,
                },
            };
            x = drs::drs_forward(g, x, controller)?;
        }
        if cfg.pool_after[i] {
            x = g.maxpool2d(x, 2, 2)?;
        }
    }
    g.conv2d(x, net.node("head.weight")?, net.node("head.bias")?, 1, 0)
}

/// Classifier pass; `suppress = false` disables every suppression site.
pub fn classifier_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    net: &Bound<T>,
    x: NodeId,
    suppress: bool,
) -> Result<Outputs> {
    let features = backbone(g, cfg, net, x, suppress)?;
    let n = g.value(features)?.shape()[0];
    let pooled = g.global_avg_pool(features)?;
    let flat = g.reshape(pooled, [n, cfg.classes])?;
    let scores = g.sigmoid(flat)?;
    Ok(Outputs { features, scores })
}

/// Refined maps `N`, unclamped.
pub fn refiner_forward<T: Scalar>(g: &mut Graph<T>, cfg: &NetworkConfig, net: &Bound<T>, x: NodeId) -> Result<NodeId> {
    backbone(g, cfg, net, x, false)
}

/// Clamp applied to refined maps when they leave the network.
pub fn export_clamp<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}

/// `M^c = ReLU(F^c) / max(F^c)`; zero for absent classes and for maps with
/// no positive value. `present` is a flat `N × C` multi-hot, or `None` to
/// emit every class.
pub fn localization_maps<T: Scalar>(f: &Tensor<T>, present: Option<&[u8]>) -> Result<Tensor<T>> {
    let (n, c, h, w) = f.dims4()?;
    if let Some(p) = present {
        if p.len() != n * c {
            return Err(Error::shape("localization_maps", format!("{} presence flags for N={n}, C={c}", p.len())));
        }
    }
    let plane = h * w;
    let mut out = Tensor::zeros([n, c, h, w]);
    for (m, (src, dst)) in f.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)).enumerate() {
        if present.is_some_and(|p| p[m] == 0) {
            continue;
        }
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        if max > T::zero() {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s.max(T::zero()) / max;
            }
        }
    }
    Ok(out)
}

/// Which maps to read out of a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    /// Classifier with suppression disabled.
    Raw,
    Drs,
    Refined,
}

impl std::str::FromStr for MapSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(MapSource::Raw),
            "drs" => Ok(MapSource::Drs),
            "refined" => Ok(MapSource::Refined),
            other => Err(Error::Config(format!("unknown map mode {other:?}"))),
        }
    }
}

/// Inference without gradients; returns `(F, P)` for the classifier.
pub fn predict(cfg: &NetworkConfig, params: &ParamStore<f32>, images: &Tensor<f32>, suppress: bool) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut g = Graph::new();
    let net = Bound::new(&mut g, params, false);
    let x = g.constant(images.clone());
    let out = classifier_forward(&mut g, cfg, &net, x, suppress)?;
    Ok((g.value(out.features)?.clone(), g.value(out.scores)?.clone()))
}

/// Inference of the refiner; returns clamped maps.
pub fn predict_refined(cfg: &NetworkConfig, params: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let net = Bound::new(&mut g, params, false);
    let x = g.constant(images.clone());
    let out = refiner_forward(&mut g, cfg, &net, x)?;
    Ok(export_clamp(g.value(out)?))
}

/// Maps in `[0, 1]` of shape `N × C × h × w` for one batch. Refined maps are
/// masked to `present` like the others.
pub fn localization_for(
    source: MapSource,
    cfg: &NetworkConfig,
    classifier: &ParamStore<f32>,
    refiner: Option<&ParamStore<f32>>,
    images: &Tensor<f32>,
    present: Option<&[u8]>,
) -> Result<Tensor<f32>> {
    match source {
        MapSource::Raw | MapSource::Drs => {
            let (f, _) = predict(cfg, classifier, images, source == MapSource::Drs)?;
            localization_maps(&f, present)
        }
        MapSource::Refined => {
            let refiner = refiner.ok_or_else(|| Error::InvalidArgument("refined maps need refiner parameters".into()))?;
            let mut maps = predict_refined(cfg, refiner, images)?;
            if let Some(p) = present {
                let (n, c) = (maps.shape()[0], maps.shape()[1]);
                if p.len() != n * c {
                    return Err(Error::shape("localization_for", format!("{} presence flags for N={n}, C={c}", p.len())));
                }
                let plane = maps.numel() / p.len().max(1);
                for (m, chunk) in maps.data_mut().chunks_mut(plane).enumerate() {
                    if p[m] == 0 {
                        chunk.fill(0.0);
                    }
                }
            }
            Ok(maps)
        }
    }
}

#[cfg(test)]
mod tests;
