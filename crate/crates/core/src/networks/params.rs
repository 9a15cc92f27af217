use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{NetworkConfig, STAGES};
use crate::drs::ControllerMode;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{io, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    /// Plug-in site the parameter belongs to (`layer3`, `head`).
    pub site: String,
    pub value: Tensor<T>,
}

/// Named parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

const MANIFEST: &str = "manifest.txt";
const CONFIG: &str = "network.cfg";

impl<T: Scalar> ParamStore<T> {
    pub fn from_params(params: Vec<Param<T>>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(ParamStore { params, index })
    }

    /// Classifier parameters. Convolutions feeding a ReLU use He-uniform
    /// bounds `√(6/fan_in)`; the head and controllers use `√(3/fan_in)`.
    /// Biases start at zero.
    pub fn init_classifier(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, 0x1417);
        let mut params = Vec::new();
        let mut push = |name: String, site: &str, value: Tensor<T>| {
            params.push(Param { name, site: site.to_string(), value })
        };
        let k = cfg.kernel;
        let mut kin = 3;
        for i in 0..STAGES {
            let site = format!("layer{}", i + 1);
            let kout = cfg.widths[i];
            let bound = (6.0 / (kin * k * k) as f64).sqrt();
            push(format!("conv{}.weight", i + 1), &site, Tensor::uniform([kout, kin, k, k], -bound, bound, &mut rng));
            push(format!("conv{}.bias", i + 1), &site, Tensor::zeros([kout]));
            kin = kout;
        }
        let bound = (3.0 / kin as f64).sqrt();
        push("head.weight".into(), "head", Tensor::uniform([cfg.classes, kin, 1, 1], -bound, bound, &mut rng));
        push("head.bias".into(), "head", Tensor::zeros([cfg.classes]));
        if cfg.drs.mode == ControllerMode::Learnable {
            for i in (0..STAGES).filter(|&i| cfg.drs_sites[i]) {
                let kk = cfg.widths[i];
                let bound = (3.0 / kk as f64).sqrt();
                let site = format!("layer{}", i + 1);
                push(format!("drs{}.weight", i + 1), &site, Tensor::uniform([kk, kk], -bound, bound, &mut rng));
                push(format!("drs{}.bias", i + 1), &site, Tensor::zeros([kk]));
            }
        }
        Self::from_params(params)
    }

    /// Refiner parameters: the classifier's convolutions with a zeroed head,
    /// so regression starts from an all-zero output.
    pub fn refiner_from(classifier: &ParamStore<T>) -> Result<Self> {
        let params = classifier
            .params
            .iter()
            .filter(|p| !p.name.starts_with("drs"))
            .map(|p| {
                let mut p = p.clone();
                if p.site == "head" {
                    p.value.data_mut().fill(T::zero());
                }
                p
            })
            .collect();
        Self::from_params(params)
    }

    /// Fresh parameters for `cfg` whose convolutions are copied from
    /// `backbone`; the head and any controllers keep their fresh init.
    pub fn init_from_backbone(cfg: &NetworkConfig, backbone: &ParamStore<T>, seed: u64) -> Result<Self> {
        let mut fresh = Self::init_classifier(cfg, seed)?;
        for p in fresh.params.iter_mut().filter(|p| p.name.starts_with("conv")) {
            let src = backbone.get(&p.name)?;
            if src.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "backbone {}: shape {:?}, network expects {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(fresh)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.params[self.index_of(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.index_of(name)?;
        Ok(&mut self.params[i].value)
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape("set_values", format!("{} tensors for {} parameters", values.len(), self.params.len())));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("set_values", format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape())));
            }
            p.value = v;
        }
        Ok(())
    }

    /// Checks names and shapes against a fresh init for `cfg`.
    pub fn check_matches(&self, cfg: &NetworkConfig, refiner: bool) -> Result<()> {
        let fresh = Self::init_classifier(cfg, 0)?;
        let fresh = if refiner { Self::refiner_from(&fresh)? } else { fresh };
        let describe = |s: &Self| s.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect::<Vec<_>>();
        if describe(self) != describe(&fresh) {
            return Err(Error::Config("checkpoint does not match the network configuration".into()));
        }
        Ok(())
    }

    /// Writes one `<name>.drst` per parameter, `manifest.txt` and
    /// `network.cfg`.
    pub fn save(&self, dir: &Path, cfg: &NetworkConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for p in &self.params {
            io::write_tensor(dir.join(format!("{}.drst", p.name)), &p.value)?;
            let shape = p.value.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            writeln!(manifest, "{} {} {}", p.name, shape, p.site).unwrap();
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        cfg.to_kv().write(dir.join(CONFIG))
    }

    /// Loads a checkpoint written by [`ParamStore::save`].
    pub fn load(dir: &Path) -> Result<(Self, NetworkConfig)> {
        let cfg_kv = KeyValues::read(dir.join(CONFIG))?;
        let cfg = NetworkConfig::from_kv(&cfg_kv, &NetworkConfig::toy(1, 64))?;
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |detail: String| Error::Format { what: "checkpoint manifest", detail };
        let mut params = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, site] = fields[..] else {
                return Err(bad(format!("expected `name shape site`, got {line:?}")));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
                .collect::<Result<_>>()?;
            let value: Tensor<T> = io::read_tensor(dir.join(format!("{name}.drst")))?;
            if value.shape() != shape {
                return Err(bad(format!("{name}: file shape {:?}, manifest {shape:?}", value.shape())));
            }
            params.push(Param { name: name.to_string(), site: site.to_string(), value });
        }
        Ok((Self::from_params(params)?, cfg))
    }
}
