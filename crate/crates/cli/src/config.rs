//! Experiment configuration as flat `section.key=value` text.
//!
//! Sections: `data.` (toy generator and split), `pretrain.`, `net.`,
//! `aug.`, `cls.`, `ref.`, `cue.`, `eval.`, `dump.`. Top-level keys are
//! `seed` and `out`. Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use drs_core::data::{AugmentConfig, ToyConfig};
use drs_core::kv::KeyValues;
use drs_core::labeling::CueConfig;
use drs_core::networks::{NetworkConfig, TrainSchedule};
use drs_core::rng::derive_seed;
use drs_core::tensor::optim::LrSchedule;

use crate::error::{CliError, CliResult};

/// Independent streams derived from the master seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const PRETRAIN_DATA: u64 = 2;
    pub const PRETRAIN_INIT: u64 = 3;
    pub const PRETRAIN_ORDER: u64 = 4;
    pub const CLS_INIT: u64 = 5;
    pub const CLS_ORDER: u64 = 6;
    pub const REF_ORDER: u64 = 7;
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub count: usize,
    pub schedule: TrainSchedule,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            enabled: true,
            count: 200,
            schedule: TrainSchedule {
                lr: LrSchedule { base: 1e-2, decay_epochs: vec![10], factor: 0.1 },
                ..TrainSchedule::classifier()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Toy generator settings; its seed is derived from `seed`.
    pub data: ToyConfig,
    /// Leading samples used for training and pseudo labels; the rest
    /// measure classification accuracy.
    pub train_count: usize,
    pub pretrain: PretrainConfig,
    pub net: NetworkConfig,
    pub aug: AugmentConfig,
    pub cls: TrainSchedule,
    pub refine: TrainSchedule,
    pub cue: CueConfig,
    pub coverage_threshold: f32,
    /// Heatmap opacity over the input image.
    pub overlay_alpha: f32,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

const DATA_KEYS: &[&str] = &[
    "count", "classes", "side", "train", "two_object_prob", "min_size", "max_size", "body_saturation",
    "max_blobs", "head_fraction", "saliency_noise",
];

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        let data = ToyConfig::new(200, 4, 64, 0);
        let aug = AugmentConfig::for_side(data.side);
        let mut cfg = ExperimentConfig {
            seed,
            out: PathBuf::from("runs/default"),
            train_count: 160,
            pretrain: PretrainConfig::default(),
            net: NetworkConfig::toy(data.classes, aug.crop),
            aug,
            cls: TrainSchedule::classifier(),
            refine: TrainSchedule::refiner(),
            cue: CueConfig::default(),
            coverage_threshold: 0.2,
            overlay_alpha: 0.6,
            data,
        };
        cfg.reseed(seed);
        cfg
    }

    /// Sets the master seed and every seed derived from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = derive_seed(seed, streams::DATA);
        self.pretrain.schedule.seed = derive_seed(seed, streams::PRETRAIN_ORDER);
        self.cls.seed = derive_seed(seed, streams::CLS_ORDER);
        self.refine.seed = derive_seed(seed, streams::REF_ORDER);
    }

    pub fn pretrain_data(&self) -> ToyConfig {
        ToyConfig { count: self.pretrain.count, seed: derive_seed(self.seed, streams::PRETRAIN_DATA), ..self.data.clone() }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, streams::CLS_INIT)
    }

    pub fn pretrain_init_seed(&self) -> u64 {
        derive_seed(self.seed, streams::PRETRAIN_INIT)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.validate()?;
        if self.train_count == 0 || self.train_count > self.data.count {
            return Err(CliError::Usage(format!("data.train = {} must lie in 1..={}", self.train_count, self.data.count)));
        }
        if self.aug.crop > self.data.side {
            return Err(CliError::Usage(format!("aug.crop {} exceeds data.side {}", self.aug.crop, self.data.side)));
        }
        if self.net.classes != self.data.classes || self.net.input_side != self.aug.crop {
            return Err(CliError::Usage("net.classes and net.input_side follow data.classes and aug.crop".into()));
        }
        if self.pretrain.enabled && self.pretrain.count == 0 {
            return Err(CliError::Usage("pretrain.count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(CliError::Usage("dump.overlay_alpha outside [0, 1]".into()));
        }
        self.net.validate()?;
        self.cls.validate()?;
        self.refine.validate()?;
        self.pretrain.schedule.validate()?;
        self.cue.validate()?;
        Ok(())
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::Usage(format!("config file {} not found", path.display())));
        }
        Self::from_kv(&KeyValues::read(path)?)
    }

    pub fn from_kv(kv: &KeyValues) -> CliResult<Self> {
        let sections = ["data", "pretrain", "net", "aug", "cls", "ref", "cue", "eval", "dump"];
        for k in kv.keys() {
            let known = match k.split_once('.') {
                Some((s, _)) => sections.contains(&s),
                None => k == "seed" || k == "out",
            };
            if !known {
                return Err(CliError::Usage(format!("unknown config key {k:?}")));
            }
        }
        let seed = kv.get("seed")?.unwrap_or(0);
        let base = Self::with_seed(seed);

        let d = kv.section("data");
        d.reject_unknown("data", DATA_KEYS)?;
        let b = &base.data;
        let data = ToyConfig {
            count: d.get("count")?.unwrap_or(b.count),
            classes: d.get("classes")?.unwrap_or(b.classes),
            side: d.get("side")?.unwrap_or(b.side),
            seed: b.seed,
            two_object_prob: d.get("two_object_prob")?.unwrap_or(b.two_object_prob),
            min_size: d.get("min_size")?.unwrap_or(b.min_size),
            max_size: d.get("max_size")?.unwrap_or(b.max_size),
            body_saturation: d.get("body_saturation")?.unwrap_or(b.body_saturation),
            max_blobs: d.get("max_blobs")?.unwrap_or(b.max_blobs),
            head_fraction: d.get("head_fraction")?.unwrap_or(b.head_fraction),
            saliency_noise: d.get("saliency_noise")?.unwrap_or(b.saliency_noise),
        };
        let train_count = d.get("train")?.unwrap_or_else(|| base.train_count.min(data.count));

        let a = kv.section("aug");
        a.reject_unknown("aug", &["crop", "flip_prob", "brightness", "contrast", "saturation"])?;
        let adef = AugmentConfig::for_side(data.side);
        let aug = AugmentConfig {
            crop: a.get("crop")?.unwrap_or(adef.crop),
            flip_prob: a.get("flip_prob")?.unwrap_or(adef.flip_prob),
            brightness: a.get("brightness")?.unwrap_or(adef.brightness),
            contrast: a.get("contrast")?.unwrap_or(adef.contrast),
            saturation: a.get("saturation")?.unwrap_or(adef.saturation),
        };

        let n = kv.section("net");
        if n.raw("classes").is_some() || n.raw("input_side").is_some() {
            return Err(CliError::Usage("net.classes and net.input_side follow data.classes and aug.crop".into()));
        }
        let net = NetworkConfig::from_kv(&n, &NetworkConfig { classes: data.classes, input_side: aug.crop, ..base.net.clone() })?;

        let p = kv.section("pretrain");
        let enabled = p.get("enabled")?.unwrap_or(base.pretrain.enabled);
        let count = p.get("count")?.unwrap_or(base.pretrain.count);
        let mut sched_kv = KeyValues::new();
        for k in p.keys().filter(|k| *k != "enabled" && *k != "count") {
            sched_kv.set(format!("pretrain.{k}"), p.raw(k).unwrap_or_default());
        }
        let pretrain_schedule = schedule_in(&sched_kv, "pretrain", &base.pretrain.schedule)?;

        let c = kv.section("cue");
        let e = kv.section("eval");
        e.reject_unknown("eval", &["coverage_threshold"])?;
        let o = kv.section("dump");
        o.reject_unknown("dump", &["overlay_alpha"])?;

        let mut cfg = ExperimentConfig {
            seed,
            out: kv.get::<String>("out")?.map_or(base.out.clone(), PathBuf::from),
            data,
            train_count,
            pretrain: PretrainConfig { enabled, count, schedule: pretrain_schedule },
            net,
            aug,
            cls: schedule_in(kv, "cls", &base.cls)?,
            refine: schedule_in(kv, "ref", &base.refine)?,
            cue: CueConfig::from_kv(&c, &base.cue)?,
            coverage_threshold: e.get("coverage_threshold")?.unwrap_or(base.coverage_threshold),
            overlay_alpha: o.get("overlay_alpha")?.unwrap_or(base.overlay_alpha),
        };
        cfg.reseed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full key/value form; derived seeds are omitted.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("out", self.out.display());
        let d = &self.data;
        let mut data = KeyValues::new();
        data.set("count", d.count);
        data.set("classes", d.classes);
        data.set("side", d.side);
        data.set("train", self.train_count);
        data.set("two_object_prob", d.two_object_prob);
        data.set("min_size", d.min_size);
        data.set("max_size", d.max_size);
        data.set("body_saturation", d.body_saturation);
        data.set("max_blobs", d.max_blobs);
        data.set("head_fraction", d.head_fraction);
        data.set("saliency_noise", d.saliency_noise);
        kv.extend_section("data", &data);

        let mut p = schedule_kv(&self.pretrain.schedule);
        p.set("enabled", self.pretrain.enabled);
        p.set("count", self.pretrain.count);
        kv.extend_section("pretrain", &p);

        let full = self.net.to_kv();
        let mut net = KeyValues::new();
        for k in full.keys().filter(|k| *k != "classes" && *k != "input_side") {
            net.set(k, full.raw(k).unwrap_or_default());
        }
        kv.extend_section("net", &net);

        let a = &self.aug;
        let mut aug = KeyValues::new();
        aug.set("crop", a.crop);
        aug.set("flip_prob", a.flip_prob);
        aug.set("brightness", a.brightness);
        aug.set("contrast", a.contrast);
        aug.set("saturation", a.saturation);
        kv.extend_section("aug", &aug);

        kv.extend_section("cls", &schedule_kv(&self.cls));
        kv.extend_section("ref", &schedule_kv(&self.refine));
        kv.extend_section("cue", &self.cue.to_kv());
        let mut e = KeyValues::new();
        e.set("coverage_threshold", self.coverage_threshold);
        kv.extend_section("eval", &e);
        let mut o = KeyValues::new();
        o.set("overlay_alpha", self.overlay_alpha);
        kv.extend_section("dump", &o);
        kv
    }
}

fn schedule_in(kv: &KeyValues, name: &str, base: &TrainSchedule) -> CliResult<TrainSchedule> {
    let s = kv.section(name);
    if s.raw("seed").is_some() {
        return Err(CliError::Usage(format!("{name}.seed is derived from the master seed")));
    }
    Ok(TrainSchedule::from_kv(&s, base)?)
}

/// Schedule keys without the derived seed.
fn schedule_kv(s: &TrainSchedule) -> KeyValues {
    let full = s.to_kv();
    let mut kv = KeyValues::new();
    for k in full.keys().filter(|k| *k != "seed") {
        kv.set(k, full.raw(k).unwrap_or_default());
    }
    kv
}
