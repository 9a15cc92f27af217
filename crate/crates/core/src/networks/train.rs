use rand::seq::SliceRandom;

use super::{classifier_forward, localization_maps, predict, refiner_forward, Bound, NetworkConfig, ParamStore};
use crate::data::{augment, batch_images, batch_labels, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::kv::{format_list, KeyValues};
use crate::rng;
use crate::tensor::optim::{LrSchedule, OptimizerKind, OptimizerState};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub optimizer: OptimizerKind,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainSchedule {
    /// Momentum SGD, lr 1e-3 decayed ×0.1 at epochs 5 and 10, batch 5,
    /// 15 epochs.
    pub fn classifier() -> Self {
        TrainSchedule {
            optimizer: OptimizerKind::sgd(0.9, 5e-4),
            lr: LrSchedule { base: 1e-3, decay_epochs: vec![5, 10], factor: 0.1 },
            batch_size: 5,
            epochs: 15,
            seed: 0,
        }
    }

    /// Adam at lr 1e-4 with the classifier's decay points.
    pub fn refiner() -> Self {
        TrainSchedule { optimizer: OptimizerKind::adam(), lr: LrSchedule { base: 1e-4, ..Self::classifier().lr }, ..Self::classifier() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if let Some(&e) = self.lr.decay_epochs.iter().find(|&&e| e >= self.epochs) {
            return Err(Error::Config(format!("decay epoch {e} outside {} epochs", self.epochs)));
        }
        if !(self.lr.base >= 0.0 && self.lr.base.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr.base)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        match self.optimizer {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                kv.set("optimizer", "sgd");
                kv.set("momentum", momentum);
                kv.set("weight_decay", weight_decay);
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                kv.set("optimizer", "adam");
                kv.set("beta1", beta1);
                kv.set("beta2", beta2);
                kv.set("eps", eps);
            }
        }
        kv.set("lr", self.lr.base);
        kv.set("decay_epochs", format_list(&self.lr.decay_epochs));
        kv.set("decay_factor", self.lr.factor);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv
    }

    /// Reads keys over `base`; switching optimizer resets its
    /// hyperparameters to their defaults before applying overrides.
    pub fn from_kv(kv: &KeyValues, base: &TrainSchedule) -> Result<Self> {
        kv.reject_unknown(
            "schedule",
            &[
                "optimizer", "momentum", "weight_decay", "beta1", "beta2", "eps", "lr", "decay_epochs",
                "decay_factor", "batch_size", "epochs", "seed",
            ],
        )?;
        let mut optimizer = match kv.raw("optimizer") {
            None => base.optimizer,
            Some("sgd") => match base.optimizer {
                o @ OptimizerKind::Sgd { .. } => o,
                _ => OptimizerKind::sgd(0.9, 5e-4),
            },
            Some("adam") => match base.optimizer {
                o @ OptimizerKind::Adam { .. } => o,
                _ => OptimizerKind::adam(),
            },
            Some(other) => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        };
        match &mut optimizer {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                *momentum = kv.get("momentum")?.unwrap_or(*momentum);
                *weight_decay = kv.get("weight_decay")?.unwrap_or(*weight_decay);
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                *beta1 = kv.get("beta1")?.unwrap_or(*beta1);
                *beta2 = kv.get("beta2")?.unwrap_or(*beta2);
                *eps = kv.get("eps")?.unwrap_or(*eps);
            }
        }
        let sched = TrainSchedule {
            optimizer,
            lr: LrSchedule {
                base: kv.get("lr")?.unwrap_or(base.lr.base),
                decay_epochs: kv.get_list("decay_epochs")?.unwrap_or_else(|| base.lr.decay_epochs.clone()),
                factor: kv.get("decay_factor")?.unwrap_or(base.lr.factor),
            },
            batch_size: kv.get("batch_size")?.unwrap_or(base.batch_size),
            epochs: kv.get("epochs")?.unwrap_or(base.epochs),
            seed: kv.get("seed")?.unwrap_or(base.seed),
        };
        sched.validate()?;
        Ok(sched)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
}

/// Yields augmented mini-batches of one epoch in a seeded order.
fn epoch_batches<'a>(
    samples: &'a [Sample],
    sched: &TrainSchedule,
    aug: &'a AugmentConfig,
    epoch: usize,
) -> impl Iterator<Item = Vec<Sample>> + 'a {
    let epoch_seed = rng::derive_seed(sched.seed, epoch as u64);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::stream(epoch_seed, 0x5AFF1E));
    let batches: Vec<Vec<usize>> = order.chunks(sched.batch_size).map(<[usize]>::to_vec).collect();
    batches.into_iter().map(move |idx| {
        idx.iter().map(|&i| augment(&samples[i], aug, rng::derive_seed(epoch_seed, i as u64))).collect()
    })
}

fn check_inputs(samples: &[Sample], cfg: &NetworkConfig, sched: &TrainSchedule, aug: &AugmentConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if samples.iter().any(|s| s.classes() != cfg.classes) {
        return Err(Error::Config(format!("dataset class count differs from network ({})", cfg.classes)));
    }
    if aug.crop != cfg.input_side {
        return Err(Error::Config(format!("crop {} differs from network input side {}", aug.crop, cfg.input_side)));
    }
    cfg.validate()?;
    sched.validate()
}

/// Backward pass plus one optimizer step; returns the loss.
fn step(
    g: &Graph<f32>,
    loss: NodeId,
    ids: &[NodeId],
    params: &mut ParamStore<f32>,
    opt: &mut OptimizerState<f32>,
    epoch: usize,
    batch: usize,
) -> Result<f64> {
    let value = g.value(loss)?.data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value} at epoch {} batch {batch}", epoch + 1)));
    }
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor<f32>> = ids
        .iter()
        .map(|&id| grads.take(id).ok_or_else(|| Error::Numerical("missing parameter gradient".into())))
        .collect::<Result<_>>()?;
    if grads.iter().any(|t| !t.all_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at epoch {} batch {batch}", epoch + 1)));
    }
    let mut values = params.values();
    opt.step(&mut values, &grads, epoch)?;
    params.set_values(values)?;
    Ok(value)
}

/// Trains the classifier in place with BCE on `P`.
pub fn train_classifier(
    samples: &[Sample],
    cfg: &NetworkConfig,
    sched: &TrainSchedule,
    aug: &AugmentConfig,
    params: &mut ParamStore<f32>,
) -> Result<Vec<EpochStats>> {
    check_inputs(samples, cfg, sched, aug)?;
    params.check_matches(cfg, false)?;
    let mut opt = OptimizerState::new(sched.optimizer, sched.lr.clone());
    let mut log = Vec::with_capacity(sched.epochs);
    for epoch in 0..sched.epochs {
        let mut total = 0.0;
        let mut count = 0;
        for (b, batch) in epoch_batches(samples, sched, aug, epoch).enumerate() {
            let refs: Vec<&Sample> = batch.iter().collect();
            let mut g = Graph::new();
            let net = Bound::new(&mut g, params, true);
            let x = g.constant(batch_images(&refs)?);
            let y = g.constant(batch_labels(&refs)?);
            let out = classifier_forward(&mut g, cfg, &net, x, true)?;
            let loss = g.bce_loss(out.scores, y)?;
            let ids = net.ids().to_vec();
            total += step(&g, loss, &ids, params, &mut opt, epoch, b)?;
            count += 1;
        }
        log.push(EpochStats { epoch: epoch + 1, lr: sched.lr.at_epoch(epoch), loss: total / count as f64 });
    }
    Ok(log)
}

/// Trains the refiner in place to regress the frozen classifier's
/// suppressed localization maps, recomputed on every augmented batch.
pub fn train_refiner(
    samples: &[Sample],
    cfg: &NetworkConfig,
    classifier: &ParamStore<f32>,
    sched: &TrainSchedule,
    aug: &AugmentConfig,
    refiner: &mut ParamStore<f32>,
) -> Result<Vec<EpochStats>> {
    check_inputs(samples, cfg, sched, aug)?;
    classifier.check_matches(cfg, false)?;
    refiner.check_matches(cfg, true)?;
    let mut opt = OptimizerState::new(sched.optimizer, sched.lr.clone());
    let mut log = Vec::with_capacity(sched.epochs);
    for epoch in 0..sched.epochs {
        let mut total = 0.0;
        let mut count = 0;
        for (b, batch) in epoch_batches(samples, sched, aug, epoch).enumerate() {
            let refs: Vec<&Sample> = batch.iter().collect();
            let images = batch_images(&refs)?;
            let present: Vec<u8> = batch.iter().flat_map(|s| s.labels.iter().copied()).collect();
            let (f, _) = predict(cfg, classifier, &images, true)?;
            let target = localization_maps(&f, Some(&present))?;

            let mut g = Graph::new();
            let net = Bound::new(&mut g, refiner, true);
            let x = g.constant(images);
            let t = g.constant(target);
            let out = refiner_forward(&mut g, cfg, &net, x)?;
            let loss = g.mse_loss(out, t)?;
            let ids = net.ids().to_vec();
            total += step(&g, loss, &ids, refiner, &mut opt, epoch, b)?;
            count += 1;
        }
        log.push(EpochStats { epoch: epoch + 1, lr: sched.lr.at_epoch(epoch), loss: total / count as f64 });
    }
    Ok(log)
}

/// Mean over samples of the fraction of classes whose prediction
/// `P^c > 0.5` matches the label.
pub fn multilabel_accuracy(cfg: &NetworkConfig, params: &ParamStore<f32>, samples: &[Sample], batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty set".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (_, p) = predict(cfg, params, &batch_images(&refs)?, true)?;
        for (s, scores) in chunk.iter().zip(p.data().chunks(cfg.classes)) {
            let hits = s.labels.iter().zip(scores).filter(|(&l, &sc)| (sc > 0.5) == (l == 1)).count();
            total += hits as f64 / cfg.classes as f64;
        }
    }
    Ok(total / samples.len() as f64)
}
