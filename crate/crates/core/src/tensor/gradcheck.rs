//! Central-difference verification of backward rules.
//!
//! The operation under test is rebuilt in `f64` on a fresh graph for every
//! probe. Its output is contracted with a fixed random weight tensor so that
//! every output element contributes a distinct amount to the scalar loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Graph, NodeId, Tensor};

pub type OpUnderTest = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

#[derive(Clone, Debug, PartialEq)]
pub struct InputSpec {
    pub shape: Vec<usize>,
    pub low: f64,
    pub high: f64,
    /// Sample from `{0, 1}` instead of `[low, high)`.
    pub binary: bool,
    pub differentiable: bool,
}

impl InputSpec {
    pub fn uniform(shape: impl Into<Vec<usize>>, low: f64, high: f64) -> Self {
        InputSpec { shape: shape.into(), low, high, binary: false, differentiable: true }
    }

    /// Standard input in `[-1, 1)`.
    pub fn new(shape: impl Into<Vec<usize>>) -> Self {
        Self::uniform(shape, -1.0, 1.0)
    }

    pub fn binary(shape: impl Into<Vec<usize>>) -> Self {
        InputSpec { shape: shape.into(), low: 0.0, high: 1.0, binary: true, differentiable: false }
    }

    pub fn fixed(mut self) -> Self {
        self.differentiable = false;
        self
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        if self.binary {
            Tensor::from_fn(self.shape.clone(), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
        } else {
            Tensor::uniform(self.shape.clone(), self.low, self.high, rng)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Minimum distance from any kink; closer samples are redrawn.
    pub tie_margin: f64,
    pub max_resamples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-3, tie_margin: 1e-2, max_resamples: 200 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all input elements.
    pub max_rel_error: f64,
    pub resamples: usize,
}

fn evaluate(op: &OpUnderTest, inputs: &[Tensor<f64>], specs: &[InputSpec], weights: Option<&Tensor<f64>>, track: bool) -> Result<(Graph<f64>, Vec<NodeId>, NodeId, Tensor<f64>)> {
    let mut g = if track { Graph::with_tie_tracking() } else { Graph::new() };
    let ids: Vec<NodeId> = inputs
        .iter()
        .zip(specs)
        .map(|(t, s)| g.leaf(t.clone(), s.differentiable))
        .collect();
    let out = op(&mut g, &ids)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => {
            // Deterministic contraction weights derived from the output shape.
            let shape = g.value(out)?.shape().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().fold(17u64, |a, &d| a * 31 + d as u64));
            Tensor::uniform(shape, 0.5, 1.5, &mut rng)
        }
    };
    let wid = g.constant(w.clone());
    let prod = g.mul(out, wid)?;
    let loss = g.sum(prod)?;
    Ok((g, ids, loss, w))
}

fn probe(op: &OpUnderTest, inputs: &[Tensor<f64>], specs: &[InputSpec], w: &Tensor<f64>) -> Result<f64> {
    let (g, _, loss, _) = evaluate(op, inputs, specs, Some(w), false)?;
    Ok(g.value(loss)?.data()[0])
}

pub fn grad_check(op: &OpUnderTest, inputs: &[InputSpec], seed: u64) -> Result<GradCheckReport> {
    grad_check_with(op, inputs, seed, GradCheckConfig::default())
}

pub fn grad_check_with(op: &OpUnderTest, specs: &[InputSpec], seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for resamples in 0..=cfg.max_resamples {
        let inputs: Vec<Tensor<f64>> = specs.iter().map(|s| s.sample(&mut rng)).collect();
        let (g, ids, loss, w) = evaluate(op, &inputs, specs, None, true)?;
        if g.tie_gap() < cfg.tie_margin {
            continue;
        }
        let grads = g.backward(loss)?;
        let mut worst = 0.0f64;
        for (i, spec) in specs.iter().enumerate() {
            if !spec.differentiable {
                continue;
            }
            let analytic = grads.get(ids[i]).ok_or(Error::ForeignNode)?;
            for j in 0..inputs[i].numel() {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] += cfg.step;
                let plus = probe(op, &shifted, specs, &w)?;
                shifted[i].data_mut()[j] -= 2.0 * cfg.step;
                let minus = probe(op, &shifted, specs, &w)?;
                let numeric = (plus - minus) / (2.0 * cfg.step);
                let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
                worst = worst.max(err);
            }
        }
        return Ok(GradCheckReport { max_rel_error: worst, resamples });
    }
    Err(Error::Numerical(format!(
        "no sample at least {} away from a kink after {} draws",
        cfg.tie_margin, cfg.max_resamples
    )))
}

/// A named operation plus the inputs it is checked on.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<InputSpec>,
    pub op: Box<OpUnderTest>,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<InputSpec>,
        op: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'static,
    ) -> Self {
        GradCase { name: name.into(), inputs, op: Box::new(op) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub seeds: usize,
    pub passed: bool,
    pub failure: Option<String>,
}

/// Runs every case over `seeds`, failing a case whose worst error reaches
/// `tolerance` or whose evaluation errors out.
pub fn run_suite(cases: &[GradCase], seeds: &[u64], tolerance: f64) -> Vec<CaseResult> {
    cases
        .iter()
        .map(|case| {
            let mut worst = 0.0f64;
            let mut failure = None;
            for &seed in seeds {
                match grad_check(case.op.as_ref(), &case.inputs, seed) {
                    Ok(r) => worst = worst.max(r.max_rel_error),
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                }
            }
            CaseResult {
                name: case.name.clone(),
                max_rel_error: worst,
                seeds: seeds.len(),
                passed: failure.is_none() && worst < tolerance,
                failure,
            }
        })
        .collect()
}

/// Cases for every differentiable engine operation.
pub fn engine_cases() -> Vec<GradCase> {
    vec![
        GradCase::new("add", vec![InputSpec::new([2, 3]), InputSpec::new([2, 3])], |g, x| g.add(x[0], x[1])),
        GradCase::new("add_broadcast", vec![InputSpec::new([2, 3, 4, 4]), InputSpec::new([2, 3, 1, 1])], |g, x| {
            g.add(x[0], x[1])
        }),
        GradCase::new("mul", vec![InputSpec::new([2, 3]), InputSpec::new([2, 3])], |g, x| g.mul(x[0], x[1])),
        GradCase::new("mul_broadcast", vec![InputSpec::new([2, 3, 4, 4]), InputSpec::new([1, 3, 1, 4])], |g, x| {
            g.mul(x[0], x[1])
        }),
        GradCase::new("minimum", vec![InputSpec::new([3, 4]), InputSpec::new([3, 4])], |g, x| g.minimum(x[0], x[1])),
        GradCase::new("minimum_broadcast", vec![InputSpec::new([2, 3, 3, 3]), InputSpec::new([2, 3, 1, 1])], |g, x| {
            g.minimum(x[0], x[1])
        }),
        GradCase::new(
            "select_positive",
            vec![InputSpec::new([2, 3]).fixed(), InputSpec::new([2, 3]), InputSpec::new([2, 3])],
            |g, x| g.select_positive(x[0], x[1], x[2]),
        ),
        GradCase::new("relu", vec![InputSpec::new([3, 5])], |g, x| g.relu(x[0])),
        GradCase::new("sigmoid", vec![InputSpec::uniform([3, 5], -3.0, 3.0)], |g, x| g.sigmoid(x[0])),
        GradCase::new(
            "conv2d",
            vec![InputSpec::new([1, 2, 5, 5]), InputSpec::new([3, 2, 3, 3]), InputSpec::new([3])],
            |g, x| g.conv2d(x[0], x[1], x[2], 1, 0),
        ),
        GradCase::new(
            "conv2d_padded_strided",
            vec![InputSpec::new([2, 2, 6, 5]), InputSpec::new([3, 2, 3, 3]), InputSpec::new([3])],
            |g, x| g.conv2d(x[0], x[1], x[2], 2, 1),
        ),
        GradCase::new(
            "conv2d_pointwise",
            vec![InputSpec::new([2, 3, 4, 4]), InputSpec::new([2, 3, 1, 1]), InputSpec::new([2])],
            |g, x| g.conv2d(x[0], x[1], x[2], 1, 0),
        ),
        GradCase::new("maxpool2d", vec![InputSpec::new([1, 2, 4, 4])], |g, x| g.maxpool2d(x[0], 2, 2)),
        GradCase::new("global_avg_pool", vec![InputSpec::new([2, 3, 4, 4])], |g, x| g.global_avg_pool(x[0])),
        GradCase::new("global_max_pool", vec![InputSpec::new([2, 3, 4, 4])], |g, x| g.global_max_pool(x[0])),
        GradCase::new(
            "fully_connected",
            vec![InputSpec::new([2, 3]), InputSpec::new([3, 4]), InputSpec::new([4])],
            |g, x| g.fully_connected(x[0], x[1], x[2]),
        ),
        GradCase::new("reshape", vec![InputSpec::new([2, 3, 1, 1])], |g, x| g.reshape(x[0], [2, 3])),
        GradCase::new(
            "bce_loss",
            vec![InputSpec::uniform([2, 4], 0.05, 0.95), InputSpec::binary([2, 4])],
            |g, x| g.bce_loss(x[0], x[1]),
        ),
        GradCase::new("mse_loss", vec![InputSpec::new([2, 4]), InputSpec::new([2, 4])], |g, x| g.mse_loss(x[0], x[1])),
        GradCase::new(
            "conv_relu_gap_fc_sigmoid_bce",
            vec![
                InputSpec::new([2, 2, 5, 5]),
                InputSpec::new([3, 2, 3, 3]),
                InputSpec::new([3]),
                InputSpec::new([3, 2]),
                InputSpec::new([2]),
                InputSpec::binary([2, 2]),
            ],
            |g, x| {
                let h = g.conv2d(x[0], x[1], x[2], 1, 1)?;
                let h = g.relu(h)?;
                let h = g.global_avg_pool(h)?;
                let h = g.reshape(h, [2, 3])?;
                let h = g.fully_connected(h, x[3], x[4])?;
                let p = g.sigmoid(h)?;
                g.bce_loss(p, x[5])
            },
        ),
    ]
}
