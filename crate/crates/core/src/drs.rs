//! Discriminative region suppression.
//!
//! Each channel `k` of a feature map is capped at `τ_k = max(X_k) · g_k`,
//! where the control value `g_k ∈ [0, 1]` comes either from a constant or
//! from a small learnable controller `σ(FC(GAP(X)))`. Values at or below the
//! cap pass through untouched, so the peak is flattened toward its
//! neighbourhood.
//!
//! Channels whose maximum is not positive are passed through unchanged: a
//! cap derived from a negative maximum would lie above every element.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::gradcheck::{GradCase, InputSpec};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControllerMode {
    Learnable,
    Constant,
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerMode::Learnable => "learnable",
            ControllerMode::Constant => "constant",
        })
    }
}

impl FromStr for ControllerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(ControllerMode::Learnable),
            "constant" => Ok(ControllerMode::Constant),
            other => Err(Error::Config(format!("unknown controller mode {other:?}"))),
        }
    }
}

/// Suppression settings shared by every plug-in site of a network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrsConfig {
    pub mode: ControllerMode,
    /// Control value used by the constant controller.
    pub delta: f64,
}

impl DrsConfig {
    pub fn constant(delta: f64) -> Result<Self> {
        let cfg = DrsConfig { mode: ControllerMode::Constant, delta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn learnable() -> Self {
        DrsConfig { mode: ControllerMode::Learnable, delta: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidArgument(format!("delta {} outside [0, 1]", self.delta)));
        }
        Ok(())
    }
}

/// Controller of one plug-in site, bound to a graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Controller {
    Constant { delta: f64 },
    /// Square `K × K` FC weight and `K` bias recorded on the graph.
    Learnable { weight: NodeId, bias: NodeId },
}

/// Per-channel control values `G ∈ [0,1]^{N×K×1×1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ControlValues(pub NodeId);

/// Per-channel cap `τ = X_max · G`, shape `N×K×1×1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpperBound(pub NodeId);

/// Per-channel global maximum, `N×K×1×1`.
pub fn extract_max<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    g.global_max_pool(x)
}

/// `G = σ(FC(GAP(X)))` with a square FC layer.
pub fn control_learnable<T: Scalar>(g: &mut Graph<T>, x: NodeId, weight: NodeId, bias: NodeId) -> Result<ControlValues> {
    let (n, k, _, _) = g.value(x)?.dims4()?;
    let wshape = g.value(weight)?.shape().to_vec();
    if wshape != [k, k] || g.value(bias)?.shape() != [k] {
        return Err(Error::shape(
            "control_learnable",
            format!("controller for {k} channels needs {k}x{k} weight and {k} bias, got {wshape:?}"),
        ));
    }
    let pooled = g.global_avg_pool(x)?;
    let flat = g.reshape(pooled, [n, k])?;
    let logits = g.fully_connected(flat, weight, bias)?;
    let gates = g.sigmoid(logits)?;
    Ok(ControlValues(g.reshape(gates, [n, k, 1, 1])?))
}

/// Constant-filled control values, not differentiated.
pub fn control_constant<T: Scalar>(g: &mut Graph<T>, n: usize, k: usize, delta: f64) -> Result<ControlValues> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!("delta {delta} outside [0, 1]")));
    }
    Ok(ControlValues(g.constant(Tensor::full([n, k, 1, 1], T::lit(delta)))))
}

pub fn upper_bound<T: Scalar>(g: &mut Graph<T>, x_max: NodeId, control: ControlValues) -> Result<UpperBound> {
    let tau = g.mul(x_max, control.0)?;
    Ok(UpperBound(tau))
}

/// `min(X, τ)` per channel, leaving channels with a non-positive maximum
/// untouched.
pub fn suppress<T: Scalar>(g: &mut Graph<T>, x: NodeId, control: ControlValues) -> Result<NodeId> {
    let (n, k, _, _) = g.value(x)?.dims4()?;
    let gshape = g.value(control.0)?.shape().to_vec();
    if gshape != [n, k, 1, 1] {
        return Err(Error::shape("suppress", format!("control values {gshape:?} for input with N={n}, K={k}")));
    }
    let x_max = extract_max(g, x)?;
    let UpperBound(tau) = upper_bound(g, x_max, control)?;
    // min(X, X_max) == X, so substituting X_max for τ is a pass-through.
    let cap = g.select_positive(x_max, tau, x_max)?;
    g.minimum(x, cap)
}

/// Extractor, controller and suppressor applied in sequence.
pub fn drs_forward<T: Scalar>(g: &mut Graph<T>, x: NodeId, controller: Controller) -> Result<NodeId> {
    let (n, k, _, _) = g.value(x)?.dims4()?;
    let control = match controller {
        Controller::Constant { delta } => control_constant(g, n, k, delta)?,
        Controller::Learnable { weight, bias } => control_learnable(g, x, weight, bias)?,
    };
    suppress(g, x, control)
}

/// Gradient-check cases for the suppression block.
pub fn gradcheck_cases() -> Vec<GradCase> {
    vec![
        GradCase::new(
            "drs_learnable",
            vec![InputSpec::uniform([2, 3, 4, 4], 0.0, 1.0), InputSpec::new([3, 3]), InputSpec::new([3])],
            |g, x| drs_forward(g, x[0], Controller::Learnable { weight: x[1], bias: x[2] }),
        ),
        GradCase::new(
            "drs_learnable_signed_input",
            vec![InputSpec::new([1, 4, 3, 3]), InputSpec::new([4, 4]), InputSpec::new([4])],
            |g, x| drs_forward(g, x[0], Controller::Learnable { weight: x[1], bias: x[2] }),
        ),
        GradCase::new("drs_constant", vec![InputSpec::uniform([2, 3, 4, 4], 0.0, 1.0)], |g, x| {
            drs_forward(g, x[0], Controller::Constant { delta: 0.55 })
        }),
        GradCase::new(
            "conv_relu_drs_gap",
            vec![
                InputSpec::new([1, 2, 6, 6]),
                InputSpec::new([3, 2, 3, 3]),
                InputSpec::new([3]),
                InputSpec::new([3, 3]),
                InputSpec::new([3]),
            ],
            |g, x| {
                let h = g.conv2d(x[0], x[1], x[2], 1, 1)?;
                let h = g.relu(h)?;
                let h = drs_forward(g, h, Controller::Learnable { weight: x[3], bias: x[4] })?;
                g.global_avg_pool(h)
            },
        ),
    ]
}
