//! Anchor state and its refinement: projection into embedding space,
//! augmented-input assembly, anchor-slot extraction and the smoothed update.

use serde::{Deserialize, Serialize};

use crate::backbone::{AnchorAttention, Backbone, SequenceLayout};
use crate::error::{Error, Result};
use crate::halting;
use crate::scalar::Scalar;
use crate::tape::{Graph, ParamId, ParamSet, Var};
use crate::tensor::Tensor;

pub const LEARNED: &str = "anchors.learned";
pub const PROJ_WEIGHT: &str = "anchors.proj_weight";
pub const PROJ_BIAS: &str = "anchors.proj_bias";

/// Standard deviation of the learned anchor initialization.
pub const ANCHOR_INIT_STD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub m: usize,
    pub beta: f64,
    pub k_max: usize,
    pub anchor_attention: AnchorAttention,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            m: 8,
            beta: 0.5,
            k_max: 8,
            anchor_attention: AnchorAttention::Context,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("anchor count m must be at least 1".into()));
        }
        check_beta(self.beta)?;
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("beta {beta} outside (0, 1]")))
    }
}

/// Handles to the anchor tensors: `learned` (m x d), `proj_weight` (d x d)
/// and `proj_bias` (d).
#[derive(Clone, Debug)]
pub struct AnchorParams {
    pub learned: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    m: usize,
    d: usize,
}

impl AnchorParams {
    /// Registers anchors with the given initial values; the projection
    /// starts at the identity with zero bias.
    pub fn init<T: Scalar>(params: &mut ParamSet<T>, learned: Tensor<T>) -> Result<Self> {
        let (m, d) = learned.matrix_dims("anchor init")?;
        if m == 0 || d == 0 {
            return Err(Error::DegenerateInput("anchor matrix must be non-empty"));
        }
        if !learned.is_finite() {
            return Err(Error::Config("anchor initialization must be finite".into()));
        }
        let learned = Tensor::matrix(m, d, learned.into_values())?;
        params.insert(LEARNED, learned)?;
        params.insert(PROJ_WEIGHT, Tensor::eye(d))?;
        params.insert(PROJ_BIAS, Tensor::zeros(&[d]))?;
        Self::bind(params)
    }

    pub fn bind<T: Scalar>(params: &ParamSet<T>) -> Result<Self> {
        let get = |n: &str| params.id(n).ok_or_else(|| Error::Config(format!("missing tensor {n:?}")));
        let (learned, proj_weight, proj_bias) = (get(LEARNED)?, get(PROJ_WEIGHT)?, get(PROJ_BIAS)?);
        let (m, d) = params.get(learned).matrix_dims("anchors")?;
        if params.get(proj_weight).shape() != [d, d] {
            return Err(Error::dim("anchor projection", params.get(proj_weight).shape(), &[d, d]));
        }
        if params.get(proj_bias).shape() != [d] {
            return Err(Error::dim("anchor bias", params.get(proj_bias).shape(), &[d]));
        }
        Ok(AnchorParams {
            learned,
            proj_weight,
            proj_bias,
            m,
            d,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn all(&self) -> [ParamId; 3] {
        [self.learned, self.proj_weight, self.proj_bias]
    }
}

/// The anchors `A^(t)` of one instance and the iteration count `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorState<T> {
    pub anchors: Tensor<T>,
    pub t: usize,
}

pub fn init_anchors<T: Scalar>(anchors: &AnchorParams, params: &ParamSet<T>) -> AnchorState<T> {
    AnchorState {
        anchors: params.get(anchors.learned).detached(),
        t: 0,
    }
}

/// `A * W + b`, row-wise.
pub fn project<T: Scalar>(g: &mut Graph<T>, anchors: &AnchorParams, params: &ParamSet<T>, a: Var) -> Result<Var> {
    if g.value(a).cols() != anchors.d {
        return Err(Error::dim("project", g.shape(a), &[anchors.m, anchors.d]));
    }
    let w = g.param(params, anchors.proj_weight);
    let b = g.param(params, anchors.proj_bias);
    let y = g.matmul(a, w)?;
    g.add_row(y, b)
}

/// Anchors first, then token embeddings.
pub fn assemble_input<T: Scalar>(g: &mut Graph<T>, a_proj: Var, x_emb: Var) -> Result<Var> {
    if g.value(a_proj).is_empty() || g.value(a_proj).rows() == 0 {
        return Err(Error::DegenerateInput("assemble_input needs m >= 1"));
    }
    if g.value(x_emb).rows() == 0 {
        return Err(Error::DegenerateInput("assemble_input needs n >= 1"));
    }
    if g.value(a_proj).cols() != g.value(x_emb).cols() {
        return Err(Error::dim("assemble_input", g.shape(a_proj), g.shape(x_emb)));
    }
    g.concat_rows(&[a_proj, x_emb])
}

pub fn extract_anchor_states<T: Scalar>(g: &mut Graph<T>, hidden: Var, m: usize) -> Result<Var> {
    if m == 0 || m > g.value(hidden).rows() {
        return Err(Error::dim("extract_anchor_states", g.shape(hidden), &[m]));
    }
    g.slice_rows(hidden, 0, m)
}

/// `(1 - beta) * a + beta * a_new`.
pub fn smooth_update<T: Scalar>(g: &mut Graph<T>, a: Var, a_new: Var, beta: f64) -> Result<Var> {
    check_beta(beta)?;
    g.lerp(a, a_new, T::lit(beta))
}

/// Something that maps an augmented embedding sequence to final-layer hidden
/// states. The trained [`Backbone`] is one; the synthetic maps are another.
pub trait AnchorDynamics<T: Scalar> {
    fn hidden_states(&self, g: &mut Graph<T>, input: Var, positions: &[usize], layout: &SequenceLayout) -> Result<Var>;
}

/// A backbone paired with the parameters it reads.
#[derive(Clone, Copy)]
pub struct BoundBackbone<'a, T> {
    pub backbone: &'a Backbone,
    pub params: &'a ParamSet<T>,
}

impl<T: Scalar> AnchorDynamics<T> for BoundBackbone<'_, T> {
    fn hidden_states(&self, g: &mut Graph<T>, input: Var, positions: &[usize], layout: &SequenceLayout) -> Result<Var> {
        self.backbone.forward_hidden(g, self.params, input, positions, layout)
    }
}

/// Anchors take positions `0..m`, tokens `m..m+n`.
pub fn anchored_positions(m: usize, n: usize) -> Vec<usize> {
    (0..m + n).collect()
}

/// One refinement pass on the tape: returns `A^(t+1)` as a node.
#[allow(clippy::too_many_arguments)]
pub fn refine_var<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    x_emb: Var,
    dynamics: &dyn AnchorDynamics<T>,
    anchors: &AnchorParams,
    params: &ParamSet<T>,
    config: &RefinementConfig,
) -> Result<Var> {
    let m = g.value(a).rows();
    let n = g.value(x_emb).rows();
    let a_proj = project(g, anchors, params, a)?;
    let e = assemble_input(g, a_proj, x_emb)?;
    let layout = SequenceLayout::anchored(m, m + n, config.anchor_attention);
    let h = dynamics.hidden_states(g, e, &anchored_positions(m, n), &layout)?;
    let a_new = extract_anchor_states(g, h, m)?;
    smooth_update(g, a, a_new, config.beta)
}

/// One inference refinement step. Returns the next state and the stability
/// delta between the mean anchors before and after the smoothed update.
pub fn refine_step<T: Scalar>(
    g: &mut Graph<T>,
    state: &AnchorState<T>,
    x_emb: Var,
    dynamics: &dyn AnchorDynamics<T>,
    anchors: &AnchorParams,
    params: &ParamSet<T>,
    config: &RefinementConfig,
) -> Result<(AnchorState<T>, T)> {
    if state.t >= config.k_max {
        return Err(Error::Budget {
            t: state.t,
            k_max: config.k_max,
        });
    }
    let a = g.constant(state.anchors.clone());
    let next = refine_var(g, a, x_emb, dynamics, anchors, params, config)?;
    let next = g.value(next).clone();
    let before = halting::mean_anchor(&state.anchors)?;
    let after = halting::mean_anchor(&next)?;
    let delta = halting::stability_delta(&after, &before)?;
    Ok((
        AnchorState {
            anchors: next,
            t: state.t + 1,
        },
        delta,
    ))
}
