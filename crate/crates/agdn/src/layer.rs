//! One diffusion layer: encode, K-hop propagation, hop-wise attention
//! combination, multi-head averaging, and a shared linear residual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::{
    add, concat_cols, dropout, leaky_relu, matmul, row_mul, scale, slice_col, softmax_rows,
};
use crate::tensor::{Tape, Tensor};
use crate::transition::{build_att_gcn_transition, build_gcn_transition, TransitionMatrix};

/// Which transition matrix the layers aggregate with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Fixed degree-normalized transition.
    #[serde(rename = "gcn-ha")]
    GcnHa,
    /// Learned attention transition with degree rescaling.
    #[serde(rename = "gat-ha")]
    GatHa,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "gcn-ha" => Ok(Variant::GcnHa),
            "gat-ha" => Ok(Variant::GatHa),
            other => Err(Error::Config(format!(
                "unknown variant `{other}`; expected gcn-ha or gat-ha"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::GcnHa => write!(f, "gcn-ha"),
            Variant::GatHa => write!(f, "gat-ha"),
        }
    }
}

/// Per-head trainable tensors.
#[derive(Clone)]
pub struct HeadParams {
    /// Encoder `d_in x d_out`.
    pub w: Tensor,
    /// Hop-attention vector `2 d_out x 1`.
    pub a_hw: Tensor,
    /// Edge-attention vector `2 d_out x 1`; present only for [`Variant::GatHa`].
    pub a_edge: Option<Tensor>,
}

/// One layer's trainable tensors: per-head parameters plus the shared
/// residual projection.
#[derive(Clone)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// Residual projection `d_in x d_out`, applied once after head averaging.
    pub w_r: Tensor,
}

/// Structural configuration of a layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerConfig {
    pub variant: Variant,
    /// Number of diffusion steps K; the hop stack has K+1 entries.
    pub hops: usize,
    pub leaky_slope: f64,
    /// Dropout rate on attention edge weights (training mode only).
    pub attn_drop: f64,
    /// Also drop hop-attention weights at the same rate. Off by default:
    /// edge coefficients are the primary attention surface.
    pub attn_drop_on_hops: bool,
}

/// Linear encoding into the layer width.
pub fn encode(tape: &Tape, h_prev: &Tensor, w: &Tensor) -> Result<Tensor> {
    matmul(tape, h_prev, w)
}

/// Hop stack `[h0, T h0, T^2 h0, ..., T^K h0]` by repeated sparse products;
/// no matrix power is ever materialized.
pub fn diffuse(
    tape: &Tape,
    t: &TransitionMatrix,
    h0: &Tensor,
    hops: usize,
) -> Result<Vec<Tensor>> {
    let mut stack = Vec::with_capacity(hops + 1);
    stack.push(h0.clone());
    for _ in 0..hops {
        let next = t.apply(tape, stack.last().unwrap())?;
        stack.push(next);
    }
    Ok(stack)
}

/// Per-node softmax over hops: row `i` of the result holds the weights
/// assigned to hops `0..=K`, each row summing to 1.
///
/// The logit for hop `k` pairs the hop-0 representation with the hop-k one:
/// `leaky([h^(0)_i || h^(k)_i] . a_hw)`.
pub fn hop_attention(
    tape: &Tape,
    stack: &[Tensor],
    a_hw: &Tensor,
    slope: f64,
) -> Result<Tensor> {
    let Some(h0) = stack.first() else {
        return Err(Error::shape("hop_attention", "empty hop stack"));
    };
    let d = h0.cols();
    if a_hw.shape() != (2 * d, 1) {
        return Err(Error::shape(
            "hop_attention",
            format!("attention vector {:?} for width {d}", a_hw.shape()),
        ));
    }
    let mut logit_cols = Vec::with_capacity(stack.len());
    for hk in stack {
        let cat = concat_cols(tape, &[h0.clone(), hk.clone()])?;
        logit_cols.push(matmul(tape, &cat, a_hw)?);
    }
    let logits = concat_cols(tape, &logit_cols)?;
    let activated = leaky_relu(tape, &logits, slope)?;
    softmax_rows(tape, &activated)
}

/// Weighted hop combination: `out[i] = sum_k att[i, k] * stack[k][i]`.
pub fn combine(tape: &Tape, stack: &[Tensor], att: &Tensor) -> Result<Tensor> {
    if stack.is_empty() {
        return Err(Error::shape("combine", "empty hop stack"));
    }
    let (n, d) = stack[0].shape();
    if att.shape() != (n, stack.len()) {
        return Err(Error::shape(
            "combine",
            format!(
                "attention {:?} for {} hops over {n} nodes",
                att.shape(),
                stack.len()
            ),
        ));
    }
    let mut out: Option<Tensor> = None;
    for (k, hk) in stack.iter().enumerate() {
        if hk.shape() != (n, d) {
            return Err(Error::shape("combine", "hop stack entries differ in shape"));
        }
        let weights = slice_col(tape, att, k)?;
        let term = row_mul(tape, hk, &weights)?;
        out = Some(match out {
            Some(acc) => add(tape, &acc, &term)?,
            None => term,
        });
    }
    Ok(out.unwrap())
}

/// Full layer: per-head encode → transition → diffusion → hop attention →
/// combine, averaged over heads, plus the shared residual `h_prev . w_r`.
pub fn layer_forward<R: Rng>(
    tape: &Tape,
    g: &Graph,
    h_prev: &Tensor,
    params: &LayerParams,
    cfg: &LayerConfig,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if params.heads.is_empty() {
        return Err(Error::Config("layer needs at least one head".into()));
    }
    let shared_gcn = match cfg.variant {
        Variant::GcnHa => Some(build_gcn_transition(g)?),
        Variant::GatHa => None,
    };
    let mut head_sum: Option<Tensor> = None;
    for head in &params.heads {
        let h0 = encode(tape, h_prev, &head.w)?;
        let transition = match cfg.variant {
            Variant::GcnHa => shared_gcn.clone().unwrap(),
            Variant::GatHa => {
                let a_edge = head.a_edge.as_ref().ok_or_else(|| {
                    Error::Config("attention variant requires an edge-attention vector".into())
                })?;
                let t = build_att_gcn_transition(tape, g, &h0, a_edge, cfg.leaky_slope)?;
                if training && cfg.attn_drop > 0.0 {
                    let dropped = dropout(tape, t.weights(), cfg.attn_drop, rng)?;
                    t.with_weights(dropped)?
                } else {
                    t
                }
            }
        };
        let stack = diffuse(tape, &transition, &h0, cfg.hops)?;
        let mut att = hop_attention(tape, &stack, &head.a_hw, cfg.leaky_slope)?;
        if training && cfg.attn_drop_on_hops && cfg.attn_drop > 0.0 {
            att = dropout(tape, &att, cfg.attn_drop, rng)?;
        }
        let head_out = combine(tape, &stack, &att)?;
        head_sum = Some(match head_sum {
            Some(acc) => add(tape, &acc, &head_out)?,
            None => head_out,
        });
    }
    let averaged = scale(tape, &head_sum.unwrap(), 1.0 / params.heads.len() as f64)?;
    let residual = matmul(tape, h_prev, &params.w_r)?;
    add(tape, &averaged, &residual)
}
