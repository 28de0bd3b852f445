//! Dense `f64` numeric kernel with reverse-mode differentiation.

pub mod graph;
pub mod mask;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

use std::sync::Arc;

pub use graph::{Gradients, Graph, LerpRow, Var};
pub use mask::AttentionMask;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamSet};
pub use rng::RngState;
pub use tensor::Tensor;

use crate::error::Result;

/// Multi-head attention of `q` over `k`/`v` restricted to `mask`.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let o = g.attention(q, k, v, Arc::new(mask.clone()), heads)?;
    Ok(g.value(o).clone())
}

/// Rotary embedding with a single block spanning the whole feature dim.
pub fn rope_apply(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let r = g.rope(v, positions, base, x.cols())?;
    Ok(g.value(r).clone())
}

/// Per-timestep layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, gain, bias) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let y = g.layer_norm(x, gain, bias, eps)?;
    Ok(g.value(y).clone())
}
