//! Layers shared by the audio encoder and the motion generator.

use std::sync::Arc;

use super::graph::{Graph, Var};
use super::mask::AttentionMask;
use super::params::{Bound, ParamId, ParamSet};
use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngState) -> Self {
        let w = ps.add_linear_weight(&format!("{name}.w"), fan_in, fan_out, rng);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    /// Weights and bias start at zero.
    pub fn zeros(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_row(y, p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], LN_EPS)
    }
}

/// Pre-norm transformer block: RoPE self-attention under an explicit mask,
/// then a SiLU MLP. Every op is per-row except the masked attention.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut RngState) -> Self {
        Self {
            norm1: Norm::new(ps, &format!("{name}.norm1"), dim),
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
            norm2: Norm::new(ps, &format!("{name}.norm2"), dim),
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, 2 * dim, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), 2 * dim, dim, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mask: Arc<AttentionMask>,
        positions: &[usize],
        rope_base: f64,
    ) -> Result<Var> {
        let dim = g.value(x).cols();
        let head_dim = dim / self.heads;
        let h = self.norm1.forward(g, p, x)?;
        let q = self.q.forward(g, p, h)?;
        let k = self.k.forward(g, p, h)?;
        let v = self.v.forward(g, p, h)?;
        let q = g.rope(q, positions, rope_base, head_dim)?;
        let k = g.rope(k, positions, rope_base, head_dim)?;
        let a = g.attention(q, k, v, mask, self.heads)?;
        let a = self.o.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.silu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }
}
