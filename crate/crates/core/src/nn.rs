//! Transformer building blocks expressed over tape variables.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{contract, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive attention-mask value for disallowed positions. Finite so that
/// `masked + finite` never produces NaN; `exp` of it underflows to 0.
pub const MASKED: f64 = -1e30;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = store.glorot(format!("{name}.w"), d_in, d_out, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), d_out));
        Self { w, b }
    }

    /// All-zero weights; the layer starts as a constant.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.insert(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]));
        let b = bias.then(|| store.zeros(format!("{name}.b"), d_out));
        Self { w, b }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.var(self.w))?;
        match self.b {
            Some(b) => y.add(p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), d),
            beta: store.zeros(format!("{name}.beta"), d),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta))
    }
}

/// Two-layer ReLU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, d, true, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.inner.forward(p, x)?.relu();
        self.outer.forward(p, h)
    }
}

/// Scaled dot-product attention for one head. `mask` is additive.
/// Returns the attended values and the softmax weights.
pub fn attend<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, mask: Option<Var<'t>>) -> Result<(Var<'t>, Var<'t>)> {
    let dh = q.value().cols() as f64;
    let mut scores = q.matmul(k.transpose()?)?.scale(1.0 / dh.sqrt());
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    let weights = scores.softmax()?;
    Ok((weights.matmul(v)?, weights))
}

/// Splits `q`, `k`, `v` into `heads` contiguous column groups, attends per
/// head and concatenates the results.
pub fn multi_head<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    mask: Option<Var<'t>>,
) -> Result<(Var<'t>, Vec<Arc<Tensor>>)> {
    let d = q.value().cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(contract(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (o, w) = attend(
            q.slice_cols(h * dh, dh)?,
            k.slice_cols(h * dh, dh)?,
            v.slice_cols(h * dh, dh)?,
            mask,
        )?;
        outs.push(o);
        weights.push(w.value());
    }
    let out = if heads == 1 { outs[0] } else { Var::concat(&outs)? };
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, true, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, true, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, true, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, true, rng),
            heads,
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>, mask: Option<Var<'t>>) -> Result<(Var<'t>, Vec<Arc<Tensor>>)> {
        let q = self.wq.forward(p, x)?;
        let k = self.wk.forward(p, x)?;
        let v = self.wv.forward(p, x)?;
        let (h, w) = multi_head(q, k, v, self.heads, mask)?;
        Ok((self.wo.forward(p, h)?, w))
    }
}

/// Post-norm transformer layer: masked self-attention, residual, layer
/// norm, feed-forward, residual, layer norm.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: SelfAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attn: SelfAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>, mask: Option<Var<'t>>) -> Result<(Var<'t>, Vec<Arc<Tensor>>)> {
        let (a, w) = self.attn.forward(p, x, mask)?;
        let h = self.ln1.forward(p, x.add(a)?)?;
        let f = self.ffn.forward(p, h)?;
        Ok((self.ln2.forward(p, h.add(f)?)?, w))
    }
}

/// Sinusoidal position encodings, `len × d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(len, d, data).expect("sized")
}

/// Positions `0..len` restarted at the beginning of every block.
pub fn block_positions(lengths: &[usize], d: usize) -> Tensor {
    let longest = lengths.iter().copied().max().unwrap_or(1);
    let table = sinusoidal_positions(longest, d);
    let mut data = Vec::new();
    for &l in lengths {
        for pos in 0..l {
            data.extend_from_slice(table.row(pos));
        }
    }
    Tensor::matrix(lengths.iter().sum(), d, data).expect("sized")
}

/// Additive mask letting frame `t` see frames `[t-left, t+right]`.
pub fn window_mask(len: usize, left: usize, right: usize) -> Tensor {
    let mut data = vec![MASKED; len * len];
    for t in 0..len {
        let lo = t.saturating_sub(left);
        let hi = (t + right).min(len - 1);
        for s in lo..=hi {
            data[t * len + s] = 0.0;
        }
    }
    Tensor::matrix(len, len, data).expect("sized")
}

/// Block-diagonal causal mask: independent sequences stacked row-wise, each
/// position attending to itself and earlier positions of its own block.
pub fn block_causal_mask(lengths: &[usize]) -> Tensor {
    let n: usize = lengths.iter().sum();
    let mut data = vec![MASKED; n * n];
    let mut start = 0;
    for &l in lengths {
        for i in 0..l {
            for j in 0..=i {
                data[(start + i) * n + start + j] = 0.0;
            }
        }
        start += l;
    }
    Tensor::matrix(n, n, data).expect("sized")
}
