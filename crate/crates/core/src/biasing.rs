//! Cross-attention context biasing.
//!
//! Queries come from audio (or label) embeddings and keys and values from
//! context embeddings, all passed through an activation `σ`. Every block
//! attends to the context, then applies a residual, a layer norm, a
//! feed-forward layer, a second residual and a second layer norm. The
//! combiner joins the layer-normed original queries with the layer-normed
//! block output and projects the pair to `d_ca`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::config::{Activation, BiasingConfig};
use crate::error::{contract, Result};
use crate::nn::{multi_head, FeedForward, LayerNorm, Linear};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

fn activate(x: Var<'_>, act: Activation) -> Var<'_> {
    match act {
        Activation::Tanh => x.tanh(),
        Activation::Relu => x.relu(),
        Activation::Identity => x,
    }
}

/// Softmax weights of one cross-attention call, rows = queries, columns =
/// context phrases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub heads: Vec<Tensor>,
    pub phrases: Vec<String>,
    pub rows: Vec<String>,
}

impl AttentionRecord {
    pub fn from_weights(weights: &[Arc<Tensor>]) -> Self {
        Self {
            heads: weights.iter().map(|w| (**w).clone()).collect(),
            phrases: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Per-entry mean over heads.
    pub fn mean(&self) -> Tensor {
        let mut acc = self.heads[0].clone();
        for h in &self.heads[1..] {
            acc.add_assign(h);
        }
        acc.map(|x| x / self.heads.len() as f64)
    }
}

/// One cross-attention block. The value projection starts at zero, so a
/// fresh block passes its query through unchanged by the context.
#[derive(Clone, Debug)]
pub struct BiasingBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    /// Bridges the query width to `d` for the residual when they differ.
    pub residual: Option<Linear>,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
    pub heads: usize,
    pub activation: Activation,
}

impl BiasingBlock {
    pub fn new(store: &mut ParamStore, name: &str, d_query: usize, d_c: usize, cfg: &BiasingConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d;
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), d_query, d, true, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d_c, d, true, rng),
            wv: Linear::zeros(store, &format!("{name}.wv"), d_c, d, true),
            residual: (d_query != d).then(|| Linear::new(store, &format!("{name}.residual"), d_query, d, false, rng)),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            heads: cfg.heads,
            activation: cfg.activation,
        }
    }

    pub fn project_qkv<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>, c: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        if c.value().rows() == 0 {
            return Err(contract("cross-attention needs at least one context phrase"));
        }
        let q = activate(self.wq.forward(p, x)?, self.activation);
        let k = activate(self.wk.forward(p, c)?, self.activation);
        let v = activate(self.wv.forward(p, c)?, self.activation);
        Ok((q, k, v))
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>, c: Var<'t>) -> Result<(Var<'t>, Vec<Arc<Tensor>>)> {
        let (q, k, v) = self.project_qkv(p, x, c)?;
        let (h, w) = cross_attention(q, k, v, self.heads)?;
        let skip = match &self.residual {
            Some(r) => r.forward(p, x)?,
            None => x,
        };
        let h = self.ln1.forward(p, skip.add(h)?)?;
        let f = self.ffn.forward(p, h)?;
        Ok((self.ln2.forward(p, h.add(f)?)?, w))
    }
}

/// Multi-head attention of queries onto context rows. No masking and no
/// output projection.
pub fn cross_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<(Var<'t>, Vec<Arc<Tensor>>)> {
    multi_head(q, k, v, heads, None)
}

/// Stacked biasing blocks followed by the combiner, for one query source.
#[derive(Clone, Debug)]
pub struct BiasingBranch {
    pub blocks: Vec<BiasingBlock>,
    pub ln_query: LayerNorm,
    pub ln_context: LayerNorm,
    pub project: Linear,
}

/// Output of a branch plus the attention weights of every block.
pub struct BranchOutput<'t> {
    pub out: Var<'t>,
    pub attention: Vec<Vec<Arc<Tensor>>>,
}

impl BiasingBranch {
    pub fn new(store: &mut ParamStore, name: &str, d_query: usize, d_c: usize, cfg: &BiasingConfig, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let d_in = if b == 0 { d_query } else { cfg.d };
                BiasingBlock::new(store, &format!("{name}.block{b}"), d_in, d_c, cfg, rng)
            })
            .collect();
        let project = Linear::new(store, &format!("{name}.combine.project"), d_query + cfg.d, cfg.d_ca, true, rng);
        // Rows reading the biased half start at zero: a fresh branch is a
        // plain projection of its query.
        store.get_mut(project.w).data_mut()[d_query * cfg.d_ca..].fill(0.0);
        Self {
            blocks,
            ln_query: LayerNorm::new(store, &format!("{name}.combine.ln_query"), d_query),
            ln_context: LayerNorm::new(store, &format!("{name}.combine.ln_context"), cfg.d),
            project,
        }
    }

    /// `[LayerNorm(x), LayerNorm(h)]` projected to `d_ca`.
    pub fn combine<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let (rx, rh) = (x.value().rows(), h.value().rows());
        if rx != rh {
            return Err(contract(format!("combine: {rx} query rows vs {rh} biased rows")));
        }
        let joined = Var::concat(&[self.ln_query.forward(p, x)?, self.ln_context.forward(p, h)?])?;
        self.project.forward(p, joined)
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>, c: Var<'t>) -> Result<BranchOutput<'t>> {
        let mut h = x;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, w) = block.forward(p, h, c)?;
            h = y;
            attention.push(w);
        }
        Ok(BranchOutput {
            out: self.combine(p, x, h)?,
            attention,
        })
    }
}

/// Audio-query biasing: context-aware audio embeddings `H_CA`.
pub fn bias_audio<'t>(p: &Binder<'t, '_>, branch: &BiasingBranch, x: Var<'t>, c: Var<'t>) -> Result<BranchOutput<'t>> {
    branch.forward(p, x, c)
}

/// Both branches over the same context: `(H_CA, H_CL)`.
pub fn bias_audio_and_label<'t>(
    p: &Binder<'t, '_>,
    audio: &BiasingBranch,
    label: &BiasingBranch,
    x: Var<'t>,
    y: Var<'t>,
    c: Var<'t>,
) -> Result<(BranchOutput<'t>, BranchOutput<'t>)> {
    Ok((audio.forward(p, x, c)?, label.forward(p, y, c)?))
}
