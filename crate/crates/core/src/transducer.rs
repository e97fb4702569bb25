//! Transformer transducer: windowed audio encoder, causal label encoder and
//! the joint network producing `log p(k | t, u)`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::{AudioEncoderConfig, LabelEncoderConfig};
use crate::error::{config, Error, Result};
use crate::nn::{block_causal_mask, block_positions, sinusoidal_positions, window_mask, Linear, TransformerLayer};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-layer, per-head self-attention weights.
pub type LayerWeights = Vec<Vec<Arc<Tensor>>>;

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub input: Linear,
    pub layers: Vec<TransformerLayer>,
    pub cfg: AudioEncoderConfig,
    pub input_dim: usize,
}

impl AudioEncoder {
    pub fn new(store: &mut ParamStore, input_dim: usize, cfg: &AudioEncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Self {
            input: Linear::new(store, "audio.input", input_dim, d, true, rng),
            layers: (0..cfg.layers)
                .map(|l| TransformerLayer::new(store, &format!("audio.layer{l}"), d, cfg.heads, cfg.ffn_dim, rng))
                .collect(),
            cfg: cfg.clone(),
            input_dim,
        }
    }

    /// Maps `T × d_in` frames to `T × d_a` embeddings.
    pub fn forward<'t>(&self, p: &Binder<'t, '_>, frames: Var<'t>) -> Result<(Var<'t>, LayerWeights)> {
        let value = frames.value();
        if value.shape().len() != 2 || value.cols() != self.input_dim {
            return Err(config(format!(
                "frames of shape {:?} do not match input width {}",
                value.shape(),
                self.input_dim
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "encode_audio" });
        }
        let t = value.rows();
        let tape = p.tape();
        let mut x = self
            .input
            .forward(p, frames)?
            .add(tape.constant(sinusoidal_positions(t, self.cfg.d_model)))?;
        let mask = tape.constant(window_mask(t, self.cfg.window_left, self.cfg.window_right));
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, w) = layer.forward(p, x, Some(mask))?;
            x = y;
            weights.push(w);
        }
        Ok((x, weights))
    }
}

#[derive(Clone, Debug)]
pub struct LabelEncoder {
    pub embed: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub cfg: LabelEncoderConfig,
    pub vocab: usize,
}

impl LabelEncoder {
    pub fn new(store: &mut ParamStore, vocab: usize, cfg: &LabelEncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Self {
            // Row `vocab` is the start symbol.
            embed: store.normal_matrix("label.embed", vocab + 1, d, 1.0, rng),
            layers: (0..cfg.layers)
                .map(|l| TransformerLayer::new(store, &format!("label.layer{l}"), d, cfg.heads, cfg.ffn_dim, rng))
                .collect(),
            cfg: cfg.clone(),
            vocab,
        }
    }

    pub fn sos(&self) -> usize {
        self.vocab
    }

    /// `[SOS]` followed by the last `history` tokens of `prefix`.
    pub fn window(&self, prefix: &[usize]) -> Vec<usize> {
        let start = prefix.len().saturating_sub(self.cfg.history);
        std::iter::once(self.sos()).chain(prefix[start..].iter().copied()).collect()
    }

    /// Final-position embeddings of several prefixes, one row each. The
    /// windows are stacked and separated by a block-diagonal causal mask,
    /// so every row equals the single-prefix result.
    pub fn forward_prefixes<'t>(&self, p: &Binder<'t, '_>, prefixes: &[&[usize]]) -> Result<Var<'t>> {
        let mut ids = Vec::new();
        let mut lengths = Vec::with_capacity(prefixes.len());
        for prefix in prefixes {
            if let Some(&id) = prefix.iter().find(|&&id| id >= self.vocab) {
                return Err(Error::Lookup { id, size: self.vocab });
            }
            let w = self.window(prefix);
            lengths.push(w.len());
            ids.extend(w);
        }
        let tape = p.tape();
        let mut x = p
            .var(self.embed)
            .gather_rows(&ids)?
            .add(tape.constant(block_positions(&lengths, self.cfg.d_model)))?;
        let mask = tape.constant(block_causal_mask(&lengths));
        for layer in &self.layers {
            x = layer.forward(p, x, Some(mask))?.0;
        }
        let mut last = Vec::with_capacity(lengths.len());
        let mut end = 0;
        for l in &lengths {
            end += l;
            last.push(end - 1);
        }
        x.gather_rows(&last)
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, prefix: &[usize]) -> Result<Var<'t>> {
        self.forward_prefixes(p, &[prefix])
    }

    /// Rows for every prefix `target[..u]`, `u = 0..=U`.
    pub fn all_prefixes<'t>(&self, p: &Binder<'t, '_>, target: &[usize]) -> Result<Var<'t>> {
        let prefixes: Vec<&[usize]> = (0..=target.len()).map(|u| &target[..u]).collect();
        self.forward_prefixes(p, &prefixes)
    }
}

/// `z = tanh(U h_a + V h_l + b1)`, `log p = log_softmax(W z + b2)`.
#[derive(Clone, Debug)]
pub struct Joint {
    pub u: ParamId,
    pub v: ParamId,
    pub b1: ParamId,
    pub out: Linear,
    pub d_audio: usize,
    pub d_label: usize,
}

impl Joint {
    pub fn new(store: &mut ParamStore, d_audio: usize, d_label: usize, d: usize, symbols: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            u: store.glorot("joint.u", d_audio, d, rng),
            v: store.glorot("joint.v", d_label, d, rng),
            b1: store.zeros("joint.b1", d),
            out: Linear::new(store, "joint.out", d, symbols, true, rng),
            d_audio,
            d_label,
        }
    }

    fn check(x: &Var<'_>, want: usize, what: &str) -> Result<()> {
        let cols = x.value().cols();
        if cols != want {
            return Err(config(format!("{what} width {cols} does not match joint input {want}")));
        }
        Ok(())
    }

    /// `U h_a` for every audio row.
    pub fn audio_proj<'t>(&self, p: &Binder<'t, '_>, h_a: Var<'t>) -> Result<Var<'t>> {
        Self::check(&h_a, self.d_audio, "audio embedding")?;
        h_a.matmul(p.var(self.u))
    }

    /// `V h_l + b1` for every label row.
    pub fn label_proj<'t>(&self, p: &Binder<'t, '_>, h_l: Var<'t>) -> Result<Var<'t>> {
        Self::check(&h_l, self.d_label, "label embedding")?;
        h_l.matmul(p.var(self.v))?.add(p.var(self.b1))
    }

    /// `log_softmax(W tanh(a + b) + b2)` for row-aligned projections.
    pub fn log_probs<'t>(&self, p: &Binder<'t, '_>, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let z = a.add(b)?.tanh();
        self.output_log_probs(p, z)
    }

    pub fn output_log_probs<'t>(&self, p: &Binder<'t, '_>, z: Var<'t>) -> Result<Var<'t>> {
        self.out.forward(p, z)?.log_softmax()
    }

    pub fn joint<'t>(&self, p: &Binder<'t, '_>, h_a: Var<'t>, h_l: Var<'t>) -> Result<Var<'t>> {
        let a = self.audio_proj(p, h_a)?;
        let b = self.label_proj(p, h_l)?;
        Ok(a.add(b)?.tanh())
    }

    /// Full `T(U + 1) × symbols` lattice, row `t * (U + 1) + u`.
    pub fn lattice<'t>(&self, p: &Binder<'t, '_>, h_a: Var<'t>, h_l: Var<'t>) -> Result<Var<'t>> {
        let a = self.audio_proj(p, h_a)?;
        let b = self.label_proj(p, h_l)?;
        let (tn, un) = (a.value().rows(), b.value().rows());
        let ta: Vec<usize> = (0..tn).flat_map(|t| std::iter::repeat_n(t, un)).collect();
        let ub: Vec<usize> = (0..tn).flat_map(|_| 0..un).collect();
        self.log_probs(p, a.gather_rows(&ta)?, b.gather_rows(&ub)?)
    }
}
