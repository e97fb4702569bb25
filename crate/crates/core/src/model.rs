//! The assembled model: encoders, optional context biasing, joint network.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::biasing::BiasingBranch;
use crate::config::{ContextEncoderKind, ModelConfig};
use crate::context::{BlstmEncoder, ContextEncoder, ContextPhrase, PretrainedEmbeddings};
use crate::error::{config, contract, Result};
use crate::loss::transducer_loss;
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;
use crate::transducer::{AudioEncoder, Joint, LabelEncoder, LayerWeights};

#[derive(Clone, Debug)]
pub struct CattModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub audio: AudioEncoder,
    pub label: LabelEncoder,
    pub joint: Joint,
    pub context: Option<ContextEncoder>,
    pub audio_bias: Option<BiasingBranch>,
    pub label_bias: Option<BiasingBranch>,
}

/// Audio-side quantities shared by every label prefix of an utterance.
pub struct AudioSide<'t> {
    /// Audio (or context-aware audio) embeddings, `T × d`.
    pub embeddings: Var<'t>,
    /// `U h` for every frame, `T × joint_dim`.
    pub proj: Var<'t>,
    /// Context embeddings, `K × d_c`, when the variant uses context.
    pub context: Option<Var<'t>>,
    pub encoder_attention: LayerWeights,
    /// Cross-attention weights per biasing block and head, `T × K`.
    pub bias_attention: Vec<Vec<Arc<Tensor>>>,
}

impl CattModel {
    /// Builds a freshly initialized model. `frozen` supplies the vectors of
    /// a pretrained context encoder and is required exactly when the config
    /// asks for one.
    pub fn new(cfg: ModelConfig, seed: u64, frozen: Option<PretrainedEmbeddings>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let audio = AudioEncoder::new(&mut store, cfg.input_dim, &cfg.audio, &mut rng);
        let label = LabelEncoder::new(&mut store, cfg.vocab_size, &cfg.label, &mut rng);
        let joint = Joint::new(
            &mut store,
            cfg.joint_audio_dim(),
            cfg.joint_label_dim(),
            cfg.joint_dim,
            cfg.vocab_size + 1,
            &mut rng,
        );
        let (context, audio_bias, label_bias) = if cfg.variant.uses_context() {
            let ctx = match (cfg.context.kind, frozen) {
                (ContextEncoderKind::Blstm, _) => ContextEncoder::Blstm(BlstmEncoder::new(
                    &mut store,
                    "context",
                    cfg.vocab_size,
                    cfg.context.embed_dim,
                    cfg.context.d_c,
                    &mut rng,
                )?),
                (ContextEncoderKind::PretrainedFrozen, Some(table)) => {
                    if table.dim() != cfg.context.d_c {
                        return Err(config(format!(
                            "pretrained vectors have dimension {}, config says d_c = {}",
                            table.dim(),
                            cfg.context.d_c
                        )));
                    }
                    ContextEncoder::Pretrained(table)
                }
                (ContextEncoderKind::PretrainedFrozen, None) => {
                    return Err(config("pretrained-frozen context encoder needs an embedding table"))
                }
            };
            let d_c = cfg.context.d_c;
            let audio_bias = BiasingBranch::new(&mut store, "bias.audio", cfg.audio.d_model, d_c, &cfg.biasing, &mut rng);
            let label_bias = cfg
                .variant
                .biases_labels()
                .then(|| BiasingBranch::new(&mut store, "bias.label", cfg.label.d_model, d_c, &cfg.biasing, &mut rng));
            (Some(ctx), Some(audio_bias), label_bias)
        } else {
            (None, None, None)
        };
        Ok(Self {
            cfg,
            store,
            audio,
            label,
            joint,
            context,
            audio_bias,
            label_bias,
        })
    }

    pub fn blank(&self) -> usize {
        self.cfg.blank()
    }

    pub fn frozen_embeddings(&self) -> Option<&PretrainedEmbeddings> {
        match &self.context {
            Some(ContextEncoder::Pretrained(t)) => Some(t),
            _ => None,
        }
    }

    pub fn encode_context<'t>(&self, p: &Binder<'t, '_>, phrases: &[ContextPhrase]) -> Result<Option<Var<'t>>> {
        let Some(enc) = &self.context else {
            return Ok(None);
        };
        if phrases.is_empty() {
            return Err(contract("context-aware variant needs at least one context phrase"));
        }
        for ph in phrases {
            ph.validate(self.cfg.vocab_size)?;
        }
        enc.encode(p, phrases).map(Some)
    }

    pub fn audio_side<'t>(&self, p: &Binder<'t, '_>, frames: Var<'t>, phrases: &[ContextPhrase]) -> Result<AudioSide<'t>> {
        let (x, encoder_attention) = self.audio.forward(p, frames)?;
        let context = self.encode_context(p, phrases)?;
        let (embeddings, bias_attention) = match (&self.audio_bias, context) {
            (Some(branch), Some(c)) => {
                let out = branch.forward(p, x, c)?;
                (out.out, out.attention)
            }
            _ => (x, Vec::new()),
        };
        Ok(AudioSide {
            embeddings,
            proj: self.joint.audio_proj(p, embeddings)?,
            context,
            encoder_attention,
            bias_attention,
        })
    }

    /// Label-side embeddings of several prefixes, biased when the variant
    /// queries the context with labels.
    pub fn label_embeddings<'t>(&self, p: &Binder<'t, '_>, prefixes: &[&[usize]], context: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.label.forward_prefixes(p, prefixes)?;
        match (&self.label_bias, context) {
            (Some(branch), Some(c)) => Ok(branch.forward(p, y, c)?.out),
            (Some(_), None) => Err(contract("label biasing without context embeddings")),
            _ => Ok(y),
        }
    }

    /// `V h_l + b1` for several prefixes.
    pub fn label_proj<'t>(&self, p: &Binder<'t, '_>, prefixes: &[&[usize]], context: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.label_embeddings(p, prefixes, context)?;
        self.joint.label_proj(p, y)
    }

    /// `T(U + 1) × (vocab + 1)` log-probability lattice for `target`.
    pub fn lattice<'t>(&self, p: &Binder<'t, '_>, frames: Var<'t>, target: &[usize], phrases: &[ContextPhrase]) -> Result<Var<'t>> {
        let side = self.audio_side(p, frames, phrases)?;
        let prefixes: Vec<&[usize]> = (0..=target.len()).map(|u| &target[..u]).collect();
        let b = self.label_proj(p, &prefixes, side.context)?;
        let (tn, un) = (side.proj.value().rows(), prefixes.len());
        let ta: Vec<usize> = (0..tn).flat_map(|t| std::iter::repeat_n(t, un)).collect();
        let ub: Vec<usize> = (0..tn).flat_map(|_| 0..un).collect();
        self.joint.log_probs(p, side.proj.gather_rows(&ta)?, b.gather_rows(&ub)?)
    }

    pub fn loss<'t>(&self, p: &Binder<'t, '_>, frames: &Tensor, target: &[usize], phrases: &[ContextPhrase]) -> Result<Var<'t>> {
        let tape = p.tape();
        let lattice = self.lattice(p, tape.constant(frames.clone()), target, phrases)?;
        transducer_loss(lattice, frames.rows(), target, self.blank())
    }

    /// Loss value and the gradient of every stored parameter, in store order.
    pub fn loss_and_grads(&self, frames: &Tensor, target: &[usize], phrases: &[ContextPhrase]) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = Binder::new(&tape, &self.store, true);
        let loss = self.loss(&p, frames, target, phrases)?;
        tape.backward(loss)?;
        Ok((loss.value().item(), p.gradients()))
    }

    /// Inference-only lattice values.
    pub fn lattice_values(&self, frames: &Tensor, target: &[usize], phrases: &[ContextPhrase]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = Binder::new(&tape, &self.store, false);
        let lat = self.lattice(&p, tape.constant(frames.clone()), target, phrases)?;
        Ok((*lat.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::context::Category;
    use crate::loss::{forward_loss, LogProbLattice};

    fn small(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.variant = variant;
        cfg.input_dim = 3;
        cfg.vocab_size = 6;
        cfg.audio.d_model = 8;
        cfg.audio.ffn_dim = 8;
        cfg.label.d_model = 8;
        cfg.label.ffn_dim = 8;
        cfg.context.d_c = 6;
        cfg.context.embed_dim = 4;
        cfg.biasing.d = 8;
        cfg.biasing.ffn_dim = 8;
        cfg.biasing.d_ca = 8;
        cfg.joint_dim = 8;
        cfg
    }

    fn phrases() -> Vec<ContextPhrase> {
        vec![
            ContextPhrase::new("a", vec![1, 2], Category::NamedEntity, true).unwrap(),
            ContextPhrase::new("b", vec![3], Category::DeviceLocation, false).unwrap(),
        ]
    }

    fn frames() -> Tensor {
        Tensor::matrix(4, 3, (0..12).map(|i| ((i * 7) % 5) as f64 / 5.0 - 0.4).collect()).unwrap()
    }

    #[test]
    fn loss_equals_dp_on_lattice_values() {
        for v in [Variant::Tt, Variant::CattAudio, Variant::CattAudioLabel] {
            let model = CattModel::new(small(v), 1, None).unwrap();
            let target = [1, 4];
            let lat = model.lattice_values(&frames(), &target, &phrases()).unwrap();
            let lat = LogProbLattice::new(4, 3, 7, 6, lat.into_data()).unwrap();
            assert!(lat.normalization_error() < 1e-9);
            let (loss, grads) = model.loss_and_grads(&frames(), &target, &phrases()).unwrap();
            assert_eq!(loss, forward_loss(&lat, &target).unwrap());
            assert_eq!(grads.len(), model.store.len());
        }
    }

    #[test]
    fn tt_has_no_context_parameters() {
        let tt = CattModel::new(small(Variant::Tt), 1, None).unwrap();
        assert!(tt.store.iter().all(|(n, _)| !n.starts_with("bias") && !n.starts_with("context")));
        let al = CattModel::new(small(Variant::CattAudioLabel), 1, None).unwrap();
        assert!(al.store.id("bias.label.block0.wq.w").is_some());
    }

    #[test]
    fn pretrained_kind_requires_matching_table() {
        let mut cfg = small(Variant::CattAudio);
        cfg.context.kind = ContextEncoderKind::PretrainedFrozen;
        assert!(CattModel::new(cfg.clone(), 0, None).is_err());
        let table = PretrainedEmbeddings::parse("a\t1,2,3\n", 3).unwrap();
        assert!(CattModel::new(cfg.clone(), 0, Some(table)).is_err());
        let table = PretrainedEmbeddings::parse("a\t1,2,3,4,5,6\n", 6).unwrap();
        let m = CattModel::new(cfg, 0, Some(table)).unwrap();
        assert!(m.store.iter().all(|(n, _)| !n.starts_with("context")));
    }

    #[test]
    fn context_variant_rejects_empty_context() {
        let model = CattModel::new(small(Variant::CattAudio), 1, None).unwrap();
        assert!(model.loss_and_grads(&frames(), &[1], &[]).is_err());
    }

    #[test]
    fn same_seed_is_bitwise_deterministic() {
        let a = CattModel::new(small(Variant::CattAudioLabel), 9, None).unwrap();
        let b = CattModel::new(small(Variant::CattAudioLabel), 9, None).unwrap();
        let la = a.lattice_values(&frames(), &[2], &phrases()).unwrap();
        let lb = b.lattice_values(&frames(), &[2], &phrases()).unwrap();
        assert_eq!(la, lb);
    }
}
