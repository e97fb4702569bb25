//! Corpus, training, checkpoint and evaluation wired together on tiny data.

mod common;

use catt_core::checkpoint::Checkpoint;
use catt_core::config::ContextEncoderKind;
use catt_core::data::{generate_corpus, make_splits, Corpus, CorpusSpec, Partition, SplitKey};
use catt_core::eval::{attention_dump, evaluate, sweep_k, DecodeSettings, EvalReport};
use catt_core::train::{train, ExperimentConfig, TrainConfig};
use catt_core::{CattModel, Error, Variant};
use common::desk_config;

fn tiny_spec(utterances: usize) -> CorpusSpec {
    let mut spec = CorpusSpec {
        utterances,
        vocab_size: 60,
        input_dim: 6,
        context_dim: 6,
        ..CorpusSpec::default()
    };
    spec.catalog.device_names = 8;
    spec.catalog.named_entities = 8;
    spec.catalog.name_syllables = 2;
    spec.sampling.k = 4;
    spec
}

fn corpus(utterances: usize) -> Corpus {
    generate_corpus(&tiny_spec(utterances), 17).unwrap()
}

fn model_for(corpus: &Corpus, variant: Variant, frozen: bool) -> CattModel {
    let mut cfg = desk_config(variant, corpus.tokenizer.vocab_size(), corpus.spec.input_dim);
    if frozen {
        cfg.context.kind = ContextEncoderKind::PretrainedFrozen;
        cfg.context.d_c = corpus.context_vectors.dim();
        return CattModel::new(cfg, 3, Some(corpus.context_vectors.clone())).unwrap();
    }
    CattModel::new(cfg, 3, None).unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    let mut t = TrainConfig {
        epochs,
        batch_size: 4,
        peak_lr: 3e-3,
        ..TrainConfig::default()
    };
    t.sampling.k = 4;
    t
}

fn trained(corpus: &Corpus, variant: Variant, frozen: bool, epochs: usize) -> CattModel {
    let splits = make_splits(corpus).unwrap();
    let mut model = model_for(corpus, variant, frozen);
    train(&mut model, &splits.train, &corpus.catalog, &train_cfg(epochs), 5, |_| {}).unwrap();
    model
}

#[test]
fn training_lowers_the_loss() {
    let c = corpus(46);
    let splits = make_splits(&c).unwrap();
    assert_eq!(splits.train.len(), 32);
    let mut model = model_for(&c, Variant::CattAudio, false);
    let cfg = train_cfg(6);
    let log = train(&mut model, &splits.train, &c.catalog, &cfg, 5, |_| {}).unwrap();
    let per_epoch = 32usize.div_ceil(cfg.batch_size);
    assert_eq!(log.len(), per_epoch * cfg.epochs);
    let mean = |e: usize| log[e * per_epoch..(e + 1) * per_epoch].iter().map(|s| s.loss).sum::<f64>() / per_epoch as f64;
    assert!(mean(5) < 0.8 * mean(0), "{} -> {}", mean(0), mean(5));
    assert!(log.iter().all(|s| s.grad_norm.is_finite() && s.loss.is_finite()));
}

#[test]
fn training_is_bitwise_deterministic() {
    let c = corpus(40);
    let exp = ExperimentConfig::default();
    let a = Checkpoint::from_model(&trained(&c, Variant::CattAudioLabel, false, 1), &exp, &c.tokenizer);
    let b = Checkpoint::from_model(&trained(&c, Variant::CattAudioLabel, false, 1), &exp, &c.tokenizer);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn baseline_has_no_biasing_parameters() {
    let c = corpus(30);
    let tt = model_for(&c, Variant::Tt, false);
    assert!(tt.context.is_none() && tt.audio_bias.is_none() && tt.label_bias.is_none());
    let catt = model_for(&c, Variant::CattAudio, false);
    assert!(catt.store.num_scalars() > tt.store.num_scalars());
    let tt_names: Vec<&str> = tt.store.iter().map(|(n, _)| n).collect();
    let catt_names: Vec<&str> = catt.store.iter().map(|(n, _)| n).collect();
    assert!(tt_names.iter().all(|n| catt_names.contains(n)));
}

#[test]
fn frozen_vectors_survive_training() {
    let c = corpus(40);
    let before = c.context_vectors.clone();
    let model = trained(&c, Variant::CattAudioLabel, true, 1);
    let after = model.frozen_embeddings().unwrap();
    assert_eq!(after.to_file_string(), before.to_file_string());
    assert!(model.store.iter().all(|(n, _)| !n.starts_with("context.")));
}

#[test]
fn unit_beam_report_equals_greedy_report() {
    let c = corpus(40);
    let splits = make_splits(&c).unwrap();
    let model = trained(&c, Variant::CattAudio, false, 1);
    let greedy = evaluate(&model, &c, &splits, "m", &DecodeSettings::default()).unwrap();
    let fused = DecodeSettings {
        fusion_lambda: Some(0.0),
        ..DecodeSettings::default()
    };
    let beam = evaluate(&model, &c, &splits, "m", &fused).unwrap();
    assert_eq!(greedy.cells, beam.cells);
    assert_eq!(greedy.hypotheses, beam.hypotheses);
}

#[test]
fn report_json_round_trips() {
    let c = corpus(40);
    let splits = make_splits(&c).unwrap();
    let tt = model_for(&c, Variant::Tt, false);
    let base = evaluate(&tt, &c, &splits, "tt", &DecodeSettings::default()).unwrap();
    let mut report = evaluate(&model_for(&c, Variant::CattAudio, false), &c, &splits, "catt", &DecodeSettings::default()).unwrap();
    report.compare(&base);
    assert_eq!(report.baseline.as_deref(), Some("tt"));
    let back: EvalReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(back, report);
    for p in [Partition::Dev, Partition::Test] {
        for s in [SplitKey::Personalized, SplitKey::Common] {
            assert!(report.wer(p, s).is_some());
        }
    }
}

#[test]
fn vocabulary_mismatch_is_a_config_error() {
    let c = corpus(30);
    let mut other = tiny_spec(30);
    other.vocab_size = 45;
    let d = generate_corpus(&other, 17).unwrap();
    let model = model_for(&d, Variant::Tt, false);
    let err = catt_core::eval::check_compatible(&model, &d.tokenizer, &c).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn attention_dump_contracts() {
    let c = corpus(30);
    let utt = &c.utterances[0];
    let tt = model_for(&c, Variant::Tt, false);
    assert!(matches!(attention_dump(&tt, &c.tokenizer, utt, &utt.context), Err(Error::Unsupported(_))));
    let model = model_for(&c, Variant::CattAudioLabel, false);
    let dump = attention_dump(&model, &c.tokenizer, utt, &utt.context).unwrap();
    assert_eq!(dump.weights.cols(), utt.context.len());
    assert_eq!(dump.decoded.len(), dump.weights.rows());
    for f in 0..dump.weights.rows() {
        assert!((dump.weights.row(f).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let one = &utt.context[..1];
    let dump = attention_dump(&model, &c.tokenizer, utt, one).unwrap();
    assert!(dump.weights.data().iter().all(|&w| w == 1.0));
    let csv = dump.to_csv();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn k_sweep_has_one_row_per_cell_and_k() {
    let c = corpus(40);
    let splits = make_splits(&c).unwrap();
    let model = model_for(&c, Variant::CattAudio, false);
    let rows = sweep_k(&model, &c, &splits, &[2, 4, 8], None, &DecodeSettings::default()).unwrap();
    assert_eq!(rows.len(), 12);
    let mut ks: Vec<f64> = rows.iter().map(|r| r.value).collect();
    ks.dedup();
    assert_eq!(ks, vec![2.0, 4.0, 8.0]);
}

#[test]
fn full_catalog_k_is_deterministic() {
    let c = corpus(40);
    let splits = make_splits(&c).unwrap();
    let model = model_for(&c, Variant::CattAudio, false);
    let all = c.catalog.len();
    let run = |seed| {
        let s = DecodeSettings {
            k: Some(all),
            seed,
            ..DecodeSettings::default()
        };
        evaluate(&model, &c, &splits, "m", &s).unwrap()
    };
    let (a, b) = (run(1), run(2));
    assert_eq!(a.cells, b.cells);
    assert_eq!(a.hypotheses, b.hypotheses);
}

#[test]
fn unseen_entities_reach_personalized_test() {
    let c = corpus(120);
    let counts = c.train_counts().unwrap();
    let splits = make_splits(&c).unwrap();
    let unseen: Vec<&String> = counts.iter().filter(|(_, &n)| n == 0).map(|(t, _)| t).collect();
    assert!(!unseen.is_empty());
    let test = &splits.test[&SplitKey::Personalized];
    assert!(test.iter().any(|u| unseen.iter().any(|e| u.transcript.contains(e.as_str()))));
}

#[test]
fn every_transcript_round_trips_through_the_tokenizer() {
    let c = corpus(80);
    for u in &c.utterances {
        assert_eq!(c.tokenizer.detokenize(&u.tokens).unwrap(), u.transcript);
        assert_eq!(c.tokenizer.tokenize(&u.transcript).unwrap(), u.tokens);
    }
}

#[test]
fn corpus_and_checkpoint_survive_disk() {
    let c = corpus(30);
    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path()).unwrap();
    assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    let model = model_for(&c, Variant::CattAudioLabel, true);
    let path = dir.path().join("m.json");
    Checkpoint::from_model(&model, &ExperimentConfig::default(), &c.tokenizer).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let utt = &c.utterances[0];
    let a = model.lattice_values(&utt.frames, &utt.tokens, &utt.context).unwrap();
    let b = back.lattice_values(&utt.frames, &utt.tokens, &utt.context).unwrap();
    assert_eq!(a, b);
}

#[test]
fn decoder_rows_match_the_training_lattice() {
    let c = corpus(30);
    let utt = &c.utterances[0];
    for variant in [Variant::CattAudio, Variant::CattAudioLabel] {
        let mut model = model_for(&c, variant, true);
        common::jitter(&mut model.store, 0.3, 4);
        let lattice = model.lattice_values(&utt.frames, &utt.tokens, &utt.context).unwrap();
        let dec = catt_core::decode::Decoder::new(&model, &utt.frames, &utt.context).unwrap();
        let (un, width) = (utt.tokens.len() + 1, lattice.cols());
        for t in 0..utt.frames.rows() {
            for u in 0..un {
                let row = dec.log_probs(t, &utt.tokens[..u]).unwrap();
                let want = lattice.row(t * un + u);
                assert_eq!(row.len(), width);
                assert!(row.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-9), "{variant:?} t={t} u={u}");
            }
        }
    }
}
