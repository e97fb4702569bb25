//! WER/WERR scoring, held-out evaluation, sweeps and attention dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::biasing::AttentionRecord;
use crate::config::ModelConfig;
use crate::context::{Category, ContextPhrase};
use crate::data::{sample_context_batch, Corpus, Partition, SamplingConfig, SplitKey, Splits, Utterance};
use crate::decode::{beam_decode, build_fusion_trie, greedy_decode, DecodeOutput};
use crate::error::{config, contract, Error, Result};
use crate::model::CattModel;
use crate::params::Binder;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], reference: &[R]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h.as_ref() != r.as_ref());
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

pub fn wer<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], reference: &[R]) -> Result<f64> {
    if reference.is_empty() {
        return Err(contract("WER needs a non-empty reference"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Relative reduction of A's WER over baseline B.
pub fn werr(wer_a: f64, wer_b: f64) -> Result<f64> {
    if !(wer_b > 0.0) {
        return Err(contract("WERR is undefined for a zero baseline WER"));
    }
    Ok((wer_b - wer_a) / wer_b)
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    /// `1` with no fusion runs greedy search.
    pub beam: usize,
    pub fusion_lambda: Option<f64>,
    /// Context batch size; `None` uses each utterance's stored batch.
    pub k: Option<usize>,
    pub seed: u64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam: 1,
            fusion_lambda: None,
            k: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub wer: f64,
    pub edits: usize,
    pub ref_words: usize,
    pub utterances: usize,
    /// Utterances left out because K could not hold their relevant phrases.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: usize,
    pub reference: String,
    pub hypothesis: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub settings: DecodeSettings,
    pub config: ModelConfig,
    pub cells: BTreeMap<Partition, BTreeMap<SplitKey, CellReport>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// WERR over `baseline` per cell; absent where the baseline WER is 0.
    #[serde(default)]
    pub werr: BTreeMap<Partition, BTreeMap<SplitKey, Option<f64>>>,
    pub hypotheses: Vec<Hypothesis>,
}

impl EvalReport {
    pub fn cell(&self, partition: Partition, split: SplitKey) -> Option<&CellReport> {
        self.cells.get(&partition)?.get(&split)
    }

    pub fn wer(&self, partition: Partition, split: SplitKey) -> Option<f64> {
        self.cell(partition, split).map(|c| c.wer)
    }

    /// Fills the WERR rows against `baseline`.
    pub fn compare(&mut self, baseline: &EvalReport) {
        self.baseline = Some(baseline.name.clone());
        self.werr.clear();
        for (&p, row) in &self.cells {
            for (&s, cell) in row {
                let r = baseline.wer(p, s).and_then(|b| werr(cell.wer, b).ok());
                self.werr.entry(p).or_default().insert(s, r);
            }
        }
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<6} {:<13} {:>8} {:>7} {:>6}", "part", "split", "WER%", "words", "utts");
        if self.baseline.is_some() {
            out.push_str(&format!(" {:>8}", "WERR%"));
        }
        out.push('\n');
        for (p, row) in &self.cells {
            for (s, c) in row {
                let part = format!("{p:?}").to_lowercase();
                let _ = write!(out, "{part:<6} {:<13} {:>8.2} {:>7} {:>6}", format!("{s:?}"), 100.0 * c.wer, c.ref_words, c.utterances);
                if self.baseline.is_some() {
                    match self.werr.get(p).and_then(|r| r.get(s)).copied().flatten() {
                        Some(w) => {
                            let _ = write!(out, " {:>8.2}", 100.0 * w);
                        }
                        None => out.push_str(&format!(" {:>8}", "n/a")),
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Context batch used for `utt` under `settings`. `Ok(None)` marks an
/// utterance whose relevant phrases do not fit in K.
pub fn context_for(utt: &Utterance, corpus: &Corpus, k: Option<usize>, seed: u64) -> Result<Option<Vec<ContextPhrase>>> {
    let Some(k) = k else {
        return Ok(Some(utt.context.clone()));
    };
    let catalog = &corpus.catalog;
    let relevant = catalog.relevant_to(&utt.transcript);
    if relevant.len() > k {
        return Ok(None);
    }
    if k >= catalog.len() {
        return (0..catalog.len())
            .map(|i| catalog.phrase(i, relevant.contains(&i)))
            .collect::<Result<_>>()
            .map(Some);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (utt.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let cfg = SamplingConfig {
        k,
        relevant_always_present: true,
    };
    sample_context_batch(&relevant, catalog, &cfg, &mut rng).map(Some)
}

pub fn decode_utterance(model: &CattModel, frames: &Tensor, phrases: &[ContextPhrase], settings: &DecodeSettings) -> Result<DecodeOutput> {
    match settings.fusion_lambda {
        None if settings.beam == 1 => greedy_decode(model, frames, phrases),
        None => beam_decode(model, frames, phrases, settings.beam, None),
        Some(lambda) => {
            let trie = build_fusion_trie(phrases, lambda);
            beam_decode(model, frames, phrases, settings.beam, Some(&trie))
        }
    }
}

/// Checkpoint and corpus must share one tokenizer.
pub fn check_compatible(model: &CattModel, tokenizer: &Tokenizer, corpus: &Corpus) -> Result<()> {
    if tokenizer != &corpus.tokenizer || model.cfg.vocab_size != corpus.tokenizer.vocab_size() {
        return Err(config(format!(
            "checkpoint vocabulary ({} tokens) does not match the corpus tokenizer ({} tokens)",
            model.cfg.vocab_size,
            corpus.tokenizer.vocab_size()
        )));
    }
    if model.cfg.input_dim != corpus.utterances.first().map_or(0, |u| u.frames.cols()) {
        return Err(config("checkpoint input_dim does not match corpus frames"));
    }
    Ok(())
}

/// Decodes every dev and test utterance and scores the four cells.
pub fn evaluate(model: &CattModel, corpus: &Corpus, splits: &Splits<'_>, name: &str, settings: &DecodeSettings) -> Result<EvalReport> {
    let mut report = EvalReport {
        name: name.into(),
        settings: settings.clone(),
        config: model.cfg.clone(),
        cells: BTreeMap::new(),
        baseline: None,
        werr: BTreeMap::new(),
        hypotheses: Vec::new(),
    };
    for partition in [Partition::Dev, Partition::Test] {
        for (&split, utts) in splits.held_out(partition) {
            let (mut edits, mut ref_words, mut n, mut skipped) = (0, 0, 0, 0);
            for utt in utts {
                let Some(phrases) = context_for(utt, corpus, settings.k, settings.seed)? else {
                    eprintln!("warning: utterance {} skipped, relevant phrases exceed K", utt.id);
                    skipped += 1;
                    continue;
                };
                let out = decode_utterance(model, &utt.frames, &phrases, settings)?;
                let hyp = corpus.tokenizer.detokenize(&out.tokens)?;
                let r = words(&utt.transcript);
                edits += edit_distance(&words(&hyp), &r);
                ref_words += r.len();
                n += 1;
                report.hypotheses.push(Hypothesis {
                    id: utt.id,
                    reference: utt.transcript.clone(),
                    hypothesis: hyp,
                });
            }
            let wer = if ref_words == 0 { 0.0 } else { edits as f64 / ref_words as f64 };
            report.cells.entry(partition).or_default().insert(
                split,
                CellReport {
                    wer,
                    edits,
                    ref_words,
                    utterances: n,
                    skipped,
                },
            );
        }
    }
    Ok(report)
}

/// One row per (K, partition, split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub partition: Partition,
    pub split: SplitKey,
    pub wer: f64,
    pub werr: Option<f64>,
}

pub fn sweep_csv(column: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{column},partition,split,wer,werr\n");
    for r in rows {
        let werr = r.werr.map_or(String::new(), |w| w.to_string());
        let part = format!("{:?}", r.partition).to_lowercase();
        let _ = writeln!(out, "{},{part},{:?},{},{}", r.value, r.split, r.wer, werr);
    }
    out
}

fn rows_of(value: f64, report: &EvalReport, baseline: Option<&EvalReport>) -> Vec<SweepRow> {
    let mut out = Vec::new();
    for (&partition, row) in &report.cells {
        for (&split, cell) in row {
            out.push(SweepRow {
                value,
                partition,
                split,
                wer: cell.wer,
                werr: baseline.and_then(|b| b.wer(partition, split)).and_then(|b| werr(cell.wer, b).ok()),
            });
        }
    }
    out
}

/// Evaluates `model` at every K; WERR is against `baseline` decoded with the
/// same K (the baseline ignores context, so one baseline report suffices).
pub fn sweep_k(
    model: &CattModel,
    corpus: &Corpus,
    splits: &Splits<'_>,
    ks: &[usize],
    baseline: Option<&EvalReport>,
    settings: &DecodeSettings,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        if k == 0 {
            return Err(contract("K must be at least 1"));
        }
        let s = DecodeSettings {
            k: Some(k),
            ..settings.clone()
        };
        let report = evaluate(model, corpus, splits, &format!("k={k}"), &s)?;
        rows.extend(rows_of(k as f64, &report, baseline));
    }
    Ok(rows)
}

/// Shallow-fusion sweep over boosting weights; WERR is against the same
/// model decoded without fusion at the same beam.
pub fn sweep_fusion(model: &CattModel, corpus: &Corpus, splits: &Splits<'_>, lambdas: &[f64], settings: &DecodeSettings) -> Result<Vec<SweepRow>> {
    let plain = evaluate(
        model,
        corpus,
        splits,
        "no-fusion",
        &DecodeSettings {
            fusion_lambda: None,
            ..settings.clone()
        },
    )?;
    let mut rows = rows_of(0.0, &plain, None);
    for &lambda in lambdas {
        let s = DecodeSettings {
            fusion_lambda: Some(lambda),
            ..settings.clone()
        };
        let report = evaluate(model, corpus, splits, &format!("lambda={lambda}"), &s)?;
        rows.extend(rows_of(lambda, &report, Some(&plain)));
    }
    Ok(rows)
}

/// Final-block audio-side cross-attention of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub utterance: usize,
    pub transcript: String,
    pub phrases: Vec<String>,
    pub relevant: Vec<bool>,
    /// `T × K`, mean over heads.
    pub weights: Tensor,
    /// Decoded tokens emitted on each frame.
    pub decoded: Vec<String>,
}

impl AttentionDump {
    /// Rows are phrases, columns frames; a final row lists decoded tokens.
    pub fn to_csv(&self) -> String {
        let t = self.weights.rows();
        let mut out = String::from("phrase");
        for f in 0..t {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
        for (j, p) in self.phrases.iter().enumerate() {
            out.push_str(&csv_field(p));
            for f in 0..t {
                let _ = write!(out, ",{}", self.weights.at(f, j));
            }
            out.push('\n');
        }
        out.push_str("<decoded>");
        for d in &self.decoded {
            out.push(',');
            out.push_str(&csv_field(d));
        }
        out.push('\n');
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn attention_dump(model: &CattModel, tokenizer: &Tokenizer, utt: &Utterance, phrases: &[ContextPhrase]) -> Result<AttentionDump> {
    if !model.cfg.variant.uses_context() {
        return Err(Error::Unsupported(format!("attention dump needs a CATT variant, got {:?}", model.cfg.variant)));
    }
    if phrases.is_empty() {
        return Err(contract("attention dump needs at least one context phrase"));
    }
    let tape = Tape::new();
    let p = Binder::new(&tape, &model.store, false);
    let side = model.audio_side(&p, tape.constant(utt.frames.clone()), phrases)?;
    let last = side
        .bias_attention
        .last()
        .ok_or_else(|| Error::Unsupported("model has no audio biasing blocks".into()))?;
    let weights = AttentionRecord::from_weights(last).mean();
    let out = greedy_decode(model, &utt.frames, phrases)?;
    let decoded = out
        .frame_tokens
        .iter()
        .map(|ts| ts.iter().map(|&id| tokenizer.token(id).unwrap_or("?")).collect::<Vec<_>>().join("|"))
        .collect();
    Ok(AttentionDump {
        utterance: utt.id,
        transcript: utt.transcript.clone(),
        phrases: phrases.iter().map(|p| p.text.clone()).collect(),
        relevant: phrases.iter().map(|p| p.relevant).collect(),
        weights,
        decoded,
    })
}

/// Frames (of the model input) spanned by each token of `utt`.
pub fn token_frame_spans(utt: &Utterance) -> Vec<std::ops::Range<usize>> {
    let total: usize = utt.token_frames.iter().sum();
    let stride = total.div_ceil(utt.frames.rows().max(1)).max(1);
    let mut start = 0;
    utt.token_frames
        .iter()
        .map(|&n| {
            let (a, b) = (start, start + n);
            start = b;
            a.div_ceil(stride)..b.div_ceil(stride)
        })
        .collect()
}

/// For each relevant named-entity or device-name phrase present in the
/// dump, whether it holds the per-frame maximum weight on a majority of the
/// frames rendered from its tokens.
pub fn entity_focus(dump: &AttentionDump, utt: &Utterance, phrases: &[ContextPhrase]) -> Vec<bool> {
    let spans = token_frame_spans(utt);
    let (t, k) = (dump.weights.rows(), dump.weights.cols());
    let mut out = Vec::new();
    for (j, ph) in phrases.iter().enumerate() {
        if !ph.relevant || !matches!(ph.category, Category::NamedEntity | Category::PersonalizedDeviceName) {
            continue;
        }
        let n = ph.token_ids.len();
        let Some(pos) = utt.tokens.windows(n).position(|w| w == ph.token_ids.as_slice()) else {
            continue;
        };
        let frames: Vec<usize> = spans[pos..pos + n].iter().flat_map(|r| r.clone()).filter(|&f| f < t).collect();
        if frames.is_empty() {
            continue;
        }
        let hits = frames
            .iter()
            .filter(|&&f| {
                let row = dump.weights.row(f);
                let best = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                best == j
            })
            .count();
        out.push(2 * hits > frames.len());
    }
    out
}

/// Share of utterances whose relevant entity phrases all pass
/// [`entity_focus`]; utterances without one are not counted.
pub fn entity_focus_rate(model: &CattModel, corpus: &Corpus, utts: &[&Utterance]) -> Result<f64> {
    let (mut hits, mut n) = (0, 0);
    for utt in utts {
        let dump = attention_dump(model, &corpus.tokenizer, utt, &utt.context)?;
        let focus = entity_focus(&dump, utt, &utt.context);
        if focus.is_empty() {
            continue;
        }
        n += 1;
        hits += usize::from(focus.iter().all(|&b| b));
    }
    if n == 0 {
        return Err(contract("no utterance with a relevant entity phrase"));
    }
    Ok(hits as f64 / n as f64)
}
