//! Greedy and beam decoding, with optional trie-based shallow fusion.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::context::ContextPhrase;
use crate::error::{contract, Result};
use crate::model::CattModel;
use crate::params::Binder;
use crate::tensor::{log_add_exp, Tensor};

/// Maximum emissions per frame.
pub const U_MAX: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub joint_evals: usize,
    /// Tokens emitted while sitting on each frame.
    pub frame_tokens: Vec<Vec<usize>>,
}

/// Per-utterance decoding state: the audio side is computed once, label
/// projections are cached by label-encoder window.
pub struct Decoder<'m> {
    model: &'m CattModel,
    audio: Arc<Tensor>,
    context: Option<Arc<Tensor>>,
    labels: RefCell<HashMap<Vec<usize>, Arc<Tensor>>>,
    evals: Cell<usize>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m CattModel, frames: &Tensor, phrases: &[ContextPhrase]) -> Result<Self> {
        let tape = Tape::new();
        let p = Binder::new(&tape, &model.store, false);
        let side = model.audio_side(&p, tape.constant(frames.clone()), phrases)?;
        Ok(Self {
            model,
            audio: side.proj.value(),
            context: side.context.map(|c| c.value()),
            labels: RefCell::new(HashMap::new()),
            evals: Cell::new(0),
        })
    }

    pub fn frames(&self) -> usize {
        self.audio.rows()
    }

    pub fn joint_evals(&self) -> usize {
        self.evals.get()
    }

    fn label_row(&self, prefix: &[usize]) -> Result<Arc<Tensor>> {
        let key = self.model.label.window(prefix);
        if let Some(row) = self.labels.borrow().get(&key) {
            return Ok(row.clone());
        }
        let tape = Tape::new();
        let p = Binder::new(&tape, &self.model.store, false);
        let ctx = self.context.as_ref().map(|c| tape.leaf_shared(c.clone(), false));
        let row = self.model.label_proj(&p, &[prefix], ctx)?.value();
        self.labels.borrow_mut().insert(key, row.clone());
        Ok(row)
    }

    /// `log p(· | t, prefix)` over `vocab + 1` symbols.
    pub fn log_probs(&self, t: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        let b = self.label_row(prefix)?;
        let tape = Tape::new();
        let p = Binder::new(&tape, &self.model.store, false);
        let a = tape.constant(Tensor::matrix(1, self.audio.cols(), self.audio.row(t).to_vec())?);
        let lp = self.model.joint.log_probs(&p, a, tape.leaf_shared(b, false))?;
        self.evals.set(self.evals.get() + 1);
        Ok(lp.value().data().to_vec())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(model: &CattModel, frames: &Tensor, phrases: &[ContextPhrase]) -> Result<DecodeOutput> {
    let dec = Decoder::new(model, frames, phrases)?;
    let blank = model.blank();
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut frame_tokens = Vec::with_capacity(dec.frames());
    for t in 0..dec.frames() {
        let mut here = Vec::new();
        while here.len() < U_MAX {
            let lp = dec.log_probs(t, &tokens)?;
            let k = argmax(&lp);
            score += lp[k];
            if k == blank {
                break;
            }
            tokens.push(k);
            here.push(k);
        }
        frame_tokens.push(here);
    }
    Ok(DecodeOutput {
        tokens,
        score,
        joint_evals: dec.joint_evals(),
        frame_tokens,
    })
}

/// Token-sequence trie over context phrases. Every matched edge earns
/// `lambda`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionTrie {
    children: Vec<BTreeMap<usize, usize>>,
    terminal: Vec<bool>,
    pub lambda: f64,
}

impl FusionTrie {
    pub const ROOT: usize = 0;

    pub fn new(lambda: f64) -> Self {
        Self {
            children: vec![BTreeMap::new()],
            terminal: vec![false],
            lambda,
        }
    }

    pub fn insert(&mut self, tokens: &[usize]) {
        let mut node = Self::ROOT;
        for &tok in tokens {
            node = match self.children[node].get(&tok) {
                Some(&next) => next,
                None => {
                    let next = self.children.len();
                    self.children.push(BTreeMap::new());
                    self.terminal.push(false);
                    self.children[node].insert(tok, next);
                    next
                }
            };
        }
        if !tokens.is_empty() {
            self.terminal[node] = true;
        }
    }

    pub fn node_count(&self) -> usize {
        self.children.len()
    }

    pub fn edge_count(&self) -> usize {
        self.children.len() - 1
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.terminal[node]
    }

    pub fn contains(&self, tokens: &[usize]) -> bool {
        let mut node = Self::ROOT;
        for tok in tokens {
            match self.children[node].get(tok) {
                Some(&n) => node = n,
                None => return false,
            }
        }
        self.terminal[node]
    }

    /// Advances `cursor` by `token`. On a mismatch the cursor returns to
    /// the root and the token may start a new phrase there. Returns the new
    /// cursor and whether an edge was matched.
    pub fn step(&self, cursor: usize, token: usize) -> (usize, bool) {
        if let Some(&next) = self.children[cursor].get(&token) {
            return (next, true);
        }
        match self.children[Self::ROOT].get(&token) {
            Some(&next) => (next, true),
            None => (Self::ROOT, false),
        }
    }
}

pub fn build_fusion_trie(phrases: &[ContextPhrase], lambda: f64) -> FusionTrie {
    let mut trie = FusionTrie::new(lambda);
    for ph in phrases {
        trie.insert(&ph.token_ids);
    }
    trie
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    cursor: usize,
    /// Log-prob of the last step, used to order exact score ties.
    last: f64,
    frame_tokens: Vec<Vec<usize>>,
}

/// Frame-synchronous beam search. Within a frame, hypotheses either emit a
/// token (and stay on the frame) or emit blank (and wait for the next
/// frame); after every expansion the union of both pools is pruned to the
/// `beam` best. Finished hypotheses with equal tokens merge by log-add.
pub fn beam_decode(
    model: &CattModel,
    frames: &Tensor,
    phrases: &[ContextPhrase],
    beam: usize,
    fusion: Option<&FusionTrie>,
) -> Result<DecodeOutput> {
    if beam == 0 {
        return Err(contract("beam width must be at least 1"));
    }
    if let Some(trie) = fusion {
        if !(trie.lambda >= 0.0) {
            return Err(contract("fusion weight must be non-negative"));
        }
    }
    let dec = Decoder::new(model, frames, phrases)?;
    let blank = model.blank();
    let mut kept = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        cursor: FusionTrie::ROOT,
        last: 0.0,
        frame_tokens: Vec::new(),
    }];
    for t in 0..dec.frames() {
        let mut done: Vec<Hyp> = Vec::new();
        let mut active: Vec<Hyp> = std::mem::take(&mut kept)
            .into_iter()
            .map(|mut h| {
                h.frame_tokens.push(Vec::new());
                h
            })
            .collect();
        for emitted in 0..=U_MAX {
            if active.is_empty() {
                break;
            }
            if emitted == U_MAX {
                for h in active.drain(..) {
                    merge_done(&mut done, h);
                }
                prune(&mut done, beam);
                break;
            }
            let mut pool: Vec<(Hyp, bool)> = done.drain(..).map(|h| (h, true)).collect();
            for h in std::mem::take(&mut active).iter() {
                let lp = dec.log_probs(t, &h.tokens)?;
                for (k, &l) in lp.iter().enumerate() {
                    if k == blank {
                        continue;
                    }
                    let (cursor, matched) = match fusion {
                        Some(trie) => trie.step(h.cursor, k),
                        None => (FusionTrie::ROOT, false),
                    };
                    let bonus = match fusion {
                        Some(trie) if matched => trie.lambda,
                        _ => 0.0,
                    };
                    let mut tokens = h.tokens.clone();
                    tokens.push(k);
                    let mut frame_tokens = h.frame_tokens.clone();
                    frame_tokens.last_mut().expect("frame opened").push(k);
                    pool.push((
                        Hyp {
                            tokens,
                            score: (h.score + l) + bonus,
                            cursor,
                            last: l,
                            frame_tokens,
                        },
                        false,
                    ));
                }
                let mut finished = h.clone();
                finished.score = h.score + lp[blank];
                finished.last = lp[blank];
                pool.push((finished, true));
            }
            let mut merged: Vec<(Hyp, bool)> = Vec::with_capacity(pool.len());
            let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
            for (h, is_done) in pool {
                if is_done {
                    if let Some(&i) = seen.get(&h.tokens) {
                        merged[i].0.score = log_add_exp(merged[i].0.score, h.score);
                        continue;
                    }
                    seen.insert(h.tokens.clone(), merged.len());
                }
                merged.push((h, is_done));
            }
            let mut order: Vec<usize> = (0..merged.len()).collect();
            order.sort_by(|&a, &b| {
                let (ha, hb) = (&merged[a].0, &merged[b].0);
                hb.score.total_cmp(&ha.score).then(hb.last.total_cmp(&ha.last))
            });
            order.truncate(beam);
            order.sort_unstable();
            let mut slots: Vec<Option<(Hyp, bool)>> = merged.into_iter().map(Some).collect();
            for i in order {
                let (h, is_done) = slots[i].take().expect("selected once");
                if is_done {
                    done.push(h);
                } else {
                    active.push(h);
                }
            }
        }
        kept = done;
    }
    let best = kept
        .into_iter()
        .reduce(|a, b| if b.score > a.score { b } else { a })
        .expect("beam keeps at least one hypothesis");
    Ok(DecodeOutput {
        tokens: best.tokens,
        score: best.score,
        joint_evals: dec.joint_evals(),
        frame_tokens: best.frame_tokens,
    })
}

fn merge_done(done: &mut Vec<Hyp>, h: Hyp) {
    match done.iter_mut().find(|d| d.tokens == h.tokens) {
        Some(d) => d.score = log_add_exp(d.score, h.score),
        None => done.push(h),
    }
}

fn prune(hyps: &mut Vec<Hyp>, beam: usize) {
    let mut order: Vec<usize> = (0..hyps.len()).collect();
    order.sort_by(|&a, &b| hyps[b].score.total_cmp(&hyps[a].score));
    order.truncate(beam);
    order.sort_unstable();
    let mut slots: Vec<Option<Hyp>> = hyps.drain(..).map(Some).collect();
    hyps.extend(order.into_iter().map(|i| slots[i].take().expect("selected once")));
}
