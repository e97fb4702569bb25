//! Context phrases and their fixed-width embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config, contract, Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    PersonalizedDeviceName,
    NamedEntity,
    DeviceSetting,
    DeviceLocation,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::PersonalizedDeviceName,
        Category::NamedEntity,
        Category::DeviceSetting,
        Category::DeviceLocation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::PersonalizedDeviceName => "personalized-device-name",
            Category::NamedEntity => "named-entity",
            Category::DeviceSetting => "device-setting",
            Category::DeviceLocation => "device-location",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| config(format!("unknown category {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextPhrase {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub category: Category,
    pub relevant: bool,
}

impl ContextPhrase {
    pub fn new(text: impl Into<String>, token_ids: Vec<usize>, category: Category, relevant: bool) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(contract("context phrase without tokens"));
        }
        Ok(Self {
            text: text.into(),
            token_ids,
            category,
            relevant,
        })
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.token_ids.is_empty() {
            return Err(contract(format!("context phrase {:?} has no tokens", self.text)));
        }
        match self.token_ids.iter().find(|&&id| id >= vocab) {
            Some(&id) => Err(Error::Lookup { id, size: vocab }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
struct LstmCell {
    w: ParamId,
    b: ParamId,
    hidden: usize,
}

impl LstmCell {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.glorot(format!("{name}.w"), d_in + hidden, 4 * hidden, rng),
            b: store.zeros(format!("{name}.b"), 4 * hidden),
            hidden,
        }
    }

    /// One step on a row batch; gate order is input, forget, cell, output.
    fn step<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>, h: Var<'t>, c: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let n = self.hidden;
        let gates = Var::concat(&[x, h])?.matmul(p.var(self.w))?.add(p.var(self.b))?;
        let i = gates.slice_cols(0, n)?.sigmoid();
        let f = gates.slice_cols(n, n)?.sigmoid();
        let g = gates.slice_cols(2 * n, n)?.tanh();
        let o = gates.slice_cols(3 * n, n)?.sigmoid();
        let c = f.mul(c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh())?;
        Ok((h, c))
    }
}

/// Single-layer bidirectional LSTM over phrase tokens. The embedding of a
/// phrase is the forward state after its last token joined with the
/// backward state after its first token.
#[derive(Clone, Debug)]
pub struct BlstmEncoder {
    embed: ParamId,
    fwd: LstmCell,
    bwd: LstmCell,
    vocab: usize,
    d_c: usize,
}

impl BlstmEncoder {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, embed_dim: usize, d_c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if d_c == 0 || !d_c.is_multiple_of(2) {
            return Err(config(format!("context width {d_c} must be even")));
        }
        Ok(Self {
            embed: store.normal_matrix(format!("{name}.embed"), vocab, embed_dim, 0.3, rng),
            fwd: LstmCell::new(store, &format!("{name}.fwd"), embed_dim, d_c / 2, rng),
            bwd: LstmCell::new(store, &format!("{name}.bwd"), embed_dim, d_c / 2, rng),
            vocab,
            d_c,
        })
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.embed, self.fwd.w, self.fwd.b, self.bwd.w, self.bwd.b]
    }

    /// `K × d_c` embeddings, one row per phrase in input order. Phrases of
    /// equal length share one batched recurrence.
    pub fn encode<'t>(&self, p: &Binder<'t, '_>, phrases: &[&[usize]]) -> Result<Var<'t>> {
        if phrases.is_empty() {
            return Err(contract("empty context phrase list"));
        }
        for ids in phrases {
            if ids.is_empty() {
                return Err(contract("context phrase without tokens"));
            }
            if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
                return Err(Error::Lookup { id, size: self.vocab });
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, ids) in phrases.iter().enumerate() {
            groups.entry(ids.len()).or_default().push(k);
        }
        let tape = p.tape();
        let table = p.var(self.embed);
        let half = self.d_c / 2;
        let mut blocks = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(phrases.len());
        for (len, members) in &groups {
            let g = members.len();
            let steps: Vec<Var<'t>> = (0..*len)
                .map(|s| table.gather_rows(&members.iter().map(|&k| phrases[k][s]).collect::<Vec<_>>()))
                .collect::<Result<_>>()?;
            let zero = || tape.constant(Tensor::zeros(&[g, half]));
            let (mut h, mut c) = (zero(), zero());
            for x in &steps {
                (h, c) = self.fwd.step(p, *x, h, c)?;
            }
            let h_fwd = h;
            let (mut h, mut c) = (zero(), zero());
            for x in steps.iter().rev() {
                (h, c) = self.bwd.step(p, *x, h, c)?;
            }
            blocks.push(Var::concat(&[h_fwd, h])?);
            order.extend_from_slice(members);
        }
        let stacked = if blocks.len() == 1 { blocks[0] } else { Var::concat_rows(&blocks)? };
        if order.iter().enumerate().all(|(i, &k)| i == k) {
            return Ok(stacked);
        }
        let mut inverse = vec![0; order.len()];
        for (row, &k) in order.iter().enumerate() {
            inverse[k] = row;
        }
        stacked.gather_rows(&inverse)
    }
}

/// Frozen phrase vectors loaded from a file. Never part of a parameter
/// store, so they cannot receive gradient updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainedEmbeddings {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    fallback: Vec<f64>,
}

impl PretrainedEmbeddings {
    pub fn from_vectors(dim: usize, vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(config("pretrained embedding table is empty"));
        }
        let mut fallback = vec![0.0; dim];
        for (phrase, v) in &vectors {
            if v.len() != dim {
                return Err(config(format!(
                    "vector for {phrase:?} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "pretrained embeddings" });
            }
            for (f, x) in fallback.iter_mut().zip(v) {
                *f += x;
            }
        }
        let n = vectors.len() as f64;
        fallback.iter_mut().for_each(|f| *f /= n);
        Ok(Self { dim, vectors, fallback })
    }

    /// Parses `phrase<TAB>v1,...,v_d` lines; blank lines and lines starting
    /// with `#` are skipped.
    pub fn parse(text: &str, dim: usize) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (phrase, values) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "expected phrase<TAB>values".into(),
            })?;
            let v: Vec<f64> = values
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?;
            if v.len() != dim {
                return Err(config(format!(
                    "line {line_no}: vector dimension {} does not match d_c = {dim}",
                    v.len()
                )));
            }
            vectors.insert(phrase.to_string(), v);
        }
        Self::from_vectors(dim, vectors)
    }

    pub fn load(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, dim)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (phrase, v) in &self.vectors {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            out.push_str(phrase);
            out.push('\t');
            out.push_str(&vals.join(","));
            out.push('\n');
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, phrase: &str) -> &[f64] {
        self.vectors.get(phrase).unwrap_or(&self.fallback)
    }

    pub fn matrix(&self, phrases: &[&str]) -> Result<Tensor> {
        if phrases.is_empty() {
            return Err(contract("empty context phrase list"));
        }
        let data = phrases.iter().flat_map(|p| self.get(p).iter().copied()).collect();
        Tensor::matrix(phrases.len(), self.dim, data)
    }
}

/// Either a trainable BLSTM or a frozen lookup table.
#[derive(Clone, Debug)]
pub enum ContextEncoder {
    Blstm(BlstmEncoder),
    Pretrained(PretrainedEmbeddings),
}

impl ContextEncoder {
    pub fn d_c(&self) -> usize {
        match self {
            ContextEncoder::Blstm(b) => b.d_c(),
            ContextEncoder::Pretrained(p) => p.dim(),
        }
    }

    pub fn encode<'t>(&self, p: &Binder<'t, '_>, phrases: &[ContextPhrase]) -> Result<Var<'t>> {
        match self {
            ContextEncoder::Blstm(b) => {
                let ids: Vec<&[usize]> = phrases.iter().map(|ph| ph.token_ids.as_slice()).collect();
                b.encode(p, &ids)
            }
            ContextEncoder::Pretrained(table) => {
                let texts: Vec<&str> = phrases.iter().map(|ph| ph.text.as_str()).collect();
                Ok(p.tape().constant(table.matrix(&texts)?))
            }
        }
    }

    /// Inference-only convenience returning the embedding values.
    pub fn embed(&self, store: &ParamStore, phrases: &[ContextPhrase]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = Binder::new(&tape, store, false);
        Ok((*self.encode(&p, phrases)?.value()).clone())
    }
}
