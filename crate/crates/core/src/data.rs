//! Synthetic contextual-ASR corpus.
//!
//! Transcripts come from command templates filled with catalog phrases.
//! Entity names are composed from a small syllable inventory, so each name
//! is rare while its tokens are not. Acoustics are per-token prototype
//! vectors repeated for two or three frames plus white noise; tokens that
//! only occur inside entity names are paired up and given nearly identical
//! prototypes, so telling a pair apart needs the context list.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::context::{Category, ContextPhrase, PretrainedEmbeddings};
use crate::error::{config, contract, Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

const CONSONANTS: [char; 16] = ['b', 'k', 'r', 'm', 'z', 'l', 'v', 'd', 'n', 'g', 'p', 's', 'f', 'j', 't', 'h'];
const VOWELS: [char; 5] = ['a', 'o', 'i', 'u', 'e'];
const DEVICE_NOUNS: [&str; 6] = ["lamp", "tv", "speaker", "fan", "heater", "radio"];
const SETTINGS: [&str; 4] = ["turn on", "turn off", "dim", "set"];
const LOCATIONS: [&str; 8] = [
    "living room",
    "kitchen",
    "bedroom",
    "garage",
    "office",
    "hallway",
    "basement",
    "patio",
];

const DEVICE_TEMPLATES: [&str; 4] = ["turn on <device>", "turn off <device>", "dim <device>", "set <device> to twenty"];
const ENTITY_TEMPLATES: [&str; 4] = ["play <entity>", "open <entity>", "switch to <entity>", "play <entity> in the <location>"];
const COMMON_TEMPLATES: [&str; 6] = [
    "turn on the <location> light",
    "turn off the <location> light",
    "dim <location> light thirty percent",
    "set <location> heat to twenty",
    "open the <location> blinds",
    "play music in the <location>",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Personalized,
    Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogSpec {
    pub device_names: usize,
    pub named_entities: usize,
    pub settings: usize,
    pub locations: usize,
    /// Training-set occurrence targets, cycled over device names and
    /// named entities.
    pub train_frequencies: Vec<usize>,
    pub name_syllables: usize,
    /// Number of consonant-vowel syllables names are built from.
    pub syllable_inventory: usize,
}

impl Default for CatalogSpec {
    fn default() -> Self {
        Self {
            device_names: 60,
            named_entities: 60,
            settings: 4,
            locations: 8,
            train_frequencies: vec![0, 1, 2],
            name_syllables: 3,
            syllable_inventory: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub text: String,
    pub category: Category,
    /// Target number of training transcripts, for entity phrases.
    pub train_frequency: Option<usize>,
    #[serde(default)]
    pub token_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl ContextCatalog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn of(&self, category: Category) -> impl Iterator<Item = (usize, &CatalogEntry)> {
        self.entries.iter().enumerate().filter(move |(_, e)| e.category == category)
    }

    pub fn tokenize(&mut self, tok: &Tokenizer) -> Result<()> {
        for e in &mut self.entries {
            e.token_ids = tok.tokenize(&e.text)?;
        }
        Ok(())
    }

    pub fn phrase(&self, index: usize, relevant: bool) -> Result<ContextPhrase> {
        let e = &self.entries[index];
        ContextPhrase::new(e.text.clone(), e.token_ids.clone(), e.category, relevant)
    }

    pub fn phrases(&self) -> Result<Vec<ContextPhrase>> {
        (0..self.len()).map(|i| self.phrase(i, false)).collect()
    }

    /// Words of device-name and named-entity phrases.
    pub fn personal_words(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| matches!(e.category, Category::PersonalizedDeviceName | Category::NamedEntity))
            .flat_map(|e| e.text.split(' '))
            .collect()
    }

    /// Catalog indices of phrases occurring as whole-word spans of
    /// `transcript`.
    pub fn relevant_to(&self, transcript: &str) -> Vec<usize> {
        let words: Vec<&str> = transcript.split(' ').collect();
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                let p: Vec<&str> = e.text.split(' ').collect();
                words.windows(p.len()).any(|w| w == p.as_slice())
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_of(&self, transcript: &str) -> Split {
        let personal = self.personal_words();
        if transcript.split(' ').any(|w| personal.contains(w)) {
            Split::Personalized
        } else {
            Split::Common
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.entries)?)?;
        Ok(())
    }
}

/// Syllable `i` of the consonant-vowel inventory; the first 80 are distinct.
fn syllable(i: usize) -> String {
    let c = CONSONANTS[i % CONSONANTS.len()];
    let v = VOWELS[(i + i / CONSONANTS.len()) % VOWELS.len()];
    format!("{c}{v}")
}

/// `count` distinct names of `syllables` syllables drawn from the first
/// `inventory` entries, without an immediately repeated syllable.
fn sample_names(count: usize, syllables: usize, inventory: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
    if syllables == 0 || !(2..=CONSONANTS.len() * VOWELS.len()).contains(&inventory) {
        return Err(config(format!(
            "names need at least one syllable and an inventory of 2 to {}",
            CONSONANTS.len() * VOWELS.len()
        )));
    }
    let available = (inventory as f64) * ((inventory - 1) as f64).powi(syllables as i32 - 1);
    if count as f64 > available / 2.0 {
        return Err(config(format!(
            "{count} entity names requested but only {available} exist; raise syllable_inventory or name_syllables"
        )));
    }
    let pool: Vec<String> = (0..inventory).map(syllable).collect();
    let mut seen = BTreeSet::new();
    let mut names = Vec::with_capacity(count);
    while names.len() < count {
        let mut parts: Vec<usize> = Vec::with_capacity(syllables);
        while parts.len() < syllables {
            let s = rng.gen_range(0..inventory);
            if parts.last() != Some(&s) {
                parts.push(s);
            }
        }
        let name: String = parts.iter().map(|&s| pool[s].as_str()).collect();
        if seen.insert(name.clone()) {
            names.push(name);
        }
    }
    Ok(names)
}

/// Deterministic catalog; entity names never repeat.
pub fn build_catalog(spec: &CatalogSpec, seed: u64) -> Result<ContextCatalog> {
    let counts = [
        ("device_names", spec.device_names),
        ("named_entities", spec.named_entities),
        ("settings", spec.settings),
        ("locations", spec.locations),
    ];
    for (name, n) in counts {
        if n == 0 {
            return Err(config(format!("catalog needs at least one phrase in {name}")));
        }
    }
    if spec.settings > SETTINGS.len() || spec.locations > LOCATIONS.len() {
        return Err(config(format!(
            "at most {} settings and {} locations are available",
            SETTINGS.len(),
            LOCATIONS.len()
        )));
    }
    if spec.train_frequencies.is_empty() {
        return Err(config("train_frequencies must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = sample_names(
        spec.device_names + spec.named_entities,
        spec.name_syllables,
        spec.syllable_inventory,
        &mut rng,
    )?;
    let mut entries = Vec::new();
    let mut freq = spec.train_frequencies.iter().copied().cycle();
    for name in &names[..spec.device_names] {
        let noun = DEVICE_NOUNS[rng.gen_range(0..DEVICE_NOUNS.len())];
        entries.push(CatalogEntry {
            text: format!("{name}'s {noun}"),
            category: Category::PersonalizedDeviceName,
            train_frequency: freq.next(),
            token_ids: Vec::new(),
        });
    }
    for name in &names[spec.device_names..spec.device_names + spec.named_entities] {
        entries.push(CatalogEntry {
            text: name.clone(),
            category: Category::NamedEntity,
            train_frequency: freq.next(),
            token_ids: Vec::new(),
        });
    }
    for s in &SETTINGS[..spec.settings] {
        entries.push(CatalogEntry {
            text: s.to_string(),
            category: Category::DeviceSetting,
            train_frequency: None,
            token_ids: Vec::new(),
        });
    }
    for l in &LOCATIONS[..spec.locations] {
        entries.push(CatalogEntry {
            text: l.to_string(),
            category: Category::DeviceLocation,
            train_frequency: None,
            token_ids: Vec::new(),
        });
    }
    Ok(ContextCatalog { entries })
}

/// A template with `<device>`, `<entity>` or `<location>` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Template(pub String);

impl Template {
    /// Fills every slot. `fixed` pins the entity phrase (catalog index) used
    /// for the first device or entity slot; other slots draw uniformly.
    pub fn fill(&self, catalog: &ContextCatalog, fixed: Option<usize>, rng: &mut ChaCha8Rng) -> Result<String> {
        let mut out = Vec::new();
        let mut fixed = fixed;
        for word in self.0.split(' ') {
            let category = match word {
                "<device>" => Category::PersonalizedDeviceName,
                "<entity>" => Category::NamedEntity,
                "<location>" => Category::DeviceLocation,
                w if w.starts_with('<') => return Err(Error::Generation(format!("unknown slot {w}"))),
                w => {
                    out.push(w.to_string());
                    continue;
                }
            };
            let pick = match fixed.take() {
                Some(i) if catalog.entries.get(i).map(|e| e.category) == Some(category) => i,
                Some(i) => {
                    return Err(Error::Generation(format!(
                        "catalog entry {i} does not fit slot {word}"
                    )))
                }
                None => {
                    let options: Vec<usize> = catalog.of(category).map(|(i, _)| i).collect();
                    *options
                        .get(rng.gen_range(0..options.len().max(1)))
                        .ok_or_else(|| Error::Generation(format!("no catalog phrase for slot {word}")))?
                }
            };
            out.push(catalog.entries[pick].text.clone());
        }
        Ok(out.join(" "))
    }
}

/// Token prototypes of the synthetic acoustics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acoustics {
    pub dim: usize,
    pub prototypes: Vec<Vec<f64>>,
    /// Token pairs with nearly identical prototypes.
    pub confusable: Vec<(usize, usize)>,
}

impl Acoustics {
    /// Random unit-variance prototypes; each pair of entity-only tokens is
    /// placed `confusion` (per dimension) apart.
    pub fn build(tok: &Tokenizer, catalog: &ContextCatalog, dim: usize, confusion: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let mut prototypes: Vec<Vec<f64>> = (0..tok.vocab_size())
            .map(|_| (0..dim).map(|_| gauss(&mut rng)).collect())
            .collect();
        let mut entity_only = entity_only_tokens(tok, catalog)?;
        entity_only.shuffle(&mut rng);
        let mut confusable = Vec::new();
        for pair in entity_only.chunks_exact(2) {
            let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            let moved: Vec<f64> = prototypes[a].iter().map(|&x| x + confusion * gauss(&mut rng)).collect();
            prototypes[b] = moved;
            confusable.push((a, b));
        }
        confusable.sort_unstable();
        Ok(Self {
            dim,
            prototypes,
            confusable,
        })
    }

    /// `frames[i]` for each token, repeated `repeats[i]` times, plus noise.
    pub fn render(&self, tokens: &[usize], repeats: &[usize], noise: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if tokens.len() != repeats.len() || tokens.is_empty() {
            return Err(contract("render needs one repeat count per token"));
        }
        let mut data = Vec::new();
        for (&tok, &r) in tokens.iter().zip(repeats) {
            let proto = self.prototypes.get(tok).ok_or(Error::Lookup {
                id: tok,
                size: self.prototypes.len(),
            })?;
            for _ in 0..r {
                for &x in proto {
                    let n: f64 = if noise > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                    data.push(x + noise * n);
                }
            }
        }
        let t = repeats.iter().sum();
        Tensor::matrix(t, self.dim, data)
    }
}

/// Tokens appearing in entity-name words and nowhere else, excluding the
/// possessive suffix.
pub fn entity_only_tokens(tok: &Tokenizer, catalog: &ContextCatalog) -> Result<Vec<usize>> {
    let mut name_words = BTreeSet::new();
    let mut other_words = BTreeSet::new();
    for e in &catalog.entries {
        for (i, w) in e.text.split(' ').enumerate() {
            let is_name = match e.category {
                Category::NamedEntity => true,
                Category::PersonalizedDeviceName => i == 0,
                _ => false,
            };
            if is_name {
                name_words.insert(w.to_string());
            } else {
                other_words.insert(w.to_string());
            }
        }
    }
    for t in COMMON_TEMPLATES.iter().chain(&DEVICE_TEMPLATES).chain(&ENTITY_TEMPLATES) {
        for w in t.split(' ').filter(|w| !w.starts_with('<')) {
            other_words.insert(w.to_string());
        }
    }
    let collect = |words: &BTreeSet<String>| -> Result<BTreeSet<usize>> {
        let mut ids = BTreeSet::new();
        for w in words {
            ids.extend(tok.tokenize(w)?);
        }
        Ok(ids)
    };
    let names = collect(&name_words)?;
    let others = collect(&other_words)?;
    Ok(names
        .difference(&others)
        .copied()
        .filter(|&id| !tok.token(id).unwrap_or_default().contains('\''))
        .collect())
}

/// Concatenates each frame with its two predecessors (zero-padded) and
/// keeps every third frame.
pub fn stack_and_downsample(frames: &Tensor) -> Tensor {
    let (t, d) = (frames.rows(), frames.cols());
    let mut rows = Vec::new();
    for i in (0..t).step_by(3) {
        let mut row = Vec::with_capacity(3 * d);
        for back in [2usize, 1, 0] {
            match i.checked_sub(back) {
                Some(j) => row.extend_from_slice(frames.row(j)),
                None => row.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows).expect("non-empty")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: usize,
    pub transcript: String,
    pub tokens: Vec<usize>,
    #[serde(with = "nested_rows")]
    pub frames: Tensor,
    /// Frames rendered per token.
    pub token_frames: Vec<usize>,
    pub context: Vec<ContextPhrase>,
    pub split: Split,
}

mod nested_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tensor::Tensor;

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        t.to_rows().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Tensor::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub k: usize,
    /// Keep every relevant phrase in the batch.
    pub relevant_always_present: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            k: 8,
            relevant_always_present: true,
        }
    }
}

/// `K` phrases: every relevant one plus uniformly drawn others, shuffled.
pub fn sample_context_batch(
    relevant: &[usize],
    catalog: &ContextCatalog,
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ContextPhrase>> {
    if cfg.k == 0 {
        return Err(contract("context batch size K must be at least 1"));
    }
    let keep: Vec<usize> = if cfg.relevant_always_present { relevant.to_vec() } else { Vec::new() };
    if keep.len() > cfg.k {
        return Err(contract(format!("{} relevant phrases exceed K = {}", keep.len(), cfg.k)));
    }
    let others: Vec<usize> = (0..catalog.len()).filter(|i| !keep.contains(i)).collect();
    let need = cfg.k - keep.len();
    if need > others.len() {
        return Err(contract(format!(
            "catalog of {} phrases cannot fill K = {}",
            catalog.len(),
            cfg.k
        )));
    }
    let mut picked: Vec<usize> = keep;
    picked.extend(rand::seq::index::sample(rng, others.len(), need).into_iter().map(|j| others[j]));
    picked.shuffle(rng);
    picked
        .into_iter()
        .map(|i| catalog.phrase(i, relevant.contains(&i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub catalog: CatalogSpec,
    pub utterances: usize,
    /// Train, dev and test shares.
    pub proportions: [f64; 3],
    /// Share of Personalized utterances in dev and test.
    pub personalized_fraction: f64,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub noise: f64,
    /// Per-dimension distance scale between confusable prototypes.
    pub confusion: f64,
    pub min_repeat: usize,
    pub max_repeat: usize,
    pub sampling: SamplingConfig,
    pub stack_frames: bool,
    /// Width of the frozen context vectors written with the corpus.
    pub context_dim: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            catalog: CatalogSpec::default(),
            utterances: 1000,
            proportions: [0.7, 0.15, 0.15],
            personalized_fraction: 0.5,
            vocab_size: 128,
            input_dim: 16,
            noise: 0.5,
            confusion: 0.05,
            min_repeat: 2,
            max_repeat: 3,
            sampling: SamplingConfig::default(),
            stack_frames: false,
            context_dim: 32,
        }
    }
}

/// Utterance counts of the train, dev and test blocks.
pub fn split_sizes(n: usize, proportions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = proportions.iter().sum();
    if proportions.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(config("split proportions must be non-negative and sum to 1"));
    }
    let train = (n as f64 * proportions[0]).round() as usize;
    let dev = ((n as f64 * proportions[1]).round() as usize).min(n - train);
    Ok([train, dev, n - train - dev])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub seed: u64,
    pub catalog: ContextCatalog,
    pub tokenizer: Tokenizer,
    pub acoustics: Acoustics,
    pub context_vectors: PretrainedEmbeddings,
    pub utterances: Vec<Utterance>,
}

struct Plan {
    template: &'static str,
    fixed: Option<usize>,
}

/// Pure function of `(spec, seed)`.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    if spec.min_repeat == 0 || spec.min_repeat > spec.max_repeat {
        return Err(config("repeat range must satisfy 1 <= min <= max"));
    }
    if !(0.0..=1.0).contains(&spec.personalized_fraction) {
        return Err(config("personalized_fraction must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut catalog = build_catalog(&spec.catalog, rng.gen())?;
    let [n_train, n_dev, n_test] = split_sizes(spec.utterances, spec.proportions)?;

    let entity_plan = |i: usize, rng: &mut ChaCha8Rng| -> Plan {
        let templates: &[&'static str] = match catalog.entries[i].category {
            Category::PersonalizedDeviceName => &DEVICE_TEMPLATES,
            _ => &ENTITY_TEMPLATES,
        };
        Plan {
            template: templates[rng.gen_range(0..templates.len())],
            fixed: Some(i),
        }
    };
    let common_plan = |rng: &mut ChaCha8Rng| Plan {
        template: COMMON_TEMPLATES[rng.gen_range(0..COMMON_TEMPLATES.len())],
        fixed: None,
    };

    let entities: Vec<usize> = catalog
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.train_frequency.is_some())
        .map(|(i, _)| i)
        .collect();
    let mut train = Vec::with_capacity(n_train);
    for &i in &entities {
        for _ in 0..catalog.entries[i].train_frequency.unwrap_or(0) {
            train.push(entity_plan(i, &mut rng));
        }
    }
    if train.len() > n_train {
        return Err(config(format!(
            "entity frequency targets need {} training utterances, only {n_train} available",
            train.len()
        )));
    }
    while train.len() < n_train {
        train.push(common_plan(&mut rng));
    }
    train.shuffle(&mut rng);
    let held_out = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Plan> {
        let n_pers = (n as f64 * spec.personalized_fraction).round() as usize;
        let mut block: Vec<Plan> = (0..n)
            .map(|j| {
                if j < n_pers {
                    entity_plan(entities[rng.gen_range(0..entities.len())], rng)
                } else {
                    common_plan(rng)
                }
            })
            .collect();
        block.shuffle(rng);
        block
    };
    let dev = held_out(n_dev, &mut rng);
    let test = held_out(n_test, &mut rng);

    let plans: Vec<Plan> = train.into_iter().chain(dev).chain(test).collect();
    let mut transcripts = Vec::with_capacity(plans.len());
    for plan in &plans {
        transcripts.push(Template(plan.template.to_string()).fill(&catalog, plan.fixed, &mut rng)?);
    }

    let mut tok_texts: Vec<&str> = transcripts[..n_train].iter().map(String::as_str).collect();
    tok_texts.extend(catalog.entries.iter().map(|e| e.text.as_str()));
    // Template words, so held-out transcripts never leave the alphabet.
    tok_texts.extend(COMMON_TEMPLATES.iter().chain(&DEVICE_TEMPLATES).chain(&ENTITY_TEMPLATES).copied());
    let tok_texts: Vec<String> = tok_texts
        .into_iter()
        .map(|t| t.split(' ').filter(|w| !w.starts_with('<')).collect::<Vec<_>>().join(" "))
        .collect();
    let tokenizer = Tokenizer::train(&tok_texts, spec.vocab_size)?;
    catalog.tokenize(&tokenizer)?;
    let acoustics = Acoustics::build(&tokenizer, &catalog, spec.input_dim, spec.confusion, rng.gen())?;
    let context_vectors = context_vectors(&catalog, tokenizer.vocab_size(), spec.context_dim, rng.gen())?;

    let mut utterances = Vec::with_capacity(transcripts.len());
    for (id, transcript) in transcripts.into_iter().enumerate() {
        let mut urng = ChaCha8Rng::seed_from_u64(rng.gen());
        utterances.push(synth_from_transcript(id, transcript, &catalog, &tokenizer, &acoustics, spec, &mut urng)?);
    }
    Ok(Corpus {
        spec: spec.clone(),
        seed,
        catalog,
        tokenizer,
        acoustics,
        context_vectors,
        utterances,
    })
}

fn synth_from_transcript(
    id: usize,
    transcript: String,
    catalog: &ContextCatalog,
    tokenizer: &Tokenizer,
    acoustics: &Acoustics,
    spec: &CorpusSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    let tokens = tokenizer.tokenize(&transcript)?;
    let token_frames: Vec<usize> = tokens
        .iter()
        .map(|_| rng.gen_range(spec.min_repeat..=spec.max_repeat))
        .collect();
    let mut frames = acoustics.render(&tokens, &token_frames, spec.noise, rng)?;
    if spec.stack_frames {
        frames = stack_and_downsample(&frames);
    }
    let relevant = catalog.relevant_to(&transcript);
    let context = sample_context_batch(&relevant, catalog, &spec.sampling, rng)?;
    Ok(Utterance {
        id,
        split: catalog.split_of(&transcript),
        transcript,
        tokens,
        frames,
        token_frames,
        context,
    })
}

/// One utterance from a template; `fixed` pins the entity slot.
pub fn synth_utterance(
    template: &Template,
    fixed: Option<usize>,
    corpus: &Corpus,
    noise: f64,
    seed: u64,
) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transcript = template.fill(&corpus.catalog, fixed, &mut rng)?;
    let spec = CorpusSpec {
        noise,
        ..corpus.spec.clone()
    };
    synth_from_transcript(usize::MAX, transcript, &corpus.catalog, &corpus.tokenizer, &corpus.acoustics, &spec, &mut rng)
}

/// Frozen stand-in phrase vectors: the sum of fixed random token vectors
/// scaled to norm `sqrt(dim)`, so phrases sharing tokens lie close together
/// and entries have unit scale.
pub fn context_vectors(catalog: &ContextCatalog, vocab: usize, dim: usize, seed: u64) -> Result<PretrainedEmbeddings> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table: Vec<Vec<f64>> = (0..vocab)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut vectors = BTreeMap::new();
    for e in &catalog.entries {
        let mut v = vec![0.0; dim];
        for &id in &e.token_ids {
            for (acc, x) in v.iter_mut().zip(&table[id]) {
                *acc += x;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12) / (dim as f64).sqrt();
        vectors.insert(e.text.clone(), v.iter().map(|x| x / norm).collect());
    }
    PretrainedEmbeddings::from_vectors(dim, vectors)
}

/// Train/dev/test views with dev and test divided by split label.
pub struct Splits<'c> {
    pub train: Vec<&'c Utterance>,
    pub dev: BTreeMap<SplitKey, Vec<&'c Utterance>>,
    pub test: BTreeMap<SplitKey, Vec<&'c Utterance>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SplitKey {
    Personalized,
    Common,
}

impl From<Split> for SplitKey {
    fn from(s: Split) -> Self {
        match s {
            Split::Personalized => SplitKey::Personalized,
            Split::Common => SplitKey::Common,
        }
    }
}

impl<'c> Splits<'c> {
    pub fn held_out(&self, partition: Partition) -> &BTreeMap<SplitKey, Vec<&'c Utterance>> {
        match partition {
            Partition::Dev => &self.dev,
            _ => &self.test,
        }
    }
}

fn divide<'c>(block: &'c [Utterance], name: &str) -> Result<BTreeMap<SplitKey, Vec<&'c Utterance>>> {
    let mut out: BTreeMap<SplitKey, Vec<&Utterance>> = BTreeMap::new();
    out.insert(SplitKey::Personalized, Vec::new());
    out.insert(SplitKey::Common, Vec::new());
    for utt in block {
        out.get_mut(&utt.split.into()).expect("both keys").push(utt);
    }
    if let Some((k, _)) = out.iter().find(|(_, v)| v.is_empty()) {
        return Err(config(format!("{name} {k:?} partition is empty")));
    }
    Ok(out)
}

pub fn make_splits(corpus: &Corpus) -> Result<Splits<'_>> {
    let [n_train, n_dev, _] = split_sizes(corpus.utterances.len(), corpus.spec.proportions)?;
    let u = &corpus.utterances;
    let train: Vec<&Utterance> = u[..n_train].iter().collect();
    if train.is_empty() {
        return Err(config("train partition is empty"));
    }
    Ok(Splits {
        train,
        dev: divide(&u[n_train..n_train + n_dev], "dev")?,
        test: divide(&u[n_train + n_dev..], "test")?,
    })
}

pub fn partition_of(corpus: &Corpus, index: usize) -> Result<Partition> {
    let [n_train, n_dev, _] = split_sizes(corpus.utterances.len(), corpus.spec.proportions)?;
    Ok(if index < n_train {
        Partition::Train
    } else if index < n_train + n_dev {
        Partition::Dev
    } else {
        Partition::Test
    })
}

const CORPUS_FILE: &str = "corpus.jsonl";
const META_FILE: &str = "meta.json";
const CATALOG_FILE: &str = "catalog.json";
const VECTORS_FILE: &str = "context_vectors.tsv";

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: CorpusSpec,
    seed: u64,
    tokenizer: Tokenizer,
    acoustics: Acoustics,
}

impl Corpus {
    /// Writes `corpus.jsonl`, `catalog.json`, `context_vectors.tsv` and
    /// `meta.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut lines = String::new();
        for u in &self.utterances {
            lines.push_str(&serde_json::to_string(u)?);
            lines.push('\n');
        }
        std::fs::write(dir.join(CORPUS_FILE), lines)?;
        self.catalog.save(dir.join(CATALOG_FILE))?;
        std::fs::write(dir.join(VECTORS_FILE), self.context_vectors.to_file_string())?;
        let meta = Meta {
            spec: self.spec.clone(),
            seed: self.seed,
            tokenizer: self.tokenizer.clone(),
            acoustics: self.acoustics.clone(),
        };
        std::fs::write(dir.join(META_FILE), serde_json::to_string(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        let entries: Vec<CatalogEntry> = serde_json::from_str(&std::fs::read_to_string(dir.join(CATALOG_FILE))?)?;
        let context_vectors = PretrainedEmbeddings::load(dir.join(VECTORS_FILE), meta.spec.context_dim)?;
        let mut utterances = Vec::new();
        for (i, line) in std::fs::read_to_string(dir.join(CORPUS_FILE))?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            utterances.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(Self {
            spec: meta.spec,
            seed: meta.seed,
            catalog: ContextCatalog { entries },
            tokenizer: meta.tokenizer,
            acoustics: meta.acoustics,
            context_vectors,
            utterances,
        })
    }

    /// Training-transcript count per entity phrase text.
    pub fn train_counts(&self) -> Result<BTreeMap<String, usize>> {
        let [n_train, _, _] = split_sizes(self.utterances.len(), self.spec.proportions)?;
        let mut counts: BTreeMap<String, usize> = self
            .catalog
            .entries
            .iter()
            .filter(|e| e.train_frequency.is_some())
            .map(|e| (e.text.clone(), 0))
            .collect();
        for u in &self.utterances[..n_train] {
            for i in self.catalog.relevant_to(&u.transcript) {
                if let Some(c) = counts.get_mut(&self.catalog.entries[i].text) {
                    *c += 1;
                }
            }
        }
        Ok(counts)
    }
}
