//! Merge-based subword tokenizer.
//!
//! Training starts from the character alphabet of the corpus and repeatedly
//! merges the most frequent adjacent symbol pair inside words (ties go to
//! the lexicographically smallest pair) until the inventory reaches the
//! requested size. The space character is an ordinary single-character
//! token that never takes part in a merge, so word boundaries survive as
//! their own token. Encoding is greedy longest-match over the inventory.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct Tokenizer {
    tokens: Vec<String>,
    alphabet_size: usize,
    index: HashMap<String, usize>,
    max_chars: usize,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    tokens: Vec<String>,
    alphabet_size: usize,
}

impl From<TokenizerRepr> for Tokenizer {
    fn from(r: TokenizerRepr) -> Self {
        Self::from_inventory(r.tokens, r.alphabet_size)
    }
}

impl From<Tokenizer> for TokenizerRepr {
    fn from(t: Tokenizer) -> Self {
        Self {
            tokens: t.tokens,
            alphabet_size: t.alphabet_size,
        }
    }
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.alphabet_size == other.alphabet_size
    }
}

impl Tokenizer {
    fn from_inventory(tokens: Vec<String>, alphabet_size: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let max_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Self {
            tokens,
            alphabet_size,
            index,
            max_chars,
        }
    }

    /// Learns an inventory of at most `vocab_size` tokens from `texts`.
    pub fn train<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Self> {
        let mut alphabet: Vec<char> = texts.iter().flat_map(|t| t.as_ref().chars()).collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        if alphabet.is_empty() {
            return Err(config("tokenizer corpus is empty"));
        }
        if vocab_size < alphabet.len() {
            return Err(config(format!(
                "vocab size {vocab_size} is below the alphabet size {}",
                alphabet.len()
            )));
        }
        let mut tokens: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
        let mut known: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();

        let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            for w in t.as_ref().split(' ').filter(|w| !w.is_empty()) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.chars().map(|ch| ch.to_string()).collect(), c))
            .collect();

        while tokens.len() < vocab_size {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
                }
            }
            // Highest count wins; BTreeMap order makes the first maximum the
            // lexicographically smallest pair.
            let Some(((a, b), _)) = pairs
                .iter()
                .fold(None::<(&(&str, &str), usize)>, |best, (p, &c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((p, c)),
                })
                .map(|(p, c)| ((p.0.to_string(), p.1.to_string()), c))
            else {
                break;
            };
            let merged = format!("{a}{b}");
            for (syms, _) in &mut words {
                let mut out = Vec::with_capacity(syms.len());
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut syms[i]));
                        i += 1;
                    }
                }
                *syms = out;
            }
            if !known.contains_key(&merged) {
                known.insert(merged.clone(), tokens.len());
                tokens.push(merged);
            }
        }
        Ok(Self::from_inventory(tokens, alphabet.len()))
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn space_id(&self) -> Option<usize> {
        self.id(" ")
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        if text.is_empty() {
            return Err(Error::Tokenize("empty input".into()));
        }
        let chars: Vec<char> = text.chars().collect();
        let mut ids = Vec::new();
        let mut i = 0;
        let mut buf = String::new();
        while i < chars.len() {
            let longest = self.max_chars.min(chars.len() - i);
            let hit = (1..=longest).rev().find_map(|len| {
                buf.clear();
                buf.extend(&chars[i..i + len]);
                self.index.get(&buf).map(|&id| (id, len))
            });
            match hit {
                Some((id, len)) => {
                    ids.push(id);
                    i += len;
                }
                None => {
                    return Err(Error::Tokenize(format!(
                        "character {:?} outside the alphabet",
                        chars[i]
                    )))
                }
            }
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.token(id).ok_or(Error::Lookup {
                    id,
                    size: self.tokens.len(),
                })
            })
            .collect()
    }
}
