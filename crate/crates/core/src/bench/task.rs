//! Seeded synthetic tasks.
//!
//! Every sequence starts with the CLS token `0`. The vocabulary above it is
//! split into `2·pairs` key tokens (`1..=2·pairs`, paired as `(1,2)`,
//! `(3,4)`, ...) and filler tokens.
//!
//! * classification: each sequence holds exactly two key tokens. Class 1
//!   sequences hold both members of one pair, class 0 sequences hold members
//!   of two different pairs, so single-token presence carries no signal and
//!   the label depends on co-occurrence only.
//! * pair identity: each sequence holds two distinct key tokens and the label
//!   is the index of that unordered pair among all `C(2·pairs, 2)` pairs.
//!   Used to pretrain the toy encoder before it is adapted downstream.
//! * regression: every token carries a fixed N(0, 1) score; the target is the
//!   mean score of the non-CLS tokens plus N(0, noise²).

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        }
    }

    /// Width of the model head this task needs.
    pub fn head_width(self) -> usize {
        match self {
            TaskKind::Classification => 2,
            TaskKind::Regression => 1,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" | "cls" => Ok(TaskKind::Classification),
            "regression" | "reg" => Ok(TaskKind::Regression),
            _ => Err(Error::config(format!("unknown task kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    /// Tokens per sequence, CLS included.
    pub seq_len: usize,
    pub vocab: usize,
    /// Number of key-token pairs (classification only).
    pub pairs: usize,
    /// Target noise standard deviation (regression only).
    pub noise: f64,
    /// `0` pairs the key tokens as `(1,2), (3,4), ...`; any other value
    /// pairs a seeded shuffle of them instead.
    pub pairing: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::Classification,
            seed: 0,
            train_size: 512,
            dev_size: 256,
            seq_len: 6,
            vocab: 32,
            pairs: 3,
            noise: 0.05,
            pairing: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl SyntheticTask {
    pub fn regression() -> Self {
        Self {
            kind: TaskKind::Regression,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.dev_size == 0 {
            return Err(Error::config("train and dev sizes must be positive"));
        }
        if self.seq_len < 3 {
            return Err(Error::config("sequences need CLS plus at least two tokens"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        match self.kind {
            TaskKind::Classification => {
                if self.pairs < 2 {
                    return Err(Error::config("classification needs at least 2 key pairs"));
                }
                let fillers = self.vocab.saturating_sub(1 + 2 * self.pairs);
                if fillers == 0 {
                    return Err(Error::config(format!(
                        "vocab {} leaves no filler tokens for {} pairs",
                        self.vocab, self.pairs
                    )));
                }
            }
            TaskKind::Regression => {
                if self.vocab < 3 {
                    return Err(Error::config("regression needs a vocabulary of at least 3"));
                }
            }
        }
        let space = (self.vocab as f64 - 1.0).powi(self.seq_len as i32 - 1);
        if space < 4.0 * (self.train_size + self.dev_size) as f64 {
            return Err(Error::config("sequence space too small for disjoint train/dev splits"));
        }
        Ok(())
    }

    /// Key tokens in pair order: pair `p` is `(keys[2p], keys[2p+1])`.
    pub fn key_tokens(&self) -> Vec<usize> {
        let mut keys: Vec<usize> = (1..=2 * self.pairs).collect();
        if self.pairing != 0 {
            keys.shuffle(&mut ChaCha8Rng::seed_from_u64(self.pairing));
        }
        keys
    }

    fn classification_example(&self, rng: &mut ChaCha8Rng, keys: &[usize]) -> Example {
        let label = rng.random_range(0..2);
        let p = rng.random_range(0..self.pairs);
        let (a, b) = if label == 1 {
            (keys[2 * p], keys[2 * p + 1])
        } else {
            let mut q = rng.random_range(0..self.pairs - 1);
            if q >= p {
                q += 1;
            }
            (keys[2 * p + rng.random_range(0..2)], keys[2 * q + rng.random_range(0..2)])
        };
        Example {
            tokens: self.body_with(rng, a, b),
            label: Label::Class(label),
        }
    }

    /// Number of unordered key-token pairs, i.e. pair-identity classes.
    pub fn pair_classes(&self) -> usize {
        let k = 2 * self.pairs;
        k * (k - 1) / 2
    }

    fn body_with(&self, rng: &mut ChaCha8Rng, a: usize, b: usize) -> Vec<usize> {
        let first_filler = 1 + 2 * self.pairs;
        let mut body: Vec<usize> = (0..self.seq_len - 3)
            .map(|_| rng.random_range(first_filler..self.vocab))
            .collect();
        body.push(a);
        body.push(b);
        body.shuffle(rng);
        let mut tokens = vec![CLS];
        tokens.extend(body);
        tokens
    }

    fn regression_example(&self, rng: &mut ChaCha8Rng, scores: &[f64], noise: &Normal<f64>) -> Example {
        let mut tokens = vec![CLS];
        tokens.extend((1..self.seq_len).map(|_| rng.random_range(1..self.vocab)));
        let mean = tokens[1..].iter().map(|&t| scores[t]).sum::<f64>() / (self.seq_len - 1) as f64;
        Example {
            tokens,
            label: Label::Value(mean + noise.sample(rng)),
        }
    }

    fn draw_splits(&self, rng: &mut ChaCha8Rng, mut sample: impl FnMut(&mut ChaCha8Rng) -> Example) -> Dataset {
        let mut seen = HashSet::new();
        let mut draw = |n: usize, rng: &mut ChaCha8Rng| {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let ex = sample(rng);
                if seen.insert(ex.tokens.clone()) {
                    out.push(ex);
                }
            }
            out
        };
        let train = draw(self.train_size, rng);
        let dev = draw(self.dev_size, rng);
        Dataset {
            kind: self.kind,
            train,
            dev,
        }
    }

    /// Deterministic under `seed`; no token sequence appears twice across
    /// or within the splits.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let noise = Normal::new(0.0, self.noise).expect("validated noise");
        let scores: Vec<f64> = (0..self.vocab).map(|_| unit.sample(&mut rng)).collect();
        let keys = self.key_tokens();
        Ok(self.draw_splits(&mut rng, |rng| match self.kind {
            TaskKind::Classification => self.classification_example(rng, &keys),
            TaskKind::Regression => self.regression_example(rng, &scores, &noise),
        }))
    }

    /// Pair-identity data over the same vocabulary; `kind` must be
    /// classification. Labels range over `0..pair_classes()`.
    pub fn pair_identity(&self) -> Result<Dataset> {
        if self.kind != TaskKind::Classification {
            return Err(Error::config("pair identity data needs a classification spec"));
        }
        self.validate()?;
        let k = 2 * self.pairs;
        let pairs: Vec<(usize, usize)> = (1..=k).flat_map(|a| (a + 1..=k).map(move |b| (a, b))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(self.draw_splits(&mut rng, |rng| {
            let c = rng.random_range(0..pairs.len());
            let (a, b) = pairs[c];
            Example {
                tokens: self.body_with(rng, a, b),
                label: Label::Class(c),
            }
        }))
    }
}

impl Dataset {
    /// `(split, space-separated tokens, label)` rows for TSV dumps.
    pub fn rows(&self) -> impl Iterator<Item = (&'static str, String, String)> + '_ {
        let fmt = |split: &'static str, ex: &Example| {
            let toks = ex.tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            let label = match ex.label {
                Label::Class(c) => c.to_string(),
                Label::Value(v) => format!("{v}"),
            };
            (split, toks, label)
        };
        self.train
            .iter()
            .map(move |e| fmt("train", e))
            .chain(self.dev.iter().map(move |e| fmt("dev", e)))
    }
}

/// Splits labels of a homogeneous slice of examples.
pub fn class_labels(examples: &[Example]) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|e| match e.label {
            Label::Class(c) => Ok(c),
            Label::Value(_) => Err(Error::Contract("expected class labels".into())),
        })
        .collect()
}

pub fn value_labels(examples: &[Example]) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|e| match e.label {
            Label::Value(v) => Ok(v),
            Label::Class(_) => Err(Error::Contract("expected regression targets".into())),
        })
        .collect()
}
