//! Closed-form tuned/stored parameter counts, classifier excluded.
//!
//! | method | tuned | stored |
//! |---|---|---|
//! | full_ft | `(V+2+n)d + (12d²+13d)L` | = tuned |
//! | linear_ft_norm | `2d + 4dL` | = tuned |
//! | bitfit | `d + 11dL` | = tuned |
//! | adapter | `(4dr+2r+6d)L` | = tuned |
//! | pfeiffer_adapter | `(2dr+r+d)L` | = tuned |
//! | lora | `4drL` | = tuned |
//! | prefix | `ld+dm+m+(2md+2d)L` | `2ldL` |
//! | mam | `ld+dm+m+(2dr+r+3d+2md)L` | `(2dr+r+d+2ld)L` |
//! | hiwi_bias | `(18dr+3r+5d)L` | `5dL` |
//! | hiwi_weight | `(18dr+3r+5d)L` | = tuned |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, AdapterSpec};
use crate::error::{Error, Result};
use crate::store::{ParameterStore, Role};
use crate::trainer::{trained_store, update_mask, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullFt,
    LinearFtNorm,
    BitFit,
    Adapter,
    PfeifferAdapter,
    Lora,
    Prefix,
    Mam,
    HiwiBias,
    HiwiWeight,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::FullFt,
        Method::LinearFtNorm,
        Method::BitFit,
        Method::Adapter,
        Method::PfeifferAdapter,
        Method::Lora,
        Method::Prefix,
        Method::Mam,
        Method::HiwiBias,
        Method::HiwiWeight,
    ];

    /// Methods with a training path in this crate.
    pub const TRAINABLE: [Method; 8] = [
        Method::FullFt,
        Method::LinearFtNorm,
        Method::BitFit,
        Method::Adapter,
        Method::PfeifferAdapter,
        Method::Lora,
        Method::HiwiBias,
        Method::HiwiWeight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullFt => "full_ft",
            Method::LinearFtNorm => "linear_ft_norm",
            Method::BitFit => "bitfit",
            Method::Adapter => "adapter",
            Method::PfeifferAdapter => "pfeiffer_adapter",
            Method::Lora => "lora",
            Method::Prefix => "prefix",
            Method::Mam => "mam",
            Method::HiwiBias => "hiwi_bias",
            Method::HiwiWeight => "hiwi_weight",
        }
    }

    fn adapter_kind(self) -> Option<AdapterKind> {
        match self {
            Method::Adapter => Some(AdapterKind::Adapter),
            Method::PfeifferAdapter => Some(AdapterKind::PfeifferAdapter),
            Method::Lora => Some(AdapterKind::Lora),
            Method::HiwiBias => Some(AdapterKind::HiwiBias),
            Method::HiwiWeight => Some(AdapterKind::HiwiWeight),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        if norm == "all" {
            return Err(Error::config("`all` is not a single method"));
        }
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .or(match norm.as_str() {
                "pfeiffer" => Some(Method::PfeifferAdapter),
                "prefix_tuning" => Some(Method::Prefix),
                "mam_adapter" => Some(Method::Mam),
                _ => None,
            })
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// Symbolic model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// `V`
    pub vocab: u64,
    /// `n`
    pub max_len: u64,
    /// `d`
    pub hidden: u64,
    /// `L`
    pub layers: u64,
    /// `r`
    pub r: Option<u64>,
    /// `l`
    pub prefix_len: Option<u64>,
    /// `m`
    pub prefix_bottleneck: Option<u64>,
}

impl ModelDims {
    pub fn new(vocab: u64, max_len: u64, hidden: u64, layers: u64) -> Self {
        Self {
            vocab,
            max_len,
            hidden,
            layers,
            r: None,
            prefix_len: None,
            prefix_bottleneck: None,
        }
    }

    pub fn with_r(mut self, r: u64) -> Self {
        self.r = Some(r);
        self
    }

    pub fn with_prefix(mut self, l: u64, m: u64) -> Self {
        self.prefix_len = Some(l);
        self.prefix_bottleneck = Some(m);
        self
    }

    fn need(v: Option<u64>, symbol: &str, method: Method) -> Result<u64> {
        match v {
            Some(x) if x > 0 => Ok(x),
            Some(_) => Err(Error::config(format!("{method} needs a positive `{symbol}`"))),
            None => Err(Error::config(format!("{method} needs the dimension `{symbol}`"))),
        }
    }

    fn validate(&self) -> Result<()> {
        let fields = [("V", self.vocab), ("n", self.max_len), ("d", self.hidden), ("L", self.layers)];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((s, _)) => Err(Error::config(format!("dimension `{s}` must be positive"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CountReport {
    pub method: Method,
    pub tuned: u64,
    pub stored: u64,
    /// Percent of full fine-tuning's tuned count.
    pub tuned_pct: f64,
    pub stored_pct: f64,
}

fn full_ft(d: &ModelDims) -> u64 {
    let (v, n, h, l) = (d.vocab, d.max_len, d.hidden, d.layers);
    (v + 2 + n) * h + (12 * h * h + 13 * h) * l
}

fn tuned_and_stored(method: Method, dims: &ModelDims) -> Result<(u64, u64)> {
    let (d, big_l) = (dims.hidden, dims.layers);
    let r = || ModelDims::need(dims.r, "r", method);
    let l = || ModelDims::need(dims.prefix_len, "l", method);
    let m = || ModelDims::need(dims.prefix_bottleneck, "m", method);
    let same = |t: u64| (t, t);
    Ok(match method {
        Method::FullFt => same(full_ft(dims)),
        Method::LinearFtNorm => same(2 * d + 4 * d * big_l),
        Method::BitFit => same(d + 11 * d * big_l),
        Method::Adapter => {
            let r = r()?;
            same((4 * d * r + 2 * r + 6 * d) * big_l)
        }
        Method::PfeifferAdapter => {
            let r = r()?;
            same((2 * d * r + r + d) * big_l)
        }
        Method::Lora => same(4 * d * r()? * big_l),
        Method::Prefix => {
            let (l, m) = (l()?, m()?);
            (l * d + d * m + m + (2 * m * d + 2 * d) * big_l, 2 * l * d * big_l)
        }
        Method::Mam => {
            let (r, l, m) = (r()?, l()?, m()?);
            (
                l * d + d * m + m + (2 * d * r + r + 3 * d + 2 * m * d) * big_l,
                (2 * d * r + r + d + 2 * l * d) * big_l,
            )
        }
        Method::HiwiBias => {
            let r = r()?;
            ((18 * d * r + 3 * r + 5 * d) * big_l, 5 * d * big_l)
        }
        Method::HiwiWeight => {
            let r = r()?;
            same((18 * d * r + 3 * r + 5 * d) * big_l)
        }
    })
}

pub fn count(method: Method, dims: &ModelDims) -> Result<CountReport> {
    dims.validate()?;
    let (tuned, stored) = tuned_and_stored(method, dims)?;
    let base = full_ft(dims) as f64;
    Ok(CountReport {
        method,
        tuned,
        stored,
        tuned_pct: 100.0 * tuned as f64 / base,
        stored_pct: 100.0 * stored as f64 / base,
    })
}

/// Training mode a counted method corresponds to; `None` for the
/// formula-only rows (prefix, mam).
pub fn training_mode(method: Method, store: &ParameterStore, r: usize) -> Result<Option<TrainMode>> {
    let meta = store
        .meta()
        .ok_or_else(|| Error::config("store carries no model dimensions"))?;
    Ok(match method {
        Method::FullFt => Some(TrainMode::FullFt),
        Method::LinearFtNorm => Some(TrainMode::LinearFtNorm),
        Method::BitFit => Some(TrainMode::BitFit),
        Method::Prefix | Method::Mam => None,
        other => {
            let kind = other.adapter_kind().expect("adapter methods");
            Some(TrainMode::Adapter(AdapterSpec::new(kind, r, meta)?))
        }
    })
}

/// Parameters the trainer would actually update for `mode` on `store`,
/// classifier excluded.
pub fn enumerate_tuned(store: &ParameterStore, mode: &TrainMode) -> Result<u64> {
    let (phi, _) = trained_store(store, mode, 0)?;
    let mask = update_mask(mode, &phi)?;
    Ok(phi
        .iter()
        .zip(&mask.groups)
        .filter(|(g, _)| g.role() != Role::Classifier)
        .map(|(_, m)| m.indices.len() as u64)
        .sum())
}
