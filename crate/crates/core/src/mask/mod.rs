//! Sparse masks over a [`ParameterStore`].
//!
//! A mask holds one sorted index list per store group (empty lists for
//! groups that are not selected at all). Selection rules:
//!
//! * `smallest` / `largest`: bottom-k / top-k by score, equal scores ordered
//!   by ascending flat index;
//! * `middle`: ranks `⌊(n−k)/2⌋ .. ⌊(n−k)/2⌋+k−1` of the ascending order;
//! * `random`: `k` positions drawn without replacement from a seeded ChaCha8
//!   stream;
//! * `diff`: top-k of `|θ⁽¹⁾ − θ⁽⁰⁾|`;
//! * `fisher`: bottom-k of the Fisher score.
//!
//! Group-wise scope gives each eligible group `round(fraction · size)`
//! positions and hands the rounding residual to the largest group.

mod fisher;
mod format;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::content_hash;
use crate::error::{Error, Result};
use crate::store::{abs_diff, ParamGroup, ParameterStore, Role};

pub use fisher::{fisher_from_gradients, fisher_scores};
pub use format::{decode_mask, deserialize_mask, encode_mask, serialize_mask, MASK_MAGIC, MASK_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    GroupWise,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    #[default]
    Smallest,
    Largest,
    Middle,
    Random,
    Diff,
    Fisher,
    /// Not a selection rule: masks built from a training mode's group set.
    Mode,
}

/// Which groups a selection may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskPolicy {
    /// Select every norm parameter in addition to the k chosen ones.
    pub tune_norm: bool,
    /// Let embedding groups compete for selection.
    pub tune_embed: bool,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            tune_norm: true,
            tune_embed: false,
        }
    }
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, { $($variant:path => $name:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().replace('-', "_").as_str() {
                    $($name $(| $alias)* => Ok($variant),)+
                    _ => Err(Error::config(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
    };
}

named_enum!(Scope, "scope", {
    Scope::GroupWise => "group_wise" | "groupwise" | "group",
    Scope::Global => "global",
});

named_enum!(Selector, "selector", {
    Selector::Smallest => "smallest",
    Selector::Largest => "largest",
    Selector::Middle => "middle",
    Selector::Random => "random",
    Selector::Diff => "diff",
    Selector::Fisher => "fisher",
    Selector::Mode => "mode",
});

impl Scope {
    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        [Scope::GroupWise, Scope::Global].get(code as usize).copied()
    }
}

impl Selector {
    const ALL: [Selector; 7] = [
        Selector::Smallest,
        Selector::Largest,
        Selector::Middle,
        Selector::Random,
        Selector::Diff,
        Selector::Fisher,
        Selector::Mode,
    ];

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMask {
    pub name: String,
    /// Parameter count of the group the indices refer to.
    pub size: u64,
    /// Strictly increasing flat indices.
    pub indices: Vec<u64>,
}

impl GroupMask {
    pub fn new(name: impl Into<String>, size: u64, indices: Vec<u64>) -> Result<Self> {
        let g = Self {
            name: name.into(),
            size,
            indices,
        };
        g.check()?;
        Ok(g)
    }

    fn check(&self) -> Result<()> {
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(format!("mask indices for {:?} are not strictly increasing", self.name)));
        }
        if self.indices.last().is_some_and(|&i| i >= self.size) {
            return Err(Error::Contract(format!(
                "mask index out of range for {:?} (size {})",
                self.name, self.size
            )));
        }
        Ok(())
    }

    pub fn full(name: impl Into<String>, size: u64) -> Self {
        Self {
            name: name.into(),
            size,
            indices: (0..size).collect(),
        }
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() as u64 == self.size
    }

    /// Dense `{0,1}` view.
    pub fn dense(&self) -> Vec<bool> {
        let mut out = vec![false; self.size as usize];
        for &i in &self.indices {
            out[i as usize] = true;
        }
        out
    }
}

/// Binary mask `m` over a store, stored as per-group index lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMask {
    pub groups: Vec<GroupMask>,
    pub sparsity: f64,
    pub scope: Scope,
    pub selector: Selector,
    pub policy: MaskPolicy,
    pub seed: u64,
    /// SHA-256 of the checkpoint the mask was computed from.
    pub provenance: [u8; 32],
}

impl SparseMask {
    pub fn selected(&self) -> usize {
        self.groups.iter().map(|g| g.indices.len()).sum()
    }

    pub fn total(&self) -> u64 {
        self.groups.iter().map(|g| g.size).sum()
    }

    pub fn get(&self, name: &str) -> Option<&GroupMask> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Same group names, order and sizes as `store`.
    pub fn check_aligned(&self, store: &ParameterStore) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        for (i, g) in store.iter().enumerate() {
            match self.groups.get(i) {
                Some(m) if m.name == g.name() && m.size == g.len() as u64 => {}
                _ => bad.push(g.name().to_owned()),
            }
        }
        bad.extend(self.groups.iter().skip(store.len()).map(|m| m.name.clone()));
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Alignment { groups: bad })
        }
    }

    /// Mask over `store` selecting whole groups where `pred` holds.
    pub fn from_groups(store: &ParameterStore, pred: impl Fn(&ParamGroup) -> bool) -> Self {
        let groups = store
            .iter()
            .map(|g| {
                if pred(g) {
                    GroupMask::full(g.name(), g.len() as u64)
                } else {
                    GroupMask {
                        name: g.name().to_owned(),
                        size: g.len() as u64,
                        indices: Vec::new(),
                    }
                }
            })
            .collect();
        let mut m = Self {
            groups,
            sparsity: 0.0,
            scope: Scope::GroupWise,
            selector: Selector::Mode,
            policy: MaskPolicy {
                tune_norm: false,
                tune_embed: false,
            },
            seed: 0,
            provenance: content_hash(store),
        };
        m.sparsity = m.selected() as f64 / (m.total().max(1)) as f64;
        m
    }

    /// Re-targets this mask onto a larger store (e.g. base plus adapter
    /// groups): groups named in the mask keep their indices, other groups
    /// get whole-group selection where `extra` holds.
    pub fn extend_to(&self, store: &ParameterStore, extra: impl Fn(&ParamGroup) -> bool) -> Result<Self> {
        let mut groups = Vec::with_capacity(store.len());
        for g in store.iter() {
            let gm = match self.get(g.name()) {
                Some(m) if m.size == g.len() as u64 => {
                    let mut m = m.clone();
                    if extra(g) {
                        m = GroupMask::full(g.name(), g.len() as u64);
                    }
                    m
                }
                Some(_) => return Err(Error::Alignment { groups: vec![g.name().to_owned()] }),
                None if extra(g) => GroupMask::full(g.name(), g.len() as u64),
                None => GroupMask {
                    name: g.name().to_owned(),
                    size: g.len() as u64,
                    indices: Vec::new(),
                },
            };
            groups.push(gm);
        }
        let missing: Vec<String> = self
            .groups
            .iter()
            .filter(|m| store.get(&m.name).is_none())
            .map(|m| m.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Alignment { groups: missing });
        }
        Ok(Self { groups, ..self.clone() })
    }
}

fn fraction_check(sparsity: f64) -> Result<()> {
    if sparsity > 0.0 && sparsity <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("sparsity must lie in (0, 1], got {sparsity}")))
    }
}

fn forced(policy: MaskPolicy, g: &ParamGroup) -> bool {
    policy.tune_norm && g.role().is_norm()
}

fn eligible(policy: MaskPolicy, g: &ParamGroup) -> bool {
    if g.role() == Role::Classifier || forced(policy, g) {
        return false;
    }
    !g.role().is_embedding() || policy.tune_embed
}

/// Per-group counts: `round(fraction · size)` each, with the residual
/// against `k` assigned to the largest group (first one on ties).
fn allocate(k: usize, fraction: f64, sizes: &[usize]) -> Vec<usize> {
    let mut counts: Vec<usize> = sizes
        .iter()
        .map(|&n| ((fraction * n as f64).round() as usize).min(n))
        .collect();
    let Some(largest) = sizes
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, usize)>, (i, &n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((i, n)),
        })
        .map(|(i, _)| i)
    else {
        return counts;
    };
    let assigned: usize = counts.iter().sum();
    let c = counts[largest] as i64 + k as i64 - assigned as i64;
    counts[largest] = c.clamp(0, sizes[largest] as i64) as usize;
    counts
}

/// Ranking used by the deterministic selectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rank {
    Smallest,
    Largest,
    Middle,
}

/// Positions ordered by `(score, index)` ascending, or by
/// `(−score, index)` for [`Rank::Largest`].
fn order(scores: &[f64], rank: Rank) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    match rank {
        Rank::Largest => idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
        _ => idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
    }
    idx
}

fn pick(scores: &[f64], k: usize, rank: Rank) -> Vec<usize> {
    let n = scores.len();
    let k = k.min(n);
    let ord = order(scores, rank);
    let start = if rank == Rank::Middle { (n - k) / 2 } else { 0 };
    let mut chosen = ord[start..start + k].to_vec();
    chosen.sort_unstable();
    chosen
}

fn pick_random(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut chosen = sample(rng, n, k.min(n)).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Indices selected from one flat group of scores.
pub fn select_indices(scores: &[f64], k: usize, selector: Selector, seed: u64) -> Result<Vec<u64>> {
    let chosen = match selector {
        Selector::Smallest | Selector::Fisher => pick(scores, k, Rank::Smallest),
        Selector::Largest | Selector::Diff => pick(scores, k, Rank::Largest),
        Selector::Middle => pick(scores, k, Rank::Middle),
        Selector::Random => pick_random(scores.len(), k, &mut ChaCha8Rng::seed_from_u64(seed)),
        Selector::Mode => return Err(Error::config("`mode` is not a selection rule")),
    };
    Ok(chosen.into_iter().map(|i| i as u64).collect())
}

/// Per-group random streams: seeded from `seed` and the group position.
fn group_seed(seed: u64, position: usize) -> u64 {
    seed ^ (position as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Core selection over a score store aligned with the parameter store.
#[allow(clippy::too_many_arguments)]
fn select(
    store: &ParameterStore,
    scores: &ParameterStore,
    k: usize,
    fraction: f64,
    scope: Scope,
    selector: Selector,
    policy: MaskPolicy,
    seed: u64,
    provenance: [u8; 32],
) -> Result<SparseMask> {
    store.check_aligned(scores)?;
    let eligible_pos: Vec<usize> = store
        .iter()
        .enumerate()
        .filter(|(_, g)| eligible(policy, g))
        .map(|(i, _)| i)
        .collect();
    let n_eligible: usize = eligible_pos.iter().map(|&i| store.groups()[i].len()).sum();
    if n_eligible == 0 {
        return Err(Error::config("store has no parameters eligible for selection"));
    }
    let mut per_group: Vec<Vec<u64>> = vec![Vec::new(); store.len()];
    match scope {
        Scope::GroupWise => {
            let sizes: Vec<usize> = eligible_pos.iter().map(|&i| store.groups()[i].len()).collect();
            let counts = allocate(k, fraction, &sizes);
            for (&pos, &kg) in eligible_pos.iter().zip(&counts) {
                let s = scores.groups()[pos].tensor().data();
                per_group[pos] = select_indices(s, kg, selector, group_seed(seed, pos))?;
            }
        }
        Scope::Global => {
            let mut flat = Vec::with_capacity(n_eligible);
            let mut owner = Vec::with_capacity(n_eligible);
            for &pos in &eligible_pos {
                let s = scores.groups()[pos].tensor().data();
                flat.extend_from_slice(s);
                owner.extend((0..s.len()).map(|j| (pos, j as u64)));
            }
            for i in select_indices(&flat, k, selector, seed)? {
                let (pos, j) = owner[i as usize];
                per_group[pos].push(j);
            }
        }
    }
    let groups = store
        .iter()
        .zip(per_group)
        .map(|(g, idx)| {
            let indices = if forced(policy, g) { (0..g.len() as u64).collect() } else { idx };
            GroupMask {
                name: g.name().to_owned(),
                size: g.len() as u64,
                indices,
            }
        })
        .collect();
    Ok(SparseMask {
        groups,
        sparsity: fraction,
        scope,
        selector,
        policy,
        seed,
        provenance,
    })
}

fn magnitudes(store: &ParameterStore) -> ParameterStore {
    let mut out = store.clone();
    for i in 0..out.len() {
        for v in out.tensor_mut(i).data_mut() {
            *v = v.abs();
        }
    }
    out
}

/// Parameters a mask under `policy` may select from.
pub fn eligible_count(store: &ParameterStore, policy: MaskPolicy) -> usize {
    store.count_where(|g| eligible(policy, g))
}

/// Bottom-k by `|θ|` with `k = round(sparsity · eligible)`; the default
/// PaFi mask is `pafi_mask(store, s, Scope::GroupWise, MaskPolicy::default())`.
pub fn pafi_mask(store: &ParameterStore, sparsity: f64, scope: Scope, policy: MaskPolicy) -> Result<SparseMask> {
    fraction_check(sparsity)?;
    let k = (sparsity * eligible_count(store, policy) as f64).round() as usize;
    select(
        store,
        &magnitudes(store),
        k,
        sparsity,
        scope,
        Selector::Smallest,
        policy,
        0,
        content_hash(store),
    )
}

fn fraction_of(k: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::config("store has no parameters eligible for selection"));
    }
    if k == 0 || k > n {
        return Err(Error::config(format!("k must lie in 1..={n}, got {k}")));
    }
    Ok(k as f64 / n as f64)
}

/// Magnitude selectors used for ablations (`largest`, `middle`, `random`,
/// and `smallest` for reference).
pub fn ablation_mask(
    store: &ParameterStore,
    k: usize,
    selector: Selector,
    scope: Scope,
    policy: MaskPolicy,
    seed: u64,
) -> Result<SparseMask> {
    if !matches!(selector, Selector::Smallest | Selector::Largest | Selector::Middle | Selector::Random) {
        return Err(Error::config(format!("{selector} is not a magnitude selector")));
    }
    let fraction = fraction_of(k, eligible_count(store, policy))?;
    select(store, &magnitudes(store), k, fraction, scope, selector, policy, seed, content_hash(store))
}

/// Global top-k of `|θ⁽¹⁾ − θ⁽⁰⁾|` over every non-classifier group.
pub fn diff_mask(theta0: &ParameterStore, theta1: &ParameterStore, k: usize) -> Result<SparseMask> {
    let diffs = abs_diff(theta1, theta0)?;
    let policy = MaskPolicy {
        tune_norm: false,
        tune_embed: true,
    };
    let fraction = fraction_of(k, eligible_count(theta0, policy))?;
    select(theta0, &diffs, k, fraction, Scope::Global, Selector::Diff, policy, 0, content_hash(theta0))
}

/// Bottom-k by Fisher score, honouring `policy`.
pub fn fisher_mask(
    store: &ParameterStore,
    scores: &ParameterStore,
    k: usize,
    scope: Scope,
    policy: MaskPolicy,
) -> Result<SparseMask> {
    let fraction = fraction_of(k, eligible_count(store, policy))?;
    select(store, scores, k, fraction, scope, Selector::Fisher, policy, 0, content_hash(store))
}
