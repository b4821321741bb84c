//! Adapter families and their merge rules.
//!
//! * bottleneck adapters (`adapter`, `pfeiffer_adapter`): `h ← h + f(h·W_down + b_down)·W_up + b_up`
//!   inserted after a sublayer's output projection;
//! * LoRA: `h·W + s·(h·W_down)·W_up` in parallel to a projection, mergeable as
//!   `W + s·W_down·W_up`;
//! * HiWi: the adapter is applied to the pre-trained parameter itself,
//!   `b ← b + f(b·W_down + b_down)·W_up + b_up` for a bias row `b`, and the
//!   same rule on the rows of `Wᵀ` for a weight, so after training the
//!   effective parameter is computed once and the adapter is discarded.
//!
//! Linear weights are stored `[in, out]` and used as `h·W`. A HiWi weight
//! adapter reads the input axis: it sees the `d_out × d_in` matrix `Wᵀ`,
//! with `W_down: d_in × r` and `W_up: r × d_in`.
//!
//! Every operation is expressed once on the autodiff [`Graph`]; the plain
//! tensor functions evaluate that same graph code on constants, so merging
//! and the training-time forward share their arithmetic.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Nonlinearity;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::store::{ModelMeta, ParamGroup, ParameterStore, Role};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Two bottleneck adapters per layer (after attention and after the FFN).
    Adapter,
    /// One bottleneck adapter per layer, after the FFN.
    PfeifferAdapter,
    Lora,
    HiwiBias,
    HiwiWeight,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [
        AdapterKind::Adapter,
        AdapterKind::PfeifferAdapter,
        AdapterKind::Lora,
        AdapterKind::HiwiBias,
        AdapterKind::HiwiWeight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Adapter => "adapter",
            AdapterKind::PfeifferAdapter => "pfeiffer_adapter",
            AdapterKind::Lora => "lora",
            AdapterKind::HiwiBias => "hiwi_bias",
            AdapterKind::HiwiWeight => "hiwi_weight",
        }
    }

    /// Infix used in adapter group names (`<target>.<tag>.down`, ...).
    pub fn tag(self) -> &'static str {
        match self {
            AdapterKind::Adapter => "adapter",
            AdapterKind::PfeifferAdapter => "pfeiffer",
            AdapterKind::Lora => "lora",
            AdapterKind::HiwiBias | AdapterKind::HiwiWeight => "hiwi",
        }
    }

    /// Whether the adapter can be folded into the base parameters.
    pub fn is_mergeable(self) -> bool {
        matches!(self, AdapterKind::Lora | AdapterKind::HiwiBias | AdapterKind::HiwiWeight)
    }

    pub fn is_hiwi(self) -> bool {
        matches!(self, AdapterKind::HiwiBias | AdapterKind::HiwiWeight)
    }

    fn has_biases(self) -> bool {
        self != AdapterKind::Lora
    }

    /// The Houlsby-style adapter also tunes the per-layer norms.
    pub fn tunes_layer_norms(self) -> bool {
        self == AdapterKind::Adapter
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "adapter" | "houlsby" => Ok(AdapterKind::Adapter),
            "pfeiffer_adapter" | "pfeiffer" => Ok(AdapterKind::PfeifferAdapter),
            "lora" => Ok(AdapterKind::Lora),
            "hiwi_bias" | "hiwi" => Ok(AdapterKind::HiwiBias),
            "hiwi_weight" => Ok(AdapterKind::HiwiWeight),
            _ => Err(Error::config(format!("unknown adapter kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    /// `W_down ~ U(±1/√fan_in)`, `W_up = 0`, biases zero.
    #[default]
    DownRandomUpZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub r: usize,
    pub f: Nonlinearity,
    pub targets: Vec<String>,
    pub init: AdapterInit,
    pub lora_scale: f64,
}

impl AdapterSpec {
    /// Default attachment points for `kind` on an encoder with `meta` dimensions.
    pub fn new(kind: AdapterKind, r: usize, meta: &ModelMeta) -> Result<Self> {
        if r == 0 {
            return Err(Error::config("adapter bottleneck r must be >= 1"));
        }
        let per_layer: &[&str] = match kind {
            AdapterKind::Adapter => &["attn.output.weight", "ffn2.weight"],
            AdapterKind::PfeifferAdapter => &["ffn2.weight"],
            AdapterKind::Lora => &["attn.query.weight", "attn.value.weight"],
            AdapterKind::HiwiBias => &["ffn1.bias", "ffn2.bias"],
            AdapterKind::HiwiWeight => &["ffn1.weight", "ffn2.weight"],
        };
        let targets = (0..meta.layers)
            .flat_map(|l| per_layer.iter().map(move |t| format!("encoder.layer.{l}.{t}")))
            .collect();
        Ok(Self {
            kind,
            r,
            f: Nonlinearity::default(),
            targets,
            init: AdapterInit::default(),
            lora_scale: 1.0,
        })
    }

    pub fn with_nonlinearity(mut self, f: Nonlinearity) -> Self {
        self.f = f;
        self
    }

    pub fn with_targets(mut self, targets: Vec<String>) -> Self {
        self.targets = targets;
        self
    }

    pub fn with_lora_scale(mut self, scale: f64) -> Self {
        self.lora_scale = scale;
        self
    }
}

/// One down/up projection pair. LoRA pairs carry no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub down: Tensor,
    pub down_bias: Option<Tensor>,
    pub up: Tensor,
    pub up_bias: Option<Tensor>,
}

impl AdapterPair {
    pub fn new(down: Tensor, up: Tensor) -> Result<Self> {
        let pair = Self {
            down,
            down_bias: None,
            up,
            up_bias: None,
        };
        pair.check()?;
        Ok(pair)
    }

    pub fn with_biases(down: Tensor, down_bias: Tensor, up: Tensor, up_bias: Tensor) -> Result<Self> {
        let pair = Self {
            down,
            down_bias: Some(down_bias),
            up,
            up_bias: Some(up_bias),
        };
        pair.check()?;
        Ok(pair)
    }

    fn check(&self) -> Result<()> {
        let (Some(&[_, r]), Some(&[r2, _])) = (Some(self.down.shape()), Some(self.up.shape())) else {
            return Err(Error::shape("adapter pair", self.down.shape(), self.up.shape()));
        };
        if r != r2 {
            return Err(Error::shape("adapter pair", self.down.shape(), self.up.shape()));
        }
        if let Some(b) = &self.down_bias {
            if b.shape() != [r] {
                return Err(Error::shape("adapter down bias", self.down.shape(), b.shape()));
            }
        }
        if let Some(b) = &self.up_bias {
            if b.shape() != [self.up.shape()[1]] {
                return Err(Error::shape("adapter up bias", self.up.shape(), b.shape()));
            }
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len() + self.down_bias.as_ref().map_or(0, Tensor::len) + self.up_bias.as_ref().map_or(0, Tensor::len)
    }

    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> PairNodes {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        PairNodes {
            down: leaf(&self.down),
            down_bias: self.down_bias.as_ref().map(&mut leaf),
            up: leaf(&self.up),
            up_bias: self.up_bias.as_ref().map(&mut leaf),
        }
    }
}

/// Graph handles for an [`AdapterPair`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct PairNodes {
    pub down: NodeId,
    pub down_bias: Option<NodeId>,
    pub up: NodeId,
    pub up_bias: Option<NodeId>,
}

/// `f(x·W_down + b_down)·W_up + b_up` for a matrix input `x`.
pub(crate) fn bottleneck_node(g: &mut Graph, x: NodeId, p: &PairNodes, f: Nonlinearity) -> Result<NodeId> {
    let mut z = g.matmul(x, p.down)?;
    if let Some(b) = p.down_bias {
        z = g.add_row(z, b)?;
    }
    let z = g.activation(z, f);
    let mut out = g.matmul(z, p.up)?;
    if let Some(b) = p.up_bias {
        out = g.add_row(out, b)?;
    }
    Ok(out)
}

/// Residual bottleneck adapter on hidden states.
pub(crate) fn adapter_node(g: &mut Graph, h: NodeId, p: &PairNodes, f: Nonlinearity) -> Result<NodeId> {
    let delta = bottleneck_node(g, h, p, f)?;
    g.add(h, delta)
}

/// `x·W + s·(x·W_down)·W_up`; the caller adds the projection bias.
pub(crate) fn lora_node(g: &mut Graph, x: NodeId, w: NodeId, p: &PairNodes, scale: f64) -> Result<NodeId> {
    let base = g.matmul(x, w)?;
    let low = g.matmul(x, p.down)?;
    let low = g.matmul(low, p.up)?;
    let low = g.scale(low, scale);
    g.add(base, low)
}

/// Effective parameter `θ + f(θ·W_down + b_down)·W_up + b_up`. A rank-1
/// target is a single row; a rank-2 `[in, out]` weight is adapted as its
/// transpose.
pub(crate) fn hiwi_node(g: &mut Graph, target: NodeId, p: &PairNodes, f: Nonlinearity) -> Result<NodeId> {
    let shape = g.value(target).shape().to_vec();
    let rows = match shape.as_slice() {
        [n] => g.reshape(target, &[1, *n])?,
        [_, _] => g.transpose(target)?,
        other => return Err(Error::shape("hiwi", other, &[])),
    };
    let delta = bottleneck_node(g, rows, p, f)?;
    let merged = g.add(rows, delta)?;
    if shape.len() == 1 {
        g.reshape(merged, &shape)
    } else {
        g.transpose(merged)
    }
}

fn eval(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.value(out).clone())
}

fn as_rows(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [n] => t.reshape(&[1, *n]),
        [_, _] => Ok(t.clone()),
        other => Err(Error::shape("adapter input", other, &[])),
    }
}

/// `h + f(h·W_down + b_down)·W_up + b_up`. Accepts a single row vector or a
/// matrix of rows; the output has the input's shape.
pub fn adapter_forward(h: &Tensor, pair: &AdapterPair, f: Nonlinearity) -> Result<Tensor> {
    let x = as_rows(h)?;
    if x.shape()[1] != pair.down.shape()[0] || pair.up.shape()[1] != x.shape()[1] {
        return Err(Error::shape("adapter_forward", h.shape(), pair.down.shape()));
    }
    let out = eval(|g| {
        let x = g.constant(x);
        let p = pair.bind(g, false);
        adapter_node(g, x, &p, f)
    })?;
    out.reshape(h.shape())
}

/// `h·W + s·h·W_down·W_up`.
pub fn lora_forward(h: &Tensor, w: &Tensor, pair: &AdapterPair, scale: f64) -> Result<Tensor> {
    let x = as_rows(h)?;
    check_lora(w, pair)?;
    let out = eval(|g| {
        let x = g.constant(x);
        let w = g.constant(w.clone());
        let p = pair.bind(g, false);
        lora_node(g, x, w, &p, scale)
    })?;
    if h.rank() == 1 {
        out.reshape(&[w.shape()[1]])
    } else {
        Ok(out)
    }
}

fn check_lora(w: &Tensor, pair: &AdapterPair) -> Result<()> {
    if w.rank() != 2 || pair.down.shape()[0] != w.shape()[0] || pair.up.shape()[1] != w.shape()[1] {
        return Err(Error::shape("lora", w.shape(), pair.down.shape()));
    }
    Ok(())
}

/// `W + s·W_down·W_up`; afterwards `h·W'` reproduces [`lora_forward`].
pub fn lora_merge(w: &Tensor, pair: &AdapterPair, scale: f64) -> Result<Tensor> {
    check_lora(w, pair)?;
    let delta = pair.down.matmul(&pair.up)?.scale(scale);
    w.add(&delta)
}

/// `(Wᵀ + f(Wᵀ·W_down + b_down)·W_up + b_up)ᵀ` for a stored `[in, out]` weight.
pub fn hiwi_weight_merge(w: &Tensor, pair: &AdapterPair, f: Nonlinearity) -> Result<Tensor> {
    if w.rank() != 2 || w.shape()[0] != pair.down.shape()[0] || pair.up.shape()[1] != w.shape()[0] {
        return Err(Error::shape("hiwi_weight_merge", w.shape(), pair.down.shape()));
    }
    eval(|g| {
        let t = g.constant(w.clone());
        let p = pair.bind(g, false);
        hiwi_node(g, t, &p, f)
    })
}

/// `b + f(b·W_down + b_down)·W_up + b_up` for a bias vector `b`.
pub fn hiwi_bias_merge(b: &Tensor, pair: &AdapterPair, f: Nonlinearity) -> Result<Tensor> {
    if b.rank() != 1 || b.shape()[0] != pair.down.shape()[0] || pair.up.shape()[1] != b.shape()[0] {
        return Err(Error::shape("hiwi_bias_merge", b.shape(), pair.down.shape()));
    }
    eval(|g| {
        let t = g.constant(b.clone());
        let p = pair.bind(g, false);
        hiwi_node(g, t, &p, f)
    })
}

/// Numerical rank: singular values above `tol · σ_max`.
pub fn rank_of(m: &Tensor, tol: f64) -> usize {
    let (r, c) = m.as_matrix_dims();
    let mat = DMatrix::from_row_slice(r, c, m.data());
    let sv = mat.singular_values();
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * max).count()
}

/// Both sides of `h·W + f(h·W_down)·W_up` vs `h·(W + f(W_down)·W_up)`.
#[derive(Debug, Clone)]
pub struct LoraGap {
    pub lhs: Tensor,
    pub rhs: Tensor,
    pub max_abs_gap: f64,
}

/// Shows why a nonlinearity inside LoRA cannot be merged into `W`: the two
/// sides agree when `f` is linear and generally differ otherwise. Adapter
/// biases, if present, are ignored.
pub fn demonstrate_lora_inequality(w: &Tensor, pair: &AdapterPair, h: &Tensor, f: Nonlinearity) -> Result<LoraGap> {
    check_lora(w, pair)?;
    let x = as_rows(h)?;
    if x.shape()[1] != w.shape()[0] {
        return Err(Error::shape("lora inequality", h.shape(), w.shape()));
    }
    let lhs = {
        let hw = x.matmul(w)?;
        let z = f.apply_tensor(&x.matmul(&pair.down)?);
        hw.add(&z.matmul(&pair.up)?)?
    };
    let rhs = {
        let merged = w.add(&f.apply_tensor(&pair.down).matmul(&pair.up)?)?;
        x.matmul(&merged)?
    };
    let max_abs_gap = lhs.sub(&rhs)?.max_abs();
    Ok(LoraGap { lhs, rhs, max_abs_gap })
}

/// Trained (or freshly initialised) adapter parameters, keyed by target group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub kind: AdapterKind,
    pub pairs: BTreeMap<String, AdapterPair>,
}

fn group_name(target: &str, kind: AdapterKind, part: &str) -> String {
    format!("{target}.{}.{part}", kind.tag())
}

/// Width of the axis an adapter of `kind` reads from `target`.
fn adapter_input_dim(kind: AdapterKind, target: &Tensor) -> usize {
    match kind {
        AdapterKind::Lora | AdapterKind::HiwiWeight => target.shape()[0],
        _ => *target.shape().last().expect("targets are rank 1 or 2"),
    }
}

/// Width of the axis an adapter of `kind` writes back to.
fn adapter_output_dim(kind: AdapterKind, target: &Tensor) -> usize {
    match kind {
        AdapterKind::HiwiWeight => target.shape()[0],
        _ => *target.shape().last().expect("targets are rank 1 or 2"),
    }
}

/// Bottleneck width for one target. HiWi gives adapters that read an axis
/// wider than the hidden size (the `4d` FFN side) twice the nominal `r`.
pub fn bottleneck_for(kind: AdapterKind, r: usize, adapter_dim: usize, hidden: usize) -> usize {
    if kind.is_hiwi() && adapter_dim > hidden {
        2 * r
    } else {
        r
    }
}

impl AdapterWeights {
    /// Fresh adapters for `spec` on top of `base`, initialised so the adapted
    /// model starts out exactly equal to the base model.
    pub fn init(spec: &AdapterSpec, base: &ParameterStore, seed: u64) -> Result<Self> {
        let hidden = base
            .meta()
            .map(|m| m.hidden)
            .ok_or_else(|| Error::config("base store has no model dimensions"))?;
        if spec.targets.is_empty() {
            return Err(Error::config("adapter spec has no targets"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = BTreeMap::new();
        for target in &spec.targets {
            let group = base
                .get(target)
                .ok_or_else(|| Error::config(format!("adapter target {target:?} not in store")))?;
            check_target_role(spec.kind, group)?;
            let t = group.tensor();
            let a_in = adapter_input_dim(spec.kind, t);
            let a_out = adapter_output_dim(spec.kind, t);
            let r = bottleneck_for(spec.kind, spec.r, a_in, hidden);
            let bound = 1.0 / (a_in as f64).sqrt();
            let down = Tensor::matrix(a_in, r, (0..a_in * r).map(|_| rng.random_range(-bound..bound)).collect())?;
            let up = Tensor::zeros(&[r, a_out]);
            let pair = if spec.kind.has_biases() {
                AdapterPair::with_biases(down, Tensor::zeros(&[r]), up, Tensor::zeros(&[a_out]))?
            } else {
                AdapterPair::new(down, up)?
            };
            if pairs.insert(target.clone(), pair).is_some() {
                return Err(Error::config(format!("duplicate adapter target {target:?}")));
            }
        }
        Ok(Self { kind: spec.kind, pairs })
    }

    pub fn param_count(&self) -> usize {
        self.pairs.values().map(AdapterPair::param_count).sum()
    }

    pub fn group_names(&self, target: &str) -> [String; 4] {
        ["down", "down_bias", "up", "up_bias"].map(|p| group_name(target, self.kind, p))
    }

    /// Flattens into a store of `adapter_weight`/`adapter_bias` groups.
    pub fn to_store(&self) -> ParameterStore {
        let mut s = ParameterStore::new(None);
        for (target, p) in &self.pairs {
            let [down, down_b, up, up_b] = self.group_names(target);
            let mut push = |name: String, role, t: &Tensor| {
                s.push(ParamGroup::new(name, role, t.clone()).expect("adapter shapes match roles"))
                    .expect("adapter group names are unique");
            };
            push(down, Role::AdapterWeight, &p.down);
            if let Some(b) = &p.down_bias {
                push(down_b, Role::AdapterBias, b);
            }
            push(up, Role::AdapterWeight, &p.up);
            if let Some(b) = &p.up_bias {
                push(up_b, Role::AdapterBias, b);
            }
        }
        s
    }

    /// Recovers adapters of `kind` from a store; every adapter group must
    /// belong to that kind.
    pub fn from_store(kind: AdapterKind, store: &ParameterStore) -> Result<Self> {
        let suffix = format!(".{}.down", kind.tag());
        let mut pairs = BTreeMap::new();
        for g in store.iter().filter(|g| g.role().is_adapter()) {
            let belongs = ["down", "down_bias", "up", "up_bias"]
                .iter()
                .any(|p| g.name().ends_with(&format!(".{}.{p}", kind.tag())));
            if !belongs {
                return Err(Error::config(format!(
                    "adapter group {:?} does not belong to a {kind} artifact",
                    g.name()
                )));
            }
        }
        for g in store.iter() {
            let Some(target) = g.name().strip_suffix(&suffix) else { continue };
            let part = |p: &str| store.get(&group_name(target, kind, p)).map(|g| g.tensor().clone());
            let up = part("up").ok_or_else(|| Error::config(format!("adapter for {target:?} lacks an up projection")))?;
            let pair = match (part("down_bias"), part("up_bias"), kind.has_biases()) {
                (Some(db), Some(ub), true) => AdapterPair::with_biases(g.tensor().clone(), db, up, ub)?,
                (None, None, false) => AdapterPair::new(g.tensor().clone(), up)?,
                _ => {
                    return Err(Error::config(format!(
                        "adapter for {target:?} has the wrong bias layout for {kind}"
                    )))
                }
            };
            pairs.insert(target.to_owned(), pair);
        }
        if pairs.is_empty() {
            return Err(Error::config(format!("no {kind} adapters found in store")));
        }
        Ok(Self { kind, pairs })
    }

    /// Reads adapter pairs back out of a combined parameter store
    /// (base groups plus adapter groups).
    pub fn extract(&self, combined: &ParameterStore) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (target, old) in &self.pairs {
            let [down, down_b, up, up_b] = self.group_names(target);
            let get = |n: &str| combined.tensor(n).cloned();
            let pair = if old.down_bias.is_some() {
                AdapterPair::with_biases(get(&down)?, get(&down_b)?, get(&up)?, get(&up_b)?)?
            } else {
                AdapterPair::new(get(&down)?, get(&up)?)?
            };
            pairs.insert(target.clone(), pair);
        }
        Ok(Self { kind: self.kind, pairs })
    }

    /// Folds the adapters into a copy of `base`. Only LoRA and HiWi kinds can
    /// be merged; the result has exactly the base store's group inventory.
    pub fn merge_into(&self, base: &ParameterStore, spec: &AdapterSpec) -> Result<ParameterStore> {
        if !self.kind.is_mergeable() {
            return Err(Error::config(format!("{} adapters cannot be merged into the base weights", self.kind)));
        }
        let mut out = base.clone();
        for (target, pair) in &self.pairs {
            let t = base.tensor(target)?;
            let merged = match self.kind {
                AdapterKind::Lora => lora_merge(t, pair, spec.lora_scale)?,
                AdapterKind::HiwiWeight => hiwi_weight_merge(t, pair, spec.f)?,
                AdapterKind::HiwiBias => hiwi_bias_merge(t, pair, spec.f)?,
                _ => unreachable!("checked mergeable above"),
            };
            out.replace_tensor(target, merged)?;
        }
        Ok(out)
    }
}

fn check_target_role(kind: AdapterKind, group: &ParamGroup) -> Result<()> {
    let ok = match kind {
        AdapterKind::HiwiBias => group.tensor().rank() == 1 && group.role().is_bias() && !group.role().is_norm(),
        AdapterKind::HiwiWeight | AdapterKind::Lora | AdapterKind::Adapter | AdapterKind::PfeifferAdapter => {
            matches!(group.role(), Role::AttnWeight | Role::FfnWeight)
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{kind} cannot attach to {:?} (role {})",
            group.name(),
            group.role()
        )))
    }
}

/// Persisted form of a HiWi-bias run: only the merged bias vectors.
pub fn merged_bias_artifact(merged: &ParameterStore, weights: &AdapterWeights) -> Result<ParameterStore> {
    if weights.kind != AdapterKind::HiwiBias {
        return Err(Error::config("merged bias artifacts only exist for hiwi_bias"));
    }
    let mut out = ParameterStore::new(None);
    for target in weights.pairs.keys() {
        let g = merged
            .get(target)
            .ok_or_else(|| Error::config(format!("merged store lacks {target:?}")))?;
        out.push(g.clone())?;
    }
    Ok(out)
}
