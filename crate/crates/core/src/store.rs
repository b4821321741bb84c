//! Named, role-tagged parameter groups: the in-memory form of a checkpoint.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};
use crate::tensor::Tensor;

/// Semantic role of a parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Embedding,
    PositionEmbedding,
    NormWeight,
    NormBias,
    AttnWeight,
    AttnBias,
    FfnWeight,
    FfnBias,
    Classifier,
    AdapterWeight,
    AdapterBias,
}

impl Role {
    pub const ALL: [Role; 11] = [
        Role::Embedding,
        Role::PositionEmbedding,
        Role::NormWeight,
        Role::NormBias,
        Role::AttnWeight,
        Role::AttnBias,
        Role::FfnWeight,
        Role::FfnBias,
        Role::Classifier,
        Role::AdapterWeight,
        Role::AdapterBias,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Embedding => "embedding",
            Role::PositionEmbedding => "position_embedding",
            Role::NormWeight => "norm_weight",
            Role::NormBias => "norm_bias",
            Role::AttnWeight => "attn_weight",
            Role::AttnBias => "attn_bias",
            Role::FfnWeight => "ffn_weight",
            Role::FfnBias => "ffn_bias",
            Role::Classifier => "classifier",
            Role::AdapterWeight => "adapter_weight",
            Role::AdapterBias => "adapter_bias",
        }
    }

    /// Required tensor rank, or `None` when either rank is accepted.
    pub fn expected_rank(self) -> Option<usize> {
        match self {
            Role::Embedding | Role::PositionEmbedding | Role::AttnWeight | Role::FfnWeight | Role::AdapterWeight => {
                Some(2)
            }
            Role::NormWeight | Role::NormBias | Role::AttnBias | Role::FfnBias | Role::AdapterBias => Some(1),
            Role::Classifier => None,
        }
    }

    pub fn is_norm(self) -> bool {
        matches!(self, Role::NormWeight | Role::NormBias)
    }

    pub fn is_embedding(self) -> bool {
        matches!(self, Role::Embedding | Role::PositionEmbedding)
    }

    /// Bias terms of the linear and normalisation layers (what BitFit tunes).
    pub fn is_bias(self) -> bool {
        matches!(self, Role::AttnBias | Role::FfnBias | Role::NormBias)
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, Role::AdapterWeight | Role::AdapterBias)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::config(format!("unknown role {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    name: String,
    role: Role,
    tensor: Tensor,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, role: Role, tensor: Tensor) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::config("group name must not be empty"));
        }
        match (role.expected_rank(), tensor.rank()) {
            (Some(want), got) if want != got => {
                return Err(Error::config(format!(
                    "group {name:?} with role {role} must be rank {want}, got shape {:?}",
                    tensor.shape()
                )))
            }
            (None, 1 | 2) | (Some(_), _) => {}
            (None, _) => {
                return Err(Error::config(format!(
                    "group {name:?} must be rank 1 or 2, got shape {:?}",
                    tensor.shape()
                )))
            }
        }
        Ok(Self { name, role, tensor })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }
}

/// Dimensions of the encoder a store was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub vocab: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub classes: usize,
}

impl ModelMeta {
    /// Expected shape of a group, judged from its name, or `None` for names
    /// this anatomy does not define.
    fn expected_shape(&self, name: &str) -> Option<Vec<usize>> {
        let d = self.hidden;
        let shape = match name {
            "embeddings.word.weight" => vec![self.vocab, d],
            "embeddings.position.weight" => vec![self.max_len, d],
            "embeddings.norm.weight" | "embeddings.norm.bias" => vec![d],
            "classifier.weight" => vec![d, self.classes],
            "classifier.bias" => vec![self.classes],
            _ => {
                let rest = name.strip_prefix("encoder.layer.")?;
                let (layer, tail) = rest.split_once('.')?;
                if layer.parse::<usize>().ok()? >= self.layers {
                    return Some(Vec::new());
                }
                match tail {
                    "attn.query.weight" | "attn.key.weight" | "attn.value.weight" | "attn.output.weight" => vec![d, d],
                    "attn.query.bias" | "attn.key.bias" | "attn.value.bias" | "attn.output.bias" => vec![d],
                    "attn_norm.weight" | "attn_norm.bias" | "ffn_norm.weight" | "ffn_norm.bias" => vec![d],
                    "ffn1.weight" => vec![d, 4 * d],
                    "ffn1.bias" => vec![4 * d],
                    "ffn2.weight" => vec![4 * d, d],
                    "ffn2.bias" => vec![d],
                    _ => return None,
                }
            }
        };
        Some(shape)
    }
}

/// Ordered collection of uniquely named parameter groups.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    groups: Vec<ParamGroup>,
    index: HashMap<String, usize>,
    meta: Option<ModelMeta>,
}

impl PartialEq for ParameterStore {
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta && self.groups == other.groups
    }
}

impl ParameterStore {
    pub fn new(meta: Option<ModelMeta>) -> Self {
        Self {
            groups: Vec::new(),
            index: HashMap::new(),
            meta,
        }
    }

    pub fn from_groups(meta: Option<ModelMeta>, groups: impl IntoIterator<Item = ParamGroup>) -> Result<Self> {
        let mut store = Self::new(meta);
        for g in groups {
            store.push(g)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, group: ParamGroup) -> Result<()> {
        if self.index.contains_key(group.name()) {
            return Err(LoadError::DuplicateName(group.name().to_owned()).into());
        }
        self.index.insert(group.name().to_owned(), self.groups.len());
        self.groups.push(group);
        Ok(())
    }

    pub fn meta(&self) -> Option<&ModelMeta> {
        self.meta.as_ref()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamGroup> {
        self.groups.iter()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamGroup> {
        self.index.get(name).map(|&i| &self.groups[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(ParamGroup::tensor)
            .ok_or_else(|| Error::config(format!("no parameter group named {name:?}")))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn total_params(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    /// Parameters in groups matching `pred`.
    pub fn count_where(&self, pred: impl Fn(&ParamGroup) -> bool) -> usize {
        self.groups.iter().filter(|g| pred(g)).map(ParamGroup::len).sum()
    }

    /// Replaces a group's values, keeping its name, role and shape.
    pub fn replace_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| Error::config(format!("no parameter group named {name:?}")))?;
        let group = &mut self.groups[idx];
        if group.tensor.shape() != tensor.shape() {
            return Err(Error::shape("replace_tensor", group.tensor.shape(), tensor.shape()));
        }
        group.tensor = tensor;
        Ok(())
    }

    pub(crate) fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.groups[idx].tensor
    }

    /// Groups of `other` appended after this store's groups; names must not collide.
    pub fn merged_with(&self, other: &ParameterStore) -> Result<ParameterStore> {
        let mut out = self.clone();
        for g in other.iter() {
            out.push(g.clone())?;
        }
        Ok(out)
    }

    /// Subset of groups satisfying `pred`, order preserved.
    pub fn filtered(&self, pred: impl Fn(&ParamGroup) -> bool) -> ParameterStore {
        let mut out = ParameterStore::new(self.meta);
        for g in self.groups.iter().filter(|g| pred(g)) {
            out.push(g.clone()).expect("names are unique in the source store");
        }
        out
    }

    /// Checks both stores have identical group names (in order) and shapes.
    pub fn check_aligned(&self, other: &ParameterStore) -> Result<()> {
        let mut bad = Vec::new();
        for g in &self.groups {
            match other.get(g.name()) {
                Some(o) if o.tensor.shape() == g.tensor.shape() => {}
                Some(o) => bad.push(format!("{} ({:?} vs {:?})", g.name, g.tensor.shape(), o.tensor.shape())),
                None => bad.push(format!("{} (missing on right)", g.name)),
            }
        }
        for g in &other.groups {
            if self.get(g.name()).is_none() {
                bad.push(format!("{} (missing on left)", g.name));
            }
        }
        if bad.is_empty() && self.groups.iter().zip(&other.groups).any(|(a, b)| a.name != b.name) {
            bad.push("group order differs".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Alignment { groups: bad })
        }
    }

    /// Validates every known group shape against the model dimensions.
    pub fn validate_meta(&self) -> Result<()> {
        let Some(meta) = self.meta else { return Ok(()) };
        if meta.hidden == 0 || meta.heads == 0 || meta.hidden % meta.heads != 0 {
            return Err(Error::config(format!(
                "hidden size {} is not divisible by {} heads",
                meta.hidden, meta.heads
            )));
        }
        for g in &self.groups {
            if let Some(want) = meta.expected_shape(g.name()) {
                if want.as_slice() != g.tensor.shape() {
                    let reason = if want.is_empty() {
                        format!("layer index beyond {} layers", meta.layers)
                    } else {
                        format!("expected {want:?}")
                    };
                    return Err(LoadError::ShapeMetaMismatch {
                        group: g.name.clone(),
                        shape: g.tensor.shape().to_vec(),
                        reason,
                    }
                    .into());
                }
            }
        }
        Ok(())
    }
}

/// Elementwise `|a − b|` with the same group structure as `a`.
pub fn abs_diff(a: &ParameterStore, b: &ParameterStore) -> Result<ParameterStore> {
    a.check_aligned(b)?;
    let mut out = ParameterStore::new(a.meta);
    for (ga, gb) in a.iter().zip(b.iter()) {
        let t = ga.tensor.zip_map(&gb.tensor, "abs_diff", |x, y| (x - y).abs())?;
        out.push(ParamGroup::new(ga.name.clone(), ga.role, t)?)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParameterStore {
        let g = ParamGroup::new("x", Role::AttnBias, Tensor::vector(vec![v]).unwrap()).unwrap();
        ParameterStore::from_groups(None, [g]).unwrap()
    }

    #[test]
    fn abs_diff_scalar() {
        let d = abs_diff(&scalar_store(3.0), &scalar_store(5.0)).unwrap();
        assert_eq!(d.tensor("x").unwrap().data(), &[2.0]);
    }

    #[test]
    fn abs_diff_of_identical_is_zero() {
        let s = scalar_store(-1.5);
        let d = abs_diff(&s, &s).unwrap();
        assert_eq!(d.tensor("x").unwrap().data(), &[0.0]);
    }

    #[test]
    fn abs_diff_names_offending_groups() {
        let a = scalar_store(1.0);
        let g = ParamGroup::new("y", Role::AttnBias, Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let b = ParameterStore::from_groups(None, [g]).unwrap();
        let err = abs_diff(&a, &b).unwrap_err().to_string();
        assert!(err.contains('x') && err.contains('y'), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let g = ParamGroup::new("x", Role::FfnBias, Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let r = ParameterStore::from_groups(None, [g.clone(), g]);
        assert!(matches!(r, Err(Error::Load(LoadError::DuplicateName(_)))));
    }

    #[test]
    fn role_rank_enforced() {
        assert!(ParamGroup::new("w", Role::FfnWeight, Tensor::vector(vec![1.0]).unwrap()).is_err());
        assert!(ParamGroup::new("b", Role::FfnBias, Tensor::zeros(&[2, 2])).is_err());
        assert!(ParamGroup::new("c", Role::Classifier, Tensor::zeros(&[2, 2])).is_ok());
    }

    #[test]
    fn role_codes_round_trip() {
        for r in Role::ALL {
            assert_eq!(Role::from_code(r.code()), Some(r));
            assert_eq!(r.name().parse::<Role>().unwrap(), r);
        }
        assert_eq!(Role::from_code(11), None);
    }
}
