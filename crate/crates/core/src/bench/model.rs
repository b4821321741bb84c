//! Post-norm transformer encoder with a linear head on the first token.
//!
//! Group inventory (per layer `i`):
//!
//! | group | shape | role |
//! |---|---|---|
//! | `embeddings.word.weight` | `V×d` | embedding |
//! | `embeddings.position.weight` | `n×d` | position_embedding |
//! | `embeddings.norm.{weight,bias}` | `d` | norm |
//! | `encoder.layer.i.attn.{query,key,value,output}.weight` | `d×d` | attn_weight |
//! | `encoder.layer.i.attn.{query,key,value,output}.bias` | `d` | attn_bias |
//! | `encoder.layer.i.attn_norm.{weight,bias}` | `d` | norm |
//! | `encoder.layer.i.ffn1.weight` / `.bias` | `d×4d` / `4d` | ffn |
//! | `encoder.layer.i.ffn2.weight` / `.bias` | `4d×d` / `d` | ffn |
//! | `encoder.layer.i.ffn_norm.{weight,bias}` | `d` | norm |
//! | `classifier.weight` / `.bias` | `d×C` / `C` | classifier |

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Nonlinearity;
use crate::adapters::{adapter_node, hiwi_node, lora_node, AdapterKind, AdapterSpec, AdapterWeights, PairNodes};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::store::{ModelMeta, ParamGroup, ParameterStore, Role};
use crate::tensor::Tensor;

pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Output width of the head; 1 for regression.
    pub classes: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            max_len: 12,
            hidden: 16,
            layers: 2,
            heads: 2,
            ffn_mult: FFN_MULT,
            classes: 2,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.max_len == 0 || self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.classes == 0 {
            return Err(Error::config(format!("all model dimensions must be positive (vocab >= 2): {self:?}")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.ffn_mult != FFN_MULT {
            return Err(Error::config(format!("ffn_mult must be {FFN_MULT}, got {}", self.ffn_mult)));
        }
        Ok(())
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            vocab: self.vocab,
            max_len: self.max_len,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            classes: self.classes,
        }
    }

    pub fn from_meta(meta: &ModelMeta) -> Self {
        Self {
            vocab: meta.vocab,
            max_len: meta.max_len,
            hidden: meta.hidden,
            layers: meta.layers,
            heads: meta.heads,
            ffn_mult: FFN_MULT,
            classes: meta.classes,
        }
    }
}

/// Forward/backward driver for stores produced by [`build_model`].
///
/// With an [`AdapterSpec`] attached, the parameter store passed to the
/// forward functions must also contain the adapter groups (see
/// [`AdapterWeights::to_store`]).
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    adapters: Option<AdapterSpec>,
}

/// Scalar loss plus gradients aligned with the parameter store.
#[derive(Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: ParameterStore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

struct Bound {
    ids: HashMap<String, NodeId>,
}

impl Bound {
    fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter store lacks group {name:?}")))
    }
}

fn layer(i: usize, tail: &str) -> String {
    format!("encoder.layer.{i}.{tail}")
}

/// Initialises a store with the encoder anatomy above.
///
/// Weights are drawn from `U(±1/√fan_in)`, biases from `U(±0.1)` and norm
/// scales from `1 + U(±0.1)`, so every group has a spread of magnitudes
/// to select from. The head starts with a zero bias.
pub fn build_model(config: ToyModelConfig, seed: u64) -> Result<(ParameterStore, ToyModel)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.hidden;
    let mut store = ParameterStore::new(Some(config.meta()));

    let uniform = |rng: &mut ChaCha8Rng, shape: &[usize], bound: f64| -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("finite")
    };
    let norm_scale = |rng: &mut ChaCha8Rng| -> Tensor {
        Tensor::vector((0..d).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect()).expect("finite")
    };
    let mut push = |name: String, role: Role, t: Tensor| store.push(ParamGroup::new(name, role, t)?);

    push("embeddings.word.weight".into(), Role::Embedding, uniform(&mut rng, &[config.vocab, d], 1.0))?;
    push("embeddings.position.weight".into(), Role::PositionEmbedding, uniform(&mut rng, &[config.max_len, d], 1.0))?;
    push("embeddings.norm.weight".into(), Role::NormWeight, norm_scale(&mut rng))?;
    push("embeddings.norm.bias".into(), Role::NormBias, uniform(&mut rng, &[d], 0.1))?;
    let wd = 1.0 / (d as f64).sqrt();
    let w4d = 1.0 / ((FFN_MULT * d) as f64).sqrt();
    for i in 0..config.layers {
        for proj in ["query", "key", "value", "output"] {
            push(layer(i, &format!("attn.{proj}.weight")), Role::AttnWeight, uniform(&mut rng, &[d, d], wd))?;
            push(layer(i, &format!("attn.{proj}.bias")), Role::AttnBias, uniform(&mut rng, &[d], 0.1))?;
        }
        push(layer(i, "attn_norm.weight"), Role::NormWeight, norm_scale(&mut rng))?;
        push(layer(i, "attn_norm.bias"), Role::NormBias, uniform(&mut rng, &[d], 0.1))?;
        push(layer(i, "ffn1.weight"), Role::FfnWeight, uniform(&mut rng, &[d, FFN_MULT * d], wd))?;
        push(layer(i, "ffn1.bias"), Role::FfnBias, uniform(&mut rng, &[FFN_MULT * d], 0.1))?;
        push(layer(i, "ffn2.weight"), Role::FfnWeight, uniform(&mut rng, &[FFN_MULT * d, d], w4d))?;
        push(layer(i, "ffn2.bias"), Role::FfnBias, uniform(&mut rng, &[d], 0.1))?;
        push(layer(i, "ffn_norm.weight"), Role::NormWeight, norm_scale(&mut rng))?;
        push(layer(i, "ffn_norm.bias"), Role::NormBias, uniform(&mut rng, &[d], 0.1))?;
    }
    push("classifier.weight".into(), Role::Classifier, uniform(&mut rng, &[d, config.classes], wd))?;
    push("classifier.bias".into(), Role::Classifier, Tensor::zeros(&[config.classes]))?;
    Ok((store, ToyModel::new(config)?))
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, adapters: None })
    }

    pub fn from_store(store: &ParameterStore) -> Result<Self> {
        let meta = store
            .meta()
            .ok_or_else(|| Error::config("checkpoint carries no model dimensions"))?;
        Self::new(ToyModelConfig::from_meta(meta))
    }

    pub fn with_adapters(mut self, spec: AdapterSpec) -> Self {
        self.adapters = Some(spec);
        self
    }

    pub fn without_adapters(&self) -> Self {
        Self {
            config: self.config,
            adapters: None,
        }
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn adapter_spec(&self) -> Option<&AdapterSpec> {
        self.adapters.as_ref()
    }

    fn check_batch(&self, batch: &[Vec<usize>]) -> Result<usize> {
        let seq = batch
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        if seq == 0 || seq > self.config.max_len {
            return Err(Error::Contract(format!(
                "sequence length {seq} outside 1..={}",
                self.config.max_len
            )));
        }
        for s in batch {
            if s.len() != seq {
                return Err(Error::Contract("all sequences in a batch must have equal length".into()));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= self.config.vocab) {
                return Err(Error::Contract(format!("token {t} outside vocabulary of {}", self.config.vocab)));
            }
        }
        Ok(seq)
    }

    fn bind(&self, g: &mut Graph, params: &ParameterStore, trainable: &dyn Fn(&ParamGroup) -> bool) -> Bound {
        let ids = params
            .iter()
            .map(|grp| {
                let t = grp.tensor().clone();
                let id = if trainable(grp) { g.param(t) } else { g.constant(t) };
                (grp.name().to_owned(), id)
            })
            .collect();
        Bound { ids }
    }

    fn pair_nodes(&self, b: &Bound, target: &str, kind: AdapterKind) -> Result<PairNodes> {
        let tag = kind.tag();
        Ok(PairNodes {
            down: b.get(&format!("{target}.{tag}.down"))?,
            down_bias: b.ids.get(&format!("{target}.{tag}.down_bias")).copied(),
            up: b.get(&format!("{target}.{tag}.up"))?,
            up_bias: b.ids.get(&format!("{target}.{tag}.up_bias")).copied(),
        })
    }

    /// Builds the forward pass and returns the `batch×classes` output node.
    fn forward(&self, g: &mut Graph, b: &mut Bound, batch: &[Vec<usize>]) -> Result<NodeId> {
        let seq = self.check_batch(batch)?;
        let cfg = &self.config;
        let d = cfg.hidden;
        let dh = d / cfg.heads;
        let n_rows = batch.len() * seq;

        // Parameter-level adapters replace their target before use.
        let mut residual_adapters: HashMap<String, PairNodes> = HashMap::new();
        let mut lora: HashMap<String, PairNodes> = HashMap::new();
        let (f, lora_scale) = self.adapters.as_ref().map_or((Nonlinearity::Identity, 1.0), |s| (s.f, s.lora_scale));
        if let Some(spec) = &self.adapters {
            for target in &spec.targets {
                let p = self.pair_nodes(b, target, spec.kind)?;
                match spec.kind {
                    AdapterKind::HiwiBias | AdapterKind::HiwiWeight => {
                        let base = b.get(target)?;
                        let eff = hiwi_node(g, base, &p, spec.f)?;
                        b.ids.insert(target.clone(), eff);
                    }
                    AdapterKind::Lora => {
                        lora.insert(target.clone(), p);
                    }
                    AdapterKind::Adapter | AdapterKind::PfeifferAdapter => {
                        residual_adapters.insert(target.clone(), p);
                    }
                }
            }
        }

        let ids: Vec<usize> = batch.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
        let tok = g.gather_rows(b.get("embeddings.word.weight")?, &ids)?;
        let pos = g.gather_rows(b.get("embeddings.position.weight")?, &positions)?;
        let x = g.add(tok, pos)?;
        let mut x = g.layer_norm(x, b.get("embeddings.norm.weight")?, b.get("embeddings.norm.bias")?)?;

        // Projection with optional LoRA branch and residual adapter.
        let project = |g: &mut Graph, b: &Bound, input: NodeId, name: &str| -> Result<NodeId> {
            let wname = format!("{name}.weight");
            let w = b.get(&wname)?;
            let mut y = match lora.get(&wname) {
                Some(p) => lora_node(g, input, w, p, lora_scale)?,
                None => g.matmul(input, w)?,
            };
            y = g.add_row(y, b.get(&format!("{name}.bias"))?)?;
            if let Some(p) = residual_adapters.get(&wname) {
                y = adapter_node(g, y, p, f)?;
            }
            Ok(y)
        };

        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.layers {
            let q = project(g, b, x, &layer(l, "attn.query"))?;
            let k = project(g, b, x, &layer(l, "attn.key"))?;
            let v = project(g, b, x, &layer(l, "attn.value"))?;
            let mut per_sample = Vec::with_capacity(batch.len());
            for s in 0..batch.len() {
                let mut heads = Vec::with_capacity(cfg.heads);
                for h in 0..cfg.heads {
                    let qs = g.slice(q, s * seq, seq, h * dh, dh)?;
                    let ks = g.slice(k, s * seq, seq, h * dh, dh)?;
                    let vs = g.slice(v, s * seq, seq, h * dh, dh)?;
                    let kt = g.transpose(ks)?;
                    let scores = g.matmul(qs, kt)?;
                    let scores = g.scale(scores, scale);
                    let attn = g.softmax_rows(scores)?;
                    heads.push(g.matmul(attn, vs)?);
                }
                per_sample.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
            }
            let ctx = if per_sample.len() == 1 { per_sample[0] } else { g.concat_rows(&per_sample)? };
            let attn_out = project(g, b, ctx, &layer(l, "attn.output"))?;
            let res = g.add(x, attn_out)?;
            x = g.layer_norm(res, b.get(&layer(l, "attn_norm.weight"))?, b.get(&layer(l, "attn_norm.bias"))?)?;

            let hidden = project(g, b, x, &layer(l, "ffn1"))?;
            let hidden = g.activation(hidden, Nonlinearity::Gelu);
            let ffn_out = project(g, b, hidden, &layer(l, "ffn2"))?;
            let res = g.add(x, ffn_out)?;
            x = g.layer_norm(res, b.get(&layer(l, "ffn_norm.weight"))?, b.get(&layer(l, "ffn_norm.bias"))?)?;
        }
        debug_assert_eq!(g.value(x).shape(), [n_rows, d]);

        let first: Vec<usize> = (0..batch.len()).map(|s| s * seq).collect();
        let cls = g.gather_rows(x, &first)?;
        let logits = g.matmul(cls, b.get("classifier.weight")?)?;
        g.add_row(logits, b.get("classifier.bias")?)
    }

    /// `batch×classes` head outputs.
    pub fn logits(&self, params: &ParameterStore, batch: &[Vec<usize>]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, params, &|_| false);
        let out = self.forward(&mut g, &mut b, batch)?;
        Ok(g.value(out).clone())
    }

    /// Loss for `targets` (cross-entropy or squared error) and its gradient
    /// with respect to every group for which `trainable` holds; other groups
    /// get zero gradients.
    pub fn loss_and_grads(
        &self,
        params: &ParameterStore,
        batch: &[Vec<usize>],
        targets: Targets<'_>,
        trainable: &dyn Fn(&ParamGroup) -> bool,
    ) -> Result<LossAndGrads> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, params, trainable);
        let leaves: Vec<(usize, NodeId)> = params
            .iter()
            .enumerate()
            .map(|(i, grp)| (i, b.ids[grp.name()]))
            .collect();
        let out = self.forward(&mut g, &mut b, batch)?;
        let loss = match targets {
            Targets::Classes(labels) => g.cross_entropy(out, labels)?,
            Targets::Values(values) => {
                if self.config.classes != 1 {
                    return Err(Error::config("regression targets need a single-output head"));
                }
                g.mean_squared_error(out, values)?
            }
        };
        let loss_value = g.value(loss).item().expect("scalar loss");
        let mut grads = g.backward(loss)?;
        let mut gstore = ParameterStore::new(params.meta().copied());
        for (i, id) in leaves {
            let grp = &params.groups()[i];
            let t = grads.take(id).unwrap_or_else(|| Tensor::zeros(grp.tensor().shape()));
            gstore.push(ParamGroup::new(grp.name(), grp.role(), t)?)?;
        }
        Ok(LossAndGrads {
            loss: loss_value,
            grads: gstore,
        })
    }
}

/// Combined store `φ = θ ∪ δ` for a model with attached adapters.
pub fn with_adapter_groups(base: &ParameterStore, adapters: &AdapterWeights) -> Result<ParameterStore> {
    base.merged_with(&adapters.to_store())
}

/// Convenience: run the adapter-form forward from separate base and adapter stores.
pub fn adapter_logits(
    model: &ToyModel,
    base: &ParameterStore,
    adapters: &AdapterWeights,
    batch: &[Vec<usize>],
) -> Result<Tensor> {
    let spec = model
        .adapter_spec()
        .ok_or_else(|| Error::config("model has no adapter spec attached"))?;
    if spec.kind != adapters.kind {
        return Err(Error::config(format!(
            "adapter weights are {} but the model expects {}",
            adapters.kind, spec.kind
        )));
    }
    model.logits(&with_adapter_groups(base, adapters)?, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, max_relative_error};

    fn tiny() -> ToyModelConfig {
        ToyModelConfig {
            vocab: 7,
            max_len: 4,
            hidden: 4,
            layers: 1,
            heads: 2,
            ffn_mult: 4,
            classes: 3,
        }
    }

    #[test]
    fn inventory_counts() {
        let cfg = ToyModelConfig {
            vocab: 50,
            max_len: 16,
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            classes: 3,
        };
        let (store, _) = build_model(cfg, 0).unwrap();
        let (v, n, d, l) = (50, 16, 8, 2);
        let full_ft = (v + 2 + n) * d + (12 * d * d + 13 * d) * l;
        assert_eq!(store.total_params(), full_ft + d * 3 + 3);
        assert_eq!(store.len(), 4 + 16 * l + 2);
        store.validate_meta().unwrap();
    }

    #[test]
    fn seed_determinism_and_validation() {
        let (a, _) = build_model(tiny(), 9).unwrap();
        let (b, _) = build_model(tiny(), 9).unwrap();
        assert_eq!(a, b);
        let bad = ToyModelConfig { heads: 3, ..tiny() };
        assert!(matches!(build_model(bad, 0), Err(Error::Config(_))));
        let bad = ToyModelConfig { ffn_mult: 2, ..tiny() };
        assert!(build_model(bad, 0).is_err());
    }

    #[test]
    fn logits_shape_and_batch_checks() {
        let (store, model) = build_model(tiny(), 1).unwrap();
        let out = model.logits(&store, &[vec![0, 1, 2, 3], vec![0, 6, 5, 4]]).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(model.logits(&store, &[vec![0, 7]]).is_err());
        assert!(model.logits(&store, &[vec![0, 1, 2, 3, 4]]).is_err());
        assert!(model.logits(&store, &[]).is_err());
    }

    #[test]
    fn batch_rows_are_independent() {
        let (store, model) = build_model(tiny(), 2).unwrap();
        let a = vec![0, 3, 1, 2];
        let b = vec![0, 5, 5, 6];
        let both = model.logits(&store, &[a.clone(), b]).unwrap();
        let alone = model.logits(&store, &[a]).unwrap();
        for j in 0..3 {
            assert!((both.data()[j] - alone.data()[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn backprop_matches_finite_differences_small() {
        let (store, model) = build_model(tiny(), 4).unwrap();
        let batch = vec![vec![0, 1, 2, 3], vec![0, 4, 4, 6]];
        let labels = [2, 0];
        let lg = model
            .loss_and_grads(&store, &batch, Targets::Classes(&labels), &|_| true)
            .unwrap();
        for grp in store.iter() {
            let fd = finite_difference(
                |t| {
                    let mut s = store.clone();
                    s.replace_tensor(grp.name(), t.clone())?;
                    let mut g = Graph::new();
                    let mut b = model.bind(&mut g, &s, &|_| false);
                    let out = model.forward(&mut g, &mut b, &batch)?;
                    let loss = g.cross_entropy(out, &labels)?;
                    Ok(g.value(loss).item().unwrap())
                },
                grp.tensor(),
                1e-5,
            )
            .unwrap();
            let analytic = lg.grads.tensor(grp.name()).unwrap();
            let err = max_relative_error(analytic.data(), fd.data(), 1e-6);
            assert!(err < 1e-4, "{}: {err}", grp.name());
        }
    }
}
