//! Pretraining stand-in for a pre-trained language model.
//!
//! The encoder is trained with every parameter free on pair-identity data,
//! which teaches it which key tokens co-occur without ever seeing a
//! downstream label. Its head is then swapped for a fresh one of the
//! downstream width, so adaptation methods start from general features
//! and an untrained classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{build_model, ToyModel, ToyModelConfig};
use super::task::{SyntheticTask, TaskKind};
use crate::error::{Error, Result};
use crate::store::{ParamGroup, ParameterStore, Role};
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig, TrainMode};

/// Seed offset for the replacement head so it never repeats pretraining draws.
const HEAD_SEED: u64 = 0x5EED_1EAD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pretraining {
    /// Pair-identity data is drawn from this spec; `kind` must be classification.
    pub task: SyntheticTask,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for Pretraining {
    fn default() -> Self {
        Self {
            task: SyntheticTask {
                seed: 5,
                train_size: 2048,
                ..SyntheticTask::default()
            },
            epochs: 20,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub store: ParameterStore,
    pub model: ToyModel,
    /// Dev accuracy on the pair-identity task before the head swap.
    pub pretrain_accuracy: f64,
}

/// Pretrains a `config`-shaped encoder and returns it with a fresh
/// `config.classes`-wide head.
pub fn pretrain(config: ToyModelConfig, seed: u64, spec: &Pretraining) -> Result<Pretrained> {
    config.validate()?;
    if spec.task.kind != TaskKind::Classification {
        return Err(Error::config("pretraining needs a classification task spec"));
    }
    let data = spec.task.pair_identity()?;
    let wide = ToyModelConfig {
        classes: spec.task.pair_classes(),
        ..config
    };
    let (init, wide_model) = build_model(wide, seed)?;
    let mut tc = TrainConfig::new(TrainMode::FullFt);
    tc.epochs = spec.epochs;
    tc.learning_rate = spec.learning_rate;
    tc.seed = seed;
    let out = train(&wide_model, &init, &data, &tc)?;
    log::info!("pretraining dev accuracy {:.4}", out.report.final_metric.value);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_SEED);
    let d = config.hidden;
    let bound = 1.0 / (d as f64).sqrt();
    let head = Tensor::new(
        vec![d, config.classes],
        (0..d * config.classes).map(|_| rng.random_range(-bound..bound)).collect(),
    )?;
    let mut store = ParameterStore::new(Some(config.meta()));
    for g in out.params.iter().filter(|g| g.role() != Role::Classifier) {
        store.push(g.clone())?;
    }
    store.push(ParamGroup::new("classifier.weight", Role::Classifier, head)?)?;
    store.push(ParamGroup::new("classifier.bias", Role::Classifier, Tensor::zeros(&[config.classes]))?)?;
    Ok(Pretrained {
        store,
        model: ToyModel::new(config)?,
        pretrain_accuracy: out.report.final_metric.value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> Pretraining {
        Pretraining {
            task: SyntheticTask {
                train_size: 64,
                dev_size: 32,
                ..SyntheticTask::default()
            },
            epochs: 1,
            ..Pretraining::default()
        }
    }

    #[test]
    fn head_is_swapped_and_inventory_kept() {
        let cfg = ToyModelConfig::default();
        let p = pretrain(cfg, 3, &quick()).unwrap();
        let (fresh, _) = build_model(cfg, 3).unwrap();
        let names = |s: &ParameterStore| s.iter().map(|g| (g.name().to_owned(), g.tensor().shape().to_vec())).collect::<Vec<_>>();
        assert_eq!(names(&p.store), names(&fresh));
        assert_eq!(p.store.meta(), fresh.meta());
        assert!(p.store.tensor("classifier.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert_ne!(p.store.tensor("encoder.layer.0.ffn1.weight").unwrap(), fresh.tensor("encoder.layer.0.ffn1.weight").unwrap());
    }

    #[test]
    fn deterministic() {
        let cfg = ToyModelConfig::default();
        assert_eq!(pretrain(cfg, 3, &quick()).unwrap().store, pretrain(cfg, 3, &quick()).unwrap().store);
    }
}
