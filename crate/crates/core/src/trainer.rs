//! Masked training: only coordinates selected by the update mask move.
//!
//! Every mode reduces to a mask over the trained store `φ` (the base
//! parameters, plus adapter groups in adapter mode). The classifier head is
//! always trainable.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSpec, AdapterWeights};
use crate::bench::metrics::{evaluate, Metric};
use crate::bench::model::{with_adapter_groups, Targets, ToyModel};
use crate::bench::task::{class_labels, value_labels, Dataset, Example, TaskKind};
use crate::error::{Error, Result};
use crate::mask::{GroupMask, SparseMask};
use crate::store::{ParamGroup, ParameterStore, Role};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Decays linearly to zero over the whole run.
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainMode {
    FullFt,
    LinearFt,
    LinearFtNorm,
    BitFit,
    Pafi(SparseMask),
    Adapter(AdapterSpec),
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::FullFt => "full_ft",
            TrainMode::LinearFt => "linear_ft",
            TrainMode::LinearFtNorm => "linear_ft_norm",
            TrainMode::BitFit => "bitfit",
            TrainMode::Pafi(_) => "pafi",
            TrainMode::Adapter(_) => "adapter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// `0` is a dry run that returns the initial parameters.
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    /// Global gradient-norm clip over the masked coordinates.
    pub grad_clip: Option<f64>,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            optimizer: Optimizer::adam(),
            schedule: Schedule::Constant,
            grad_clip: None,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config(format!("gradient clip must be > 0, got {c}")));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::config("adam needs 0 <= beta < 1 and eps > 0"));
            }
        }
        Ok(())
    }
}

/// Adam moments for the masked coordinates only, in mask order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    step: u64,
    moments: Vec<Vec<(f64, f64)>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Number of stored `(m, v)` pairs.
    pub fn allocated(&self) -> usize {
        self.moments.iter().map(Vec::len).sum()
    }
}

/// One optimizer update of the coordinates in `mask`; everything else is
/// copied through untouched.
pub fn masked_step(
    params: &ParameterStore,
    grads: &ParameterStore,
    mask: &SparseMask,
    lr: f64,
    optimizer: Optimizer,
    state: &mut OptimizerState,
) -> Result<ParameterStore> {
    params.check_aligned(grads)?;
    mask.check_aligned(params)?;
    for (g, m) in grads.iter().zip(&mask.groups) {
        let data = g.tensor().data();
        if let Some(&i) = m.indices.iter().find(|&&i| !data[i as usize].is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at {}[{i}]", g.name())));
        }
    }
    let mut out = params.clone();
    match optimizer {
        Optimizer::Sgd => {
            for (gi, m) in mask.groups.iter().enumerate() {
                let g = grads.groups()[gi].tensor().data();
                let p = out.tensor_mut(gi).data_mut();
                for &i in &m.indices {
                    let i = i as usize;
                    p[i] -= lr * g[i];
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            if state.moments.is_empty() {
                state.moments = mask.groups.iter().map(|m| vec![(0.0, 0.0); m.indices.len()]).collect();
            }
            let fits = state.moments.len() == mask.groups.len()
                && state.moments.iter().zip(&mask.groups).all(|(s, m)| s.len() == m.indices.len());
            if !fits {
                return Err(Error::Contract("optimizer state was built for a different mask".into()));
            }
            state.step += 1;
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (gi, m) in mask.groups.iter().enumerate() {
                let g = grads.groups()[gi].tensor().data();
                let moments = &mut state.moments[gi];
                let p = out.tensor_mut(gi).data_mut();
                for (slot, &i) in moments.iter_mut().zip(&m.indices) {
                    let i = i as usize;
                    let gv = g[i];
                    slot.0 = beta1 * slot.0 + (1.0 - beta1) * gv;
                    slot.1 = beta2 * slot.1 + (1.0 - beta2) * gv * gv;
                    let mhat = slot.0 / c1;
                    let vhat = slot.1 / c2;
                    p[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(out)
}

/// Number of coordinates outside `mask` whose bytes differ between the stores.
pub fn verify_frozen(theta0: &ParameterStore, theta2: &ParameterStore, mask: &SparseMask) -> Result<usize> {
    theta0.check_aligned(theta2)?;
    mask.check_aligned(theta0)?;
    let mut violations = 0;
    for ((a, b), m) in theta0.iter().zip(theta2.iter()).zip(&mask.groups) {
        let selected = m.dense();
        violations += a
            .tensor()
            .data()
            .iter()
            .zip(b.tensor().data())
            .zip(selected)
            .filter(|((x, y), sel)| !sel && x.to_bits() != y.to_bits())
            .count();
    }
    Ok(violations)
}

/// The trained store `φ` for `mode`: the base store, plus freshly
/// initialised adapter groups in adapter mode.
pub fn trained_store(base: &ParameterStore, mode: &TrainMode, seed: u64) -> Result<(ParameterStore, Option<AdapterWeights>)> {
    match mode {
        TrainMode::Adapter(spec) => {
            let w = AdapterWeights::init(spec, base, seed)?;
            Ok((with_adapter_groups(base, &w)?, Some(w)))
        }
        _ => Ok((base.clone(), None)),
    }
}

fn is_classifier(g: &ParamGroup) -> bool {
    g.role() == Role::Classifier
}

/// Update mask over `phi` for `mode`, classifier included.
pub fn update_mask(mode: &TrainMode, phi: &ParameterStore) -> Result<SparseMask> {
    Ok(match mode {
        TrainMode::FullFt => SparseMask::from_groups(phi, |_| true),
        TrainMode::LinearFt => SparseMask::from_groups(phi, is_classifier),
        TrainMode::LinearFtNorm => SparseMask::from_groups(phi, |g| is_classifier(g) || g.role().is_norm()),
        TrainMode::BitFit => SparseMask::from_groups(phi, |g| is_classifier(g) || g.role().is_bias()),
        TrainMode::Pafi(mask) => {
            mask.check_aligned(phi)?;
            mask.extend_to(phi, is_classifier)?
        }
        TrainMode::Adapter(spec) => {
            let norms = spec.kind.tunes_layer_norms();
            SparseMask::from_groups(phi, |g| {
                is_classifier(g) || g.role().is_adapter() || (norms && g.role().is_norm() && g.name().starts_with("encoder."))
            })
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub mode: &'static str,
    pub epochs: Vec<EpochRecord>,
    pub final_metric: Metric,
    /// Trainable coordinates, classifier included.
    pub updated_params: usize,
    pub frozen_violations: usize,
    /// Not part of the serialized report, which must be reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// One JSON object per epoch followed by a summary line.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            record: &'static str,
            mode: &'a str,
            final_metric: &'a Metric,
            updated_params: usize,
            frozen_violations: usize,
        }
        #[derive(Serialize)]
        struct Epoch<'a> {
            record: &'static str,
            #[serde(flatten)]
            inner: &'a EpochRecord,
        }
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&Epoch { record: "epoch", inner: e }).expect("serializes"));
            out.push('\n');
        }
        let s = Summary {
            record: "summary",
            mode: self.mode,
            final_metric: &self.final_metric,
            updated_params: self.updated_params,
            frozen_violations: self.frozen_violations,
        };
        out.push_str(&serde_json::to_string(&s).expect("serializes"));
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Final `φ`.
    pub params: ParameterStore,
    /// Trained adapters (adapter mode only).
    pub adapters: Option<AdapterWeights>,
    pub mask: SparseMask,
}

fn batch_loss(model: &ToyModel, phi: &ParameterStore, kind: TaskKind, batch: &[&Example], trainable: &dyn Fn(&ParamGroup) -> bool) -> Result<(f64, ParameterStore)> {
    let seqs: Vec<Vec<usize>> = batch.iter().map(|e| e.tokens.clone()).collect();
    let owned: Vec<Example> = batch.iter().map(|&e| e.clone()).collect();
    let lg = match kind {
        TaskKind::Classification => {
            let labels = class_labels(&owned)?;
            model.loss_and_grads(phi, &seqs, Targets::Classes(&labels), trainable)?
        }
        TaskKind::Regression => {
            let values = value_labels(&owned)?;
            model.loss_and_grads(phi, &seqs, Targets::Values(&values), trainable)?
        }
    };
    Ok((lg.loss, lg.grads))
}

fn clip(grads: &mut ParameterStore, mask: &SparseMask, max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .zip(&mask.groups)
        .map(|(g, m)| m.indices.iter().map(|&i| g.tensor().data()[i as usize].powi(2)).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for i in 0..grads.len() {
            for v in grads.tensor_mut(i).data_mut() {
                *v *= s;
            }
        }
    }
}

/// Trains `base` on `data.train` and reports the dev metric.
///
/// Deterministic for a fixed config: batches are reshuffled every epoch
/// from a ChaCha8 stream seeded with `config.seed`, and adapters are
/// initialised from the same seed.
pub fn train(model: &ToyModel, base: &ParameterStore, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::config("training needs non-empty train and dev splits"));
    }
    let started = Instant::now();
    let (phi0, adapters0) = trained_store(base, &config.mode, config.seed)?;
    let model = match &config.mode {
        TrainMode::Adapter(spec) => model.without_adapters().with_adapters(spec.clone()),
        _ => model.without_adapters(),
    };
    let mask = update_mask(&config.mode, &phi0)?;
    let trainable_groups: Vec<bool> = mask.groups.iter().map(|m| !m.indices.is_empty()).collect();
    let names: Vec<String> = phi0.iter().map(|g| g.name().to_owned()).collect();
    let trainable = |g: &ParamGroup| {
        names
            .iter()
            .position(|n| n == g.name())
            .is_some_and(|i| trainable_groups[i])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new();
    let mut phi = phi0.clone();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let steps_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = config.learning_rate;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (loss, mut grads) = batch_loss(&model, &phi, data.kind, &batch, &trainable)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            if let Some(c) = config.grad_clip {
                clip(&mut grads, &mask, c);
            }
            lr = match config.schedule {
                Schedule::Constant => config.learning_rate,
                Schedule::LinearDecay => config.learning_rate * (1.0 - step as f64 / total_steps as f64),
            };
            phi = masked_step(&phi, &grads, &mask, lr, config.optimizer, &mut state)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let loss = loss_sum / data.train.len() as f64;
        log::debug!("epoch {epoch}: loss {loss:.6}");
        epochs.push(EpochRecord { epoch, loss, lr });
    }
    let final_metric = evaluate(&model, &phi, data.kind, &data.dev, 64)?;
    let frozen_violations = verify_frozen(&phi0, &phi, &mask)?;
    let adapters = match adapters0 {
        Some(w) => Some(w.extract(&phi)?),
        None => None,
    };
    let wall_clock_secs = started.elapsed().as_secs_f64();
    log::info!(
        "{} finished in {wall_clock_secs:.2}s: {} = {:.4}",
        config.mode.name(),
        final_metric.name,
        final_metric.value
    );
    Ok(TrainOutcome {
        report: TrainReport {
            mode: config.mode.name(),
            epochs,
            final_metric,
            updated_params: mask.selected(),
            frozen_violations,
            wall_clock_secs,
        },
        params: phi,
        adapters,
        mask,
    })
}

/// Whole-group mask helper for tests and tools.
pub fn group_mask(store: &ParameterStore, selected: &[(&str, Vec<u64>)]) -> Result<SparseMask> {
    let mut m = SparseMask::from_groups(store, |_| false);
    for (name, idx) in selected {
        let pos = store
            .position(name)
            .ok_or_else(|| Error::config(format!("no group {name:?}")))?;
        m.groups[pos] = GroupMask::new(*name, store.groups()[pos].len() as u64, idx.clone())?;
    }
    Ok(m)
}
