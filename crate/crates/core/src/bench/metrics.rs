use serde::Serialize;

use super::model::ToyModel;
use super::task::{Example, Label, TaskKind};
use crate::error::{Error, Result};
use crate::store::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metric {
    /// `"accuracy"` or `"pearson"`.
    pub name: &'static str,
    pub value: f64,
    /// Set when Pearson was undefined (zero variance) and reported as 0.
    pub degenerate: bool,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!(
            "accuracy over {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Pearson correlation; `(0.0, true)` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, bool)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(format!("pearson over {} and {} values", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, true));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt()), false))
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Accuracy or Pearson of `model` on `examples`, evaluated in chunks of `batch`.
pub fn evaluate(model: &ToyModel, params: &ParameterStore, kind: TaskKind, examples: &[Example], batch: usize) -> Result<Metric> {
    let batch = batch.max(1);
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let logits = model.logits(params, &seqs)?;
        let width = logits.shape()[1];
        outputs.extend(logits.data().chunks(width).map(<[f64]>::to_vec));
    }
    match kind {
        TaskKind::Classification => {
            let preds: Vec<usize> = outputs.iter().map(|r| argmax(r)).collect();
            let labels: Vec<usize> = examples
                .iter()
                .map(|e| match e.label {
                    Label::Class(c) => Ok(c),
                    Label::Value(_) => Err(Error::Contract("classification metric on regression data".into())),
                })
                .collect::<Result<_>>()?;
            Ok(Metric {
                name: "accuracy",
                value: accuracy(&preds, &labels)?,
                degenerate: false,
            })
        }
        TaskKind::Regression => {
            let preds: Vec<f64> = outputs.iter().map(|r| r[0]).collect();
            let targets: Vec<f64> = examples
                .iter()
                .map(|e| match e.label {
                    Label::Value(v) => Ok(v),
                    Label::Class(_) => Err(Error::Contract("regression metric on classification data".into())),
                })
                .collect::<Result<_>>()?;
            let (value, degenerate) = pearson(&preds, &targets)?;
            if degenerate {
                log::warn!("pearson undefined for zero-variance predictions; reporting 0");
            }
            Ok(Metric {
                name: "pearson",
                value,
                degenerate,
            })
        }
    }
}
