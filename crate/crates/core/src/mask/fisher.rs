//! Empirical Fisher scores: `F̂ = (1/N) Σᵢ (∇θ L(Dᵢ; θ))²`.

use crate::bench::model::{Targets, ToyModel};
use crate::bench::task::{Example, Label};
use crate::error::{Error, Result};
use crate::store::ParameterStore;

fn squared(g: &ParameterStore) -> ParameterStore {
    let mut out = g.clone();
    for i in 0..out.len() {
        for v in out.tensor_mut(i).data_mut() {
            *v *= *v;
        }
    }
    out
}

fn add_into(acc: &mut ParameterStore, other: &ParameterStore) {
    for i in 0..acc.len() {
        let src = other.groups()[i].tensor().data();
        for (a, b) in acc.tensor_mut(i).data_mut().iter_mut().zip(src) {
            *a += b;
        }
    }
}

/// Pairwise sum, fixed by the input order alone.
fn tree_sum(mut parts: Vec<ParameterStore>) -> ParameterStore {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                add_into(&mut a, &b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().expect("at least one part")
}

/// Mean of element-wise squared per-sample gradients.
pub fn fisher_from_gradients(grads: impl IntoIterator<Item = ParameterStore>) -> Result<ParameterStore> {
    let mut squares = Vec::new();
    for (i, g) in grads.into_iter().enumerate() {
        if let Some(first) = squares.first() {
            g.check_aligned(first)?;
        }
        if let Some(bad) = g.iter().find(|grp| grp.tensor().data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for sample {i} in group {:?}",
                bad.name()
            )));
        }
        squares.push(squared(&g));
    }
    if squares.is_empty() {
        return Err(Error::config("fisher scores need at least one sample"));
    }
    let n = squares.len() as f64;
    let mut total = tree_sum(squares);
    for i in 0..total.len() {
        for v in total.tensor_mut(i).data_mut() {
            *v /= n;
        }
    }
    Ok(total)
}

/// Fisher scores of `params` under the task loss over the first `n` examples.
pub fn fisher_scores(model: &ToyModel, params: &ParameterStore, data: &[Example], n: usize) -> Result<ParameterStore> {
    if n == 0 || data.is_empty() {
        return Err(Error::config("fisher scores need n >= 1 and a non-empty dataset"));
    }
    if n > data.len() {
        return Err(Error::config(format!("requested {n} samples but only {} exist", data.len())));
    }
    let grads = data[..n]
        .iter()
        .map(|ex| {
            let batch = [ex.tokens.clone()];
            let lg = match ex.label {
                Label::Class(c) => model.loss_and_grads(params, &batch, Targets::Classes(&[c]), &|_| true)?,
                Label::Value(v) => model.loss_and_grads(params, &batch, Targets::Values(&[v]), &|_| true)?,
            };
            Ok(lg.grads)
        })
        .collect::<Result<Vec<_>>>()?;
    fisher_from_gradients(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{ParamGroup, Role};
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParameterStore {
        let g = ParamGroup::new("theta", Role::FfnBias, Tensor::vector(vec![v]).unwrap()).unwrap();
        ParameterStore::from_groups(None, [g]).unwrap()
    }

    #[test]
    fn scalar_hand_calculus() {
        // L_i = θ·x_i → ∂L_i/∂θ = x_i
        let f = fisher_from_gradients([scalar_store(1.0), scalar_store(2.0)]).unwrap();
        assert_eq!(f.tensor("theta").unwrap().data(), &[2.5]);
    }

    #[test]
    fn constant_loss_gives_zero() {
        let f = fisher_from_gradients(vec![scalar_store(0.0); 5]).unwrap();
        assert_eq!(f.tensor("theta").unwrap().data(), &[0.0]);
    }

    #[test]
    fn empty_and_non_finite() {
        assert!(fisher_from_gradients(Vec::new()).is_err());
        let mut bad = scalar_store(0.0);
        bad.tensor_mut(0).data_mut()[0] = f64::NAN;
        let err = fisher_from_gradients([scalar_store(1.0), bad]).unwrap_err();
        assert!(err.to_string().contains("sample 1"), "{err}");
    }

    #[test]
    fn tree_sum_handles_odd_counts() {
        let parts: Vec<_> = (1..=5).map(|i| scalar_store(i as f64)).collect();
        assert_eq!(tree_sum(parts).tensor("theta").unwrap().data(), &[15.0]);
    }
}
