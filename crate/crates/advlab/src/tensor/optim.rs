//! Plain SGD with classical momentum, plus a helper for averaging
//! per-example gradients across a mini-batch.

use std::collections::BTreeMap;

use super::params::ParamSet;
use super::TensorError;

/// SGD with momentum: `v <- m * v + g`, `p <- p - lr * v`. Velocity
/// buffers are keyed by parameter name and start at zero.
#[derive(Debug)]
pub struct SgdMomentum {
    learning_rate: f64,
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        SgdMomentum {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.learning_rate = learning_rate;
    }

    /// Apply one update to every parameter in the set. Every parameter
    /// must carry a gradient; a missing one is a bug in the training
    /// loop, not a condition to paper over.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), TensorError> {
        for (name, tensor) in params.iter_mut() {
            let grad = tensor
                .grad()
                .ok_or_else(|| TensorError::MissingGradient { name: name.clone() })?
                .to_vec();
            let velocity = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let data = tensor.data_mut();
            for ((p, v), g) in data.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = self.momentum * *v + g;
                *p -= self.learning_rate * *v;
            }
        }
        Ok(())
    }
}

/// Average per-example gradients over a batch and deposit them on the
/// parameter set.
///
/// `grad_fn(params, example_index)` must return `(loss, per-parameter
/// gradients)` for one example. Examples are evaluated and reduced
/// strictly in index order — training is deliberately single-threaded
/// so parameter trajectories are bitwise reproducible. Returns the
/// mean loss.
pub fn batch_mean_grads<F>(
    params: &mut ParamSet,
    n_examples: usize,
    grad_fn: F,
) -> Result<f64, TensorError>
where
    F: Fn(&ParamSet, usize) -> Result<(f64, BTreeMap<String, Vec<f64>>), TensorError>,
{
    assert!(n_examples > 0, "empty batch");
    let scale = 1.0 / n_examples as f64;
    let mut mean_loss = 0.0;
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for i in 0..n_examples {
        let (loss, grads) = grad_fn(params, i)?;
        mean_loss += loss * scale;
        for (name, g) in grads {
            match sums.get_mut(&name) {
                Some(acc) => {
                    for (slot, v) in acc.iter_mut().zip(&g) {
                        *slot += v;
                    }
                }
                None => {
                    sums.insert(name, g);
                }
            }
        }
    }
    for (name, tensor) in params.iter_mut() {
        let sum = sums
            .remove(name)
            .ok_or_else(|| TensorError::MissingGradient { name: name.clone() })?;
        let mean: Vec<f64> = sum.into_iter().map(|v| v * scale).collect();
        tensor.set_grad(mean)?;
    }
    Ok(mean_loss)
}

/// Convenience: gradient tensors keyed by name, taken from a parameter
/// set after a backward pass (used by `batch_mean_grads` callers).
pub fn extract_grads(params: &ParamSet) -> Result<BTreeMap<String, Vec<f64>>, TensorError> {
    params
        .iter()
        .map(|(name, tensor)| {
            tensor
                .grad()
                .map(|g| (name.clone(), g.to_vec()))
                .ok_or_else(|| TensorError::MissingGradient { name: name.clone() })
        })
        .collect()
}

/// Validate that every gradient in the set is finite; returns the
/// offending parameter name otherwise.
pub fn check_finite_grads(params: &ParamSet) -> Result<(), TensorError> {
    for (name, tensor) in params.iter() {
        if let Some(g) = tensor.grad() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite {
                    context: format!("gradient of '{name}'"),
                });
            }
        }
    }
    Ok(())
}

/// Velocity-free SGD, i.e. momentum 0.
pub fn plain_sgd(learning_rate: f64) -> SgdMomentum {
    SgdMomentum::new(learning_rate, 0.0)
}
