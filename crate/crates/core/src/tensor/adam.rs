//! Adam optimizer over a `ParameterStore`.

use std::collections::BTreeMap;

use crate::error::{Result, TwistError};
use crate::tensor::ParameterStore;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// First/second moment slots per parameter, plus the shared step counter.
/// Moments start at zero; `t` starts at 0 and increments per step.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    t: u64,
    slots: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update, in place, over every parameter in the
    /// store that has a gradient. Gradients are consumed.
    pub fn step(&mut self, params: &mut ParameterStore, lr: f32) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = tensor.grad.take() else {
                continue;
            };
            if let Some(g) = grad.iter().find(|g| !g.is_finite()) {
                return Err(TwistError::NonFinite(format!(
                    "gradient of {name:?} is {g} at step {t}"
                )));
            }
            let numel = tensor.numel();
            let (m, v) = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; numel], vec![0.0; numel]));
            debug_assert_eq!(m.len(), numel);
            let data = tensor.data_mut();
            for i in 0..numel {
                let g = grad[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f32) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::scalar(v).with_grad()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = scalar_store(1.5);
        store.get_mut("p").unwrap().grad_mut()[0] = 0.0;
        let mut adam = AdamState::new();
        adam.step(&mut store, 0.1).unwrap();
        assert_eq!(store.get("p").unwrap().data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Hand trace: m̂ = g, v̂ = g² after bias correction, so the first
        // update is lr·g/(|g|+ε) ≈ lr for g = 1.
        let mut store = scalar_store(0.0);
        store.get_mut("p").unwrap().grad_mut()[0] = 1.0;
        let mut adam = AdamState::new();
        adam.step(&mut store, 0.1).unwrap();
        let p = store.get("p").unwrap().data()[0];
        assert!((p + 0.1).abs() < 1e-6, "expected ≈ -0.1, got {p}");
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut store = scalar_store(0.3);
            let mut adam = AdamState::new();
            for step in 0..25 {
                store.get_mut("p").unwrap().grad_mut()[0] = (step as f32 * 0.37).sin();
                adam.step(&mut store, 0.05).unwrap();
            }
            store.get("p").unwrap().data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn non_finite_gradient_aborts_with_diagnostic() {
        let mut store = scalar_store(0.0);
        store.get_mut("p").unwrap().grad_mut()[0] = f32::NAN;
        let mut adam = AdamState::new();
        let err = adam.step(&mut store, 0.1).unwrap_err();
        assert!(matches!(err, TwistError::NonFinite(_)));
        assert!(err.to_string().contains("p"));
    }
}
