use serde::{Deserialize, Serialize};

use super::network::GradientVector;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    /// Plain gradient descent: `w -= lr * g`.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        OptimizerState {
            kind,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Applies one descent step to `params` in place.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &GradientVector,
    lr: f64,
    state: &mut OptimizerState,
) -> Result<(), NnError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NnError::ParamCount {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if !(lr > 0.0) {
        return Err(NnError::Contract(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(i) = grads.values.iter().position(|g| !g.is_finite()) {
        return Err(NnError::Divergence(format!(
            "non-finite gradient at coordinate {i}"
        )));
    }
    state.step += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for (w, g) in params.iter_mut().zip(&grads.values) {
                *w -= lr * g;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((w, g), m), v) in params
                .iter_mut()
                .zip(&grads.values)
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    if params.iter().any(|w| !w.is_finite()) {
        return Err(NnError::Divergence("non-finite parameter after update".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::default()] {
            let mut w = vec![1.0, -2.0, 3.5];
            let mut st = OptimizerState::new(kind, 3);
            optimizer_step(&mut w, &GradientVector::zeros(3), 0.1, &mut st).unwrap();
            assert_eq!(w, vec![1.0, -2.0, 3.5]);
        }
    }

    #[test]
    fn plain_step_on_quadratic() {
        // loss = (w - 1)^2, dloss/dw = 2(w - 1) = -2 at w = 0.
        let mut w = vec![0.0];
        let mut st = OptimizerState::new(OptimizerKind::Sgd, 1);
        let g = GradientVector { values: vec![2.0 * (w[0] - 1.0)] };
        optimizer_step(&mut w, &g, 0.1, &mut st).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let mut w = vec![0.0, 0.0];
        let mut st = OptimizerState::new(OptimizerKind::default(), 2);
        let g = GradientVector { values: vec![0.0, f64::NAN] };
        assert!(matches!(
            optimizer_step(&mut w, &g, 0.1, &mut st),
            Err(NnError::Divergence(_))
        ));
    }

    #[test]
    fn adam_decreases_convex_quadratic() {
        // loss = sum_i c_i (w_i - t_i)^2, targets far enough away that a step
        // size bounded by lr cannot overshoot within 200 steps.
        let c = [1.0, 4.0, 0.25];
        let target = [3.0, -4.0, 5.0];
        let lr = 0.01;
        let loss = |w: &[f64]| -> f64 { (0..3).map(|i| c[i] * (w[i] - target[i]).powi(2)).sum() };
        let mut w = vec![0.0; 3];
        let mut st = OptimizerState::new(OptimizerKind::default(), 3);

        // Independent scalar recursion per coordinate.
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut ref_w = [0.0f64; 3];
        let mut ref_m = [0.0f64; 3];
        let mut ref_v = [0.0f64; 3];

        let mut history = vec![loss(&w)];
        for step in 1..=200 {
            let g = GradientVector {
                values: (0..3).map(|i| 2.0 * c[i] * (w[i] - target[i])).collect(),
            };
            optimizer_step(&mut w, &g, lr, &mut st).unwrap();
            for i in 0..3 {
                let gi = 2.0 * c[i] * (ref_w[i] - target[i]);
                ref_m[i] = b1 * ref_m[i] + (1.0 - b1) * gi;
                ref_v[i] = b2 * ref_v[i] + (1.0 - b2) * gi * gi;
                let mh = ref_m[i] / (1.0 - b1.powi(step));
                let vh = ref_v[i] / (1.0 - b2.powi(step));
                ref_w[i] -= lr * mh / (vh.sqrt() + eps);
                assert!((w[i] - ref_w[i]).abs() < 1e-12);
            }
            history.push(loss(&w));
        }
        for pair in history[1..].windows(2) {
            assert!(pair[1] < pair[0]);
        }
    }
}
