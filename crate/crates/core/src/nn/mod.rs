//! Dense actor-critic networks with a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod gradcheck;
pub mod network;
pub mod optim;
pub mod tape;

pub use gradcheck::finite_diff_check;
pub use network::{
    forward_policy, forward_value, Activation, ActionDistribution, Arch, GradientVector, LayerSpec,
    NetworkConfig, PolicyParameters,
};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input shape mismatch: expected {expected} features, got {got}")]
    InputShape { expected: usize, got: usize },
    #[error("parameter count mismatch: expected {expected}, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("loss must be a scalar, got a {rows}x{cols} node")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient_is_analytic() {
        let mut tape = Tape::new();
        let w = tape.param(arr2(&[[3.0]]));
        let loss = tape.square(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(arr2(&[[1.0, 2.0]]));
        let y = tape.square(w);
        assert!(matches!(
            tape.backward(y),
            Err(NnError::NonScalarLoss { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(arr2(&[[2.0]]));
        let unused = tape.param(arr2(&[[5.0]]));
        let loss = tape.square(w);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused, (1, 1))[[0, 0]], 0.0);
    }

    #[test]
    fn linear_loss_gradient_is_exact() {
        let coef = [0.5, -1.5, 2.0, 0.25];
        let loss_fn = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let w = tape.param(Array2::from_shape_vec((1, 4), p.to_vec()).unwrap());
            let c = tape.constant(Array2::from_shape_vec((1, 4), coef.to_vec()).unwrap());
            let prod = tape.mul(w, c);
            let loss = tape.sum(prod);
            let g = tape.backward(loss).unwrap();
            (tape.scalar_value(loss), g.get(w).unwrap().iter().copied().collect())
        };
        let err = finite_diff_check(&[1.0, 2.0, -3.0, 0.5], loss_fn, 4);
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn softmax_cross_entropy_matches_finite_differences() {
        let target = 2usize;
        let loss_fn = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let logits = tape.param(Array2::from_shape_vec((1, 3), p.to_vec()).unwrap());
            let lsm = tape.log_softmax(logits);
            let picked = tape.pick(lsm, vec![target]);
            let loss = tape.scale(picked, -1.0);
            let loss = tape.sum(loss);
            let g = tape.backward(loss).unwrap();
            (tape.scalar_value(loss), g.get(logits).unwrap().iter().copied().collect())
        };
        let err = finite_diff_check(&[0.3, -1.2, 0.8], loss_fn, 3);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        // Exercises matmul, add_row, tanh, relu, exp, clamp, min, sub, mean.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p0: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss_fn = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let xv = tape.constant(Array2::from_shape_vec((2, 3), x.clone()).unwrap());
            let w = tape.param(Array2::from_shape_vec((3, 2), p[..6].to_vec()).unwrap());
            let b = tape.param(Array2::from_shape_vec((1, 2), p[6..8].to_vec()).unwrap());
            let s = tape.param(Array2::from_shape_vec((1, 1), p[8..9].to_vec()).unwrap());
            let z = tape.matmul(xv, w);
            let z = tape.add_row(z, b);
            let a = tape.tanh(z);
            let r = tape.relu(z);
            let e = tape.exp(a);
            let c = tape.clamp(e, 0.7, 1.6);
            let m = tape.min(c, r);
            let d = tape.sub(m, a);
            let sq = tape.square(d);
            let mean = tape.mean(sq);
            let loss = tape.mul(mean, s);
            let g = tape.backward(loss).unwrap();
            let mut grad: Vec<f64> = g.get_or_zeros(w, (3, 2)).iter().copied().collect();
            grad.extend(g.get_or_zeros(b, (1, 2)).iter());
            grad.extend(g.get_or_zeros(s, (1, 1)).iter());
            (tape.scalar_value(loss), grad)
        };
        let err = finite_diff_check(&p0, loss_fn, 9);
        assert!(err < 1e-4, "err = {err}");
    }
}
