use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compares an analytic gradient against central finite differences.
///
/// `loss_fn` returns the loss and its analytic gradient at the given
/// parameters. Up to `samples` coordinates are checked (all of them when
/// `samples >= params.len()`), chosen by a fixed-seed generator. Returns the
/// maximum of `|analytic - numeric| / max(|analytic|, 1e-8)`.
pub fn finite_diff_check<F>(params: &[f64], mut loss_fn: F, samples: usize) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let coords: Vec<usize> = if samples >= params.len() {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
        sample(&mut rng, params.len(), samples).into_vec()
    };
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let (plus, _) = loss_fn(&probe);
        probe[i] = orig - FD_STEP;
        let (minus, _) = loss_fn(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1e-8);
        worst = worst.max(err);
    }
    worst
}
