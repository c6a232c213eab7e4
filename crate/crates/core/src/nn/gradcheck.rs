use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Gradients, ModelParams};
use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor so exactly-zero gradients do not divide by zero.
const REL_FLOOR: f64 = 1e-8;

/// Step sizes tried per parameter. Large steps lose to curvature and
/// activation kinks, small ones to cancellation; a correct gradient agrees
/// at one of them, a wrong one at none.
pub const DEFAULT_STEPS: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

/// Compares analytic gradients from `loss_fn` against central differences
/// on `samples` randomly chosen parameters, keeping per parameter the best
/// agreement over `steps`.
///
/// `loss_fn` maps a parameter set to `(loss, gradients)`.
pub fn finite_diff_check<F>(
    params: &ModelParams,
    mut loss_fn: F,
    samples: usize,
    steps: &[f64],
    tolerance: f64,
    seed: u64,
) -> Result<FdReport>
where
    F: FnMut(&ModelParams) -> Result<(f64, Gradients)>,
{
    finite_diff_check_terms(
        params,
        |p| loss_fn(p).map(|(l, g)| (vec![l], g)),
        samples,
        steps,
        tolerance,
        seed,
    )
}

/// [`finite_diff_check`] for a loss given as additive terms. Each term is
/// differenced on its own and the derivatives summed, so a small term is not
/// lost in the rounding of a much larger one.
pub fn finite_diff_check_terms<F>(
    params: &ModelParams,
    mut loss_fn: F,
    samples: usize,
    steps: &[f64],
    tolerance: f64,
    seed: u64,
) -> Result<FdReport>
where
    F: FnMut(&ModelParams) -> Result<(Vec<f64>, Gradients)>,
{
    let (_, analytic) = loss_fn(params)?;
    let total = params.count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, samples.min(total));

    let mut probe = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst_param = 0;
    for idx in picks.iter() {
        let orig = params.get_flat(idx);
        let a = analytic.get_flat(idx);
        let mut rel = f64::INFINITY;
        for &step in steps {
            // five-point stencil, O(h⁴) truncation
            let mut f: [Vec<f64>; 4] = Default::default();
            for (k, m) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                probe.set_flat(idx, orig + m * step);
                f[k] = loss_fn(&probe)?.0;
            }
            probe.set_flat(idx, orig);
            let numeric: f64 = (0..f[0].len())
                .map(|t| (-f[0][t] + 8.0 * f[1][t] - 8.0 * f[2][t] + f[3][t]) / (12.0 * step))
                .sum();
            let e = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if e < rel {
                rel = e;
            }
        }
        if rel > max_rel_err || rel.is_nan() {
            max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            worst_param = idx;
        }
    }
    Ok(FdReport {
        checked: samples.min(total),
        max_rel_err,
        worst_param,
        tolerance,
        passed: max_rel_err < tolerance,
    })
}
