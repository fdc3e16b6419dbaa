use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::par::{self, Execution};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor (all of them if fewer exist).
    pub coords_per_param: usize,
    pub seed: u64,
    pub exec: Execution,
    /// Parameter indices left out of the comparison.
    pub skip: Vec<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            coords_per_param: 200,
            seed: 0,
            exec: Execution::Parallel,
            skip: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Compares `analytic` gradients of `f` at `params` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` on a random coordinate subsample.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], analytic: &[Tensor], opts: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> f64 + Sync + Send,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let h = opts.step;
    let per_param = par::map_range(opts.exec, params.len(), |pi| {
        if opts.skip.contains(&pi) {
            return ((0.0, 0, 0.0, 0.0), 0);
        }
        let numel = params[pi].numel();
        assert_eq!(analytic[pi].shape(), params[pi].shape(), "gradient shape for parameter {pi}");
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut coords = sample(&mut rng, numel, opts.coords_per_param.min(numel)).into_vec();
        coords.sort_unstable();

        let mut work = params.to_vec();
        let mut worst = (0.0, 0usize, 0.0, 0.0);
        for &c in &coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let fp = f(&work);
            work[pi].data_mut()[c] = orig - h;
            let fm = f(&work);
            work[pi].data_mut()[c] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst.0 || coords.len() == 1 {
                worst = (rel, c, a, numeric);
            }
        }
        (worst, coords.len())
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    for (pi, ((rel, c, a, n), count)) in per_param.into_iter().enumerate() {
        report.coords_checked += count;
        if count == 0 {
            continue;
        }
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((pi, c));
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    report
}
