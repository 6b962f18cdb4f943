//! Sliced Wasserstein-2 distances.

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::oracle::MixtureSpec;

pub const DEFAULT_PROJECTIONS: usize = 128;
/// Points in the tabulated CDF used to invert a projected mixture.
const CDF_GRID: usize = 16_384;

fn random_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

fn project_sorted(samples: ArrayView2<'_, f64>, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = samples.rows().into_iter().map(|r| r.iter().zip(dir).map(|(a, b)| a * b).sum()).collect();
    p.sort_by(f64::total_cmp);
    p
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Quantiles of a 1-D Gaussian mixture at increasing probabilities `levels`.
fn mixture_quantiles(comps: &[(f64, f64, f64)], levels: &[f64]) -> Vec<f64> {
    let lo = comps.iter().map(|&(_, m, v)| m - 9.0 * v.sqrt()).fold(f64::INFINITY, f64::min);
    let hi = comps.iter().map(|&(_, m, v)| m + 9.0 * v.sqrt()).fold(f64::NEG_INFINITY, f64::max);
    let h = (hi - lo) / (CDF_GRID - 1) as f64;
    let xs: Vec<f64> = (0..CDF_GRID).map(|i| lo + i as f64 * h).collect();
    let cdf: Vec<f64> = xs
        .iter()
        .map(|&x| comps.iter().map(|&(w, m, v)| w * normal_cdf((x - m) / v.sqrt())).sum())
        .collect();
    let mut k = 0;
    levels
        .iter()
        .map(|&p| {
            while k + 1 < CDF_GRID - 1 && cdf[k + 1] < p {
                k += 1;
            }
            let (c0, c1) = (cdf[k], cdf[k + 1]);
            if c1 > c0 {
                xs[k] + h * ((p - c0) / (c1 - c0)).clamp(0.0, 1.0)
            } else {
                xs[k]
            }
        })
        .collect()
}

fn check_samples(samples: ArrayView2<'_, f64>) -> Result<()> {
    if samples.nrows() == 0 {
        return Err(Error::Argument("no samples".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample contains a non-finite value".into()));
    }
    Ok(())
}

/// `sqrt(mean over directions of W2^2)` between the empirical measure of
/// `samples` and the analytic mixture, using its exact projected quantiles
/// at `(i - 1/2) / n`.
pub fn sliced_w2_to_mixture(
    samples: ArrayView2<'_, f64>,
    target: &MixtureSpec,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    check_samples(samples)?;
    check_len(target.dim(), samples.ncols())?;
    if projections == 0 {
        return Err(Error::Argument("projections must be positive".into()));
    }
    let n = samples.nrows();
    let levels: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let dirs = random_directions(samples.ncols(), projections, seed);
    let total: f64 = dirs
        .par_iter()
        .map(|d| {
            let p = project_sorted(samples, d);
            let q = mixture_quantiles(&target.project(d), &levels);
            p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok((total / projections as f64).sqrt())
}

/// Two-sample sliced W2, matching empirical quantiles at `(i - 1/2) / m`
/// with `m` the larger sample size.
pub fn sliced_w2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, projections: usize, seed: u64) -> Result<f64> {
    check_samples(a)?;
    check_samples(b)?;
    check_len(a.ncols(), b.ncols())?;
    if projections == 0 {
        return Err(Error::Argument("projections must be positive".into()));
    }
    let m = a.nrows().max(b.nrows());
    let pick = |s: &[f64], p: f64| s[((p * s.len() as f64) as usize).min(s.len() - 1)];
    let dirs = random_directions(a.ncols(), projections, seed);
    let total: f64 = dirs
        .par_iter()
        .map(|d| {
            let pa = project_sorted(a, d);
            let pb = project_sorted(b, d);
            (0..m)
                .map(|i| {
                    let p = (i as f64 + 0.5) / m as f64;
                    (pick(&pa, p) - pick(&pb, p)).powi(2)
                })
                .sum::<f64>()
                / m as f64
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok((total / projections as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::presets;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mixture_quantiles_of_standard_normal() {
        let q = mixture_quantiles(&[(1.0, 0.0, 1.0)], &[0.025, 0.5, 0.975]);
        assert_abs_diff_eq!(q[0], -1.959_963_985, epsilon = 1e-4);
        assert_abs_diff_eq!(q[1], 0.0, epsilon = 1e-4);
        assert_abs_diff_eq!(q[2], 1.959_963_985, epsilon = 1e-4);
    }

    #[test]
    fn exact_samples_are_close_and_shifted_samples_are_not() {
        let target = presets::grid_mixture();
        let (x, _) = target.sample_data(10_000, 4).unwrap();
        let near = sliced_w2_to_mixture(x.view(), &target, 64, 0).unwrap();
        assert!(near < 0.03, "{near}");
        let shifted = &x + 0.3;
        let far = sliced_w2_to_mixture(shifted.view(), &target, 64, 0).unwrap();
        assert!(far > 0.2, "{far}");
    }

    #[test]
    fn two_sample_is_symmetric_and_zero_on_itself() {
        let (x, _) = presets::two_moons().sample_data(500, 1).unwrap();
        let (y, _) = presets::two_moons().sample_data(500, 2).unwrap();
        assert_eq!(sliced_w2(x.view(), x.view(), 16, 0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            sliced_w2(x.view(), y.view(), 16, 0).unwrap(),
            sliced_w2(y.view(), x.view(), 16, 0).unwrap(),
            epsilon = 1e-12
        );
    }
}
