use nsl_core::estimator::{kde, silverman_bandwidth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn sup_diff(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p.1 - q.1).abs()).fold(0.0, f64::max)
}

#[test]
fn half_sample_curve_stays_inside_the_bootstrap_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let n = 2000;
    // Bimodal, so the check is not only about a single bump.
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            if i % 3 == 0 { 0.8 + 0.1 * z } else { 0.3 + 0.15 * z }
        })
        .collect();
    let h = silverman_bandwidth(&samples);
    let grid: Vec<f64> = (0..=200).map(|i| -0.5 + 1.8 * i as f64 / 200.0).collect();
    let full = kde(&samples, &grid, Some(h)).unwrap();
    let half = kde(&samples[..n / 2], &grid, Some(h)).unwrap();

    let mut boot: Vec<f64> = (0..200)
        .map(|_| {
            let draw: Vec<f64> = (0..n / 2).map(|_| samples[rng.random_range(0..n)]).collect();
            sup_diff(&kde(&draw, &grid, Some(h)).unwrap(), &full)
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let band = boot[(0.95 * boot.len() as f64) as usize];
    let got = sup_diff(&half, &full);
    assert!(got <= band, "{got} vs band {band}");
}
