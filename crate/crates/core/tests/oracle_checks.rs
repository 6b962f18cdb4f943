use approx::assert_abs_diff_eq;
use nsl_core::oracle::{gauss_legendre, presets};
use nsl_core::{MixtureComponent, MixtureSpec, Schedule, TimePrior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_mixture(rng: &mut ChaCha8Rng, dim: usize) -> MixtureSpec {
    let k = rng.random_range(1..5);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut components: Vec<MixtureComponent> = raw
        .iter()
        .enumerate()
        .map(|(i, w)| MixtureComponent {
            name: format!("c{i}"),
            weight: w / total,
            mean: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            var: (0..dim).map(|_| rng.random_range(0.05..1.5)).collect(),
            label: i % 2,
        })
        .collect();
    if k == 1 {
        components[0].label = 0;
    }
    // Absorb rounding so the weights sum to one within validation tolerance.
    let s: f64 = components.iter().map(|c| c.weight).sum();
    components[0].weight += 1.0 - s;
    MixtureSpec::new(components).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn central_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[j] += h;
            m[j] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn assert_rel(a: &[f64], b: &[f64], rel: f64) {
    let scale = b.iter().map(|v| v.abs()).fold(1.0, f64::max);
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= rel * scale, "{a:?} vs {b:?}");
    }
}

#[test]
fn score_matches_log_density_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let dim = 1 + case % 3;
        let mix = random_mixture(&mut rng, dim);
        let sch = if case % 2 == 0 { Schedule::LINEAR } else { Schedule::TRIG_VP };
        let t = rng.random_range(0.05..0.95);
        let x = random_point(&mut rng, dim);
        let s = mix.oracle_score(&x, t, &sch, None).unwrap();
        let fd = central_grad(|p| mix.log_density(p, t, &sch, None).unwrap(), &x, 1e-5);
        assert_rel(&s, &fd, 1e-5);
    }
}

#[test]
fn velocity_and_score_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..1000 {
        let mix = random_mixture(&mut rng, 2);
        let sch = if case % 2 == 0 { Schedule::LINEAR } else { Schedule::TRIG_VP };
        let t = rng.random_range(0.05..0.95);
        let x = random_point(&mut rng, 2);
        let v = mix.oracle_velocity(&x, t, &sch, None).unwrap();
        let s = mix.oracle_score(&x, t, &sch, None).unwrap();
        assert_rel(&sch.score_from_velocity(&x, &v, t).unwrap(), &s, 1e-10);
        assert_rel(&sch.velocity_from_score(&x, &s, t).unwrap(), &v, 1e-10);
    }
}

#[test]
fn class_score_gap_is_gradient_of_log_responsibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut checked = 0;
    while checked < 50 {
        let mix = random_mixture(&mut rng, 2);
        if mix.num_classes() < 2 {
            continue;
        }
        let t = rng.random_range(0.05..0.95);
        let x = random_point(&mut rng, 2);
        let y = rng.random_range(0..mix.num_classes());
        let sch = Schedule::LINEAR;
        let gap: Vec<f64> = mix
            .oracle_score(&x, t, &sch, Some(y))
            .unwrap()
            .iter()
            .zip(mix.oracle_score(&x, t, &sch, None).unwrap())
            .map(|(a, b)| a - b)
            .collect();
        let fd = central_grad(|p| mix.log_class_posterior(p, t, &sch, y).unwrap(), &x, 1e-5);
        assert_rel(&gap, &fd, 1e-5);
        checked += 1;
    }
}

#[test]
fn quadrature_has_converged_at_64_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let mix = random_mixture(&mut rng, 2);
        let x = random_point(&mut rng, 2);
        for sch in [Schedule::LINEAR, Schedule::TRIG_VP] {
            let a = mix.noise_marginal_score_with(&x, &TimePrior::Uniform01, &sch, None, 64).unwrap();
            let b = mix.noise_marginal_score_with(&x, &TimePrior::Uniform01, &sch, None, 256).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-8, "{a:?} vs {b:?}");
            }
        }
    }
}

#[test]
fn noise_marginal_score_matches_monte_carlo() {
    // grad log E_t[N(x; 0, c_t I)] with c_t = (1-t)^2 + t^2, as a ratio of
    // Monte-Carlo means over t ~ U(0, 1).
    let mix = presets::standard_normal(2);
    let x = [0.7, -1.1];
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let t: f64 = rng.random();
        let c = (1.0 - t).powi(2) + t * t;
        let b = (-0.5 * r2 / c).exp() / c;
        let a = -b / c;
        sa += a;
        sb += b;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    let nf = n as f64;
    let (ma, mb) = (sa / nf, sb / nf);
    let (va, vb, cab) = (saa / nf - ma * ma, sbb / nf - mb * mb, sab / nf - ma * mb);
    let k = ma / mb;
    let se_k = ((va - 2.0 * k * cab + k * k * vb) / nf).sqrt() / mb;
    let s = mix.noise_marginal_score(&x, &TimePrior::Uniform01, &Schedule::LINEAR, None).unwrap();
    for j in 0..2 {
        let se = (se_k * x[j]).abs();
        assert!((s[j] - k * x[j]).abs() <= 3.0 * se, "{} vs {} (se {se})", s[j], k * x[j]);
    }
}

#[test]
fn component_frequencies_match_weights() {
    let mix = presets::grid_mixture();
    let n = 100_000;
    let (x, labels) = mix.sample_data(n, 16).unwrap();
    let nf = n as f64;
    for (c, &w) in mix.class_weights().iter().enumerate() {
        let k = labels.iter().filter(|&&l| l == c).count() as f64;
        let se = (w * (1.0 - w) / nf).sqrt();
        assert!((k / nf - w).abs() <= 3.0 * se, "class {c}: {} vs {w}", k / nf);
    }
    // Component identity is recoverable here: every sample lies within 0.6 of its grid node.
    let mut counts = [0usize; 9];
    for row in x.rows() {
        let i = ((row[0] + 1.8) / 1.2) as usize;
        let j = ((row[1] + 1.8) / 1.2) as usize;
        counts[3 * i.min(2) + j.min(2)] += 1;
    }
    for c in &mix.components {
        let w = c.weight;
        let se = (w * (1.0 - w) / nf).sqrt();
        let idx = 3 * (((c.mean[0] + 1.2) / 1.2).round() as usize) + ((c.mean[1] + 1.2) / 1.2).round() as usize;
        assert!((counts[idx] as f64 / nf - w).abs() <= 3.0 * se);
    }
}

#[test]
fn injected_error_variances_add() {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (sch, t, se) in [(Schedule::LINEAR, 0.3, 0.4), (Schedule::TRIG_VP, 0.5, 0.2)] {
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            let err: f64 = rng.sample(StandardNormal);
            vals.push(sch.forward_sample(&[0.0], &[eps], t).unwrap()[0] + se * err);
        }
        let m = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let expect = sch.sigma(t).powi(2) + se * se;
        // Var of a Gaussian sample variance is 2 s^4 / (n - 1).
        let stderr = expect * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - expect).abs() <= 3.0 * stderr, "{var} vs {expect}");
        let shift = sch.shift_exact(t, se).unwrap();
        assert_abs_diff_eq!(sch.sigma(t + shift).powi(2), expect, epsilon = 1e-9);
    }
}

#[test]
fn trig_first_order_error_stays_bounded() {
    let sch = Schedule::TRIG_VP;
    for t in [0.2, 0.5, 0.8] {
        let ratios: Vec<f64> = [0.1, 0.05, 0.025, 0.0125]
            .iter()
            .map(|&se: &f64| (sch.shift_first_order(t, se).unwrap() - sch.shift_exact(t, se).unwrap()).abs() / (se * se))
            .collect();
        // The normalized error must stay bounded as sigma_e halves: it may not
        // grow by more than 4x from one level to the next.
        for w in ratios.windows(2) {
            assert!(w[1].is_finite() && w[1] <= 4.0 * w[0], "t={t}: {ratios:?}");
        }
    }
}

#[test]
fn gauss_legendre_weights_sum_to_two() {
    for n in [1, 2, 7, 64, 256] {
        let (x, w) = gauss_legendre(n);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-12);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }
}
