//! Population-curve checks against independent numerical oracles.

use addmark::loss::{objective_finite, MarginLoss, MessageSampling, PopulationCurve};
use addmark::tensor::SeededRng;

/// E V(r + s Z) by composite Simpson on [-12, 12]; for the hinge the range
/// stops at the kink, beyond which the integrand vanishes.
fn simpson_expectation(v: MarginLoss, r: f64, s: f64, panels: usize) -> f64 {
    if s == 0.0 {
        return v.value(r);
    }
    let a = -12.0;
    let b = match v {
        MarginLoss::Hinge => ((1.0 - r) / s).min(12.0),
        MarginLoss::Logistic => 12.0,
    };
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / panels as f64;
    let f = |z: f64| v.value(r + s * z) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = f(a) + f(b);
    for i in 1..panels {
        let z = a + i as f64 * h;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
    }
    acc * h / 3.0
}

#[test]
fn phi_matches_monte_carlo() {
    let mut rng = SeededRng::new(2024, 0);
    let draws = 10_000_000;
    let (sigma, r) = (0.5f64, 1.0f64);
    let mut sum = 0.0;
    for _ in 0..draws {
        sum += MarginLoss::Hinge.value(r + sigma * r.sqrt() * rng.standard_normal());
    }
    let mc = sum / draws as f64;
    let curve = PopulationCurve::new(MarginLoss::Hinge, sigma, 0.1).unwrap();
    let q = curve.phi(r, 200);
    assert!((q - mc).abs() < 3e-4, "phi {q} vs monte carlo {mc}");
}

#[test]
fn phi_matches_simpson_for_both_losses() {
    for loss in [MarginLoss::Hinge, MarginLoss::Logistic] {
        let curve = PopulationCurve::new(loss, 0.4, 0.1).unwrap();
        for r in [0.0, 0.05, 0.7, 1.0, 2.5, 9.0] {
            let oracle = simpson_expectation(loss, r, 0.4 * f64::sqrt(r), 4000);
            let got = curve.phi(r, 200);
            assert!((got - oracle).abs() < 1e-6, "{loss:?} r={r}: {got} vs {oracle}");
        }
    }
}

#[test]
fn r_star_matches_brute_force_grid() {
    let (sigma, beta) = (0.3, 0.05);
    let n = 100_000;
    let step = 20.0 / (n - 1) as f64;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..n {
        let r = i as f64 * step;
        let h = simpson_expectation(MarginLoss::Hinge, r, sigma * r.sqrt(), 400) + beta * r;
        if h < best.0 {
            best = (h, r);
        }
    }
    let curve = PopulationCurve::new(MarginLoss::Hinge, sigma, beta).unwrap();
    let sol = curve.solve_r_star().unwrap();
    assert!((sol.r_star - best.1).abs() <= step + 1e-6, "{} vs grid {}", sol.r_star, best.1);
    assert!((sol.r_star - 1.568131).abs() < 1e-5);
    for i in 0..2000 {
        let r = i as f64 * 0.01;
        assert!(sol.h_min <= curve.h_pop(r) + 1e-12, "h_pop({r}) below minimum");
    }
}

#[test]
fn r_star_nonincreasing_in_beta() {
    for (loss, sigma, betas) in [
        (MarginLoss::Hinge, 0.3, vec![0.01, 0.05, 0.1, 0.3, 0.6, 0.9]),
        (MarginLoss::Logistic, 0.2, vec![0.02, 0.05, 0.1, 0.2, 0.3, 0.4]),
    ] {
        let mut prev = f64::INFINITY;
        for b in betas {
            let r = PopulationCurve::new(loss, sigma, b).unwrap().solve_r_star().unwrap().r_star;
            assert!(r <= prev + 1e-6, "{loss:?} beta={b}: {r} > {prev}");
            prev = r;
        }
    }
}

/// L(w) for x ~ N(0, diag(var)): each margin is Gaussian given the message.
fn population_objective(w: &[Vec<f64>], var: &[f64], loss: MarginLoss, beta: f64) -> f64 {
    let k = w.len();
    let mut total = 0.0;
    for code in 0..(1u32 << k) {
        let m: Vec<f64> = (0..k).map(|i| if code >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
        for l in 0..k {
            let mean: f64 = (0..k)
                .map(|j| m[l] * m[j] * w[l].iter().zip(&w[j]).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let sd = w[l].iter().zip(var).map(|(a, v)| a * a * v).sum::<f64>().sqrt();
            total += simpson_expectation(loss, mean, sd, 4000);
        }
    }
    total / (1u32 << k) as f64 + beta * w.iter().flatten().map(|a| a * a).sum::<f64>()
}

#[test]
fn finite_objective_is_unbiased() {
    let w = vec![vec![0.8, 0.1, 0.0, -0.2], vec![0.0, 0.5, 0.6, 0.1]];
    let var = [0.3, 1.0, 0.2, 0.5];
    let beta = 0.2;
    for loss in [MarginLoss::Hinge, MarginLoss::Logistic] {
        let target = population_objective(&w, &var, loss, beta);
        let mut rng = SeededRng::new(7, 0);
        let reps = 400;
        let vals: Vec<f64> = (0..reps)
            .map(|_| {
                let data: Vec<Vec<f64>> = (0..25)
                    .map(|_| var.iter().map(|v| v.sqrt() * rng.standard_normal()).collect())
                    .collect();
                objective_finite(&w, &data, loss, beta, MessageSampling::Exhaustive).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!((mean - target).abs() < 4.0 * se, "{loss:?}: {mean} vs {target} (se {se})");
    }
}
