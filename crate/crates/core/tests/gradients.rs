use fusionforge_core::mapping::{pair_alignment_gradient, pair_stress_gradient};
use fusionforge_core::rng;
use rand::Rng as _;

const STEP: f64 = 1e-6;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Central differences of `½(target − ‖anchor − x‖)²` at `x = moving`.
fn numeric(target: f64, anchor: &[f64], moving: &[f64]) -> Vec<f64> {
    let energy = |x: &[f64]| 0.5 * (target - dist(anchor, x)).powi(2);
    (0..moving.len())
        .map(|d| {
            let mut plus = moving.to_vec();
            let mut minus = moving.to_vec();
            plus[d] += STEP;
            minus[d] -= STEP;
            (energy(&plus) - energy(&minus)) / (2.0 * STEP)
        })
        .collect()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = dist(analytic, numeric);
    let scale = analytic.iter().chain(numeric).map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
    diff / scale
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = rng::seeded(99);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let s = rng.random_range(2..=10);
        let m = rng.random_range(1..=3);
        let r: Vec<Vec<f64>> = (0..s).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let reference: Vec<Vec<f64>> = (0..s).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let delta: Vec<Vec<f64>> = (0..s).map(|_| (0..s).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
        let mut g = vec![0.0; m];
        for i in 0..s {
            for j in 0..s {
                if i == j || dist(&r[i], &r[j]) <= 1e-8 {
                    continue;
                }
                pair_stress_gradient(delta[i][j], &r[i], &r[j], &mut g).unwrap();
                worst = worst.max(relative_error(&g, &numeric(delta[i][j], &r[i], &r[j])));

                let dbar = dist(&reference[i], &reference[j]);
                if dist(&reference[i], &r[j]) > 1e-8 {
                    pair_alignment_gradient(dbar, &reference[i], &r[j], &mut g).unwrap();
                    worst = worst.max(relative_error(&g, &numeric(dbar, &reference[i], &r[j])));
                }
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn coincident_points_have_no_gradient() {
    let mut g = [0.0; 2];
    assert!(pair_stress_gradient(1.0, &[0.5, 0.5], &[0.5, 0.5], &mut g).is_none());
    assert!(pair_alignment_gradient(1.0, &[0.5, 0.5], &[0.5, 0.5], &mut g).is_none());
}
