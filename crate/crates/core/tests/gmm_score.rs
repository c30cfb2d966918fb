use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sow_core::denoiser::{ConditionVector, DenoiserModel, GaussianMixtureDenoiser};
use sow_core::schedule::NoiseSchedule;
use sow_core::LatentGrid;

/// `log p_t(x)` of the noised mixture, written out directly.
fn log_density(weights: &[f64], means: &[Vec<f64>], vars: &[f64], ab: f64, x: &[f64]) -> f64 {
    let terms: Vec<f64> = weights
        .iter()
        .zip(means)
        .zip(vars)
        .map(|((w, m), v)| {
            let var = ab * v + 1.0 - ab;
            let sq: f64 = x.iter().zip(m).map(|(xi, mi)| (xi - ab.sqrt() * mi).powi(2)).sum();
            w.ln() - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn fd_score(weights: &[f64], means: &[Vec<f64>], vars: &[f64], ab: f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let (mut up, mut down) = (x.to_vec(), x.to_vec());
            up[i] += h;
            down[i] -= h;
            (log_density(weights, means, vars, ab, &up) - log_density(weights, means, vars, ab, &down)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn epsilon_matches_finite_difference_score() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let means: Vec<LatentGrid> = (0..3).map(|_| LatentGrid::standard_normal(1, 2, 3, &mut rng)).collect();
    let weights = vec![0.2, 0.5, 0.3];
    let vars = vec![0.3, 1.0, 0.05];
    let model = GaussianMixtureDenoiser::new(weights.clone(), means.clone(), vars.clone()).unwrap();
    let raw_means: Vec<Vec<f64>> = means.iter().map(|m| m.iter().copied().collect()).collect();
    for t in [20, 150, 400, 700, 1000] {
        let ab = s.alpha_bar(t).unwrap();
        for _ in 0..5 {
            let x = LatentGrid::standard_normal(1, 2, 3, &mut rng);
            let eps = model.predict_eps(&s, &x, t, None).unwrap();
            let raw: Vec<f64> = x.iter().copied().collect();
            let score = fd_score(&weights, &raw_means, &vars, ab, &raw);
            for (e, sc) in eps.iter().zip(&score) {
                // eps = -sqrt(1 - ab) * score
                let expected = -(1.0 - ab).sqrt() * sc;
                assert!((e - expected).abs() < 1e-4 * (1.0 + expected.abs()), "t={t}: {e} vs {expected}");
            }
        }
    }
}

#[test]
fn class_condition_matches_single_component_score() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let means: Vec<LatentGrid> = (0..2).map(|_| LatentGrid::standard_normal(1, 2, 2, &mut rng)).collect();
    let model = GaussianMixtureDenoiser::new(vec![0.5, 0.5], means.clone(), vec![0.4, 0.4]).unwrap();
    let cond = ConditionVector::new(1, 1.0).unwrap();
    let x = LatentGrid::standard_normal(1, 2, 2, &mut rng);
    let ab = s.alpha_bar(300).unwrap();
    let eps = model.predict_eps(&s, &x, 300, Some(&cond)).unwrap();
    let raw: Vec<f64> = x.iter().copied().collect();
    let m1: Vec<f64> = means[1].iter().copied().collect();
    let score = fd_score(&[1.0], &[m1], &[0.4], ab, &raw);
    for (e, sc) in eps.iter().zip(&score) {
        let expected = -(1.0 - ab).sqrt() * sc;
        assert!((e - expected).abs() < 1e-4 * (1.0 + expected.abs()));
    }
}
