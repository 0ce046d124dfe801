//! Toy vMF training checks at a reduced budget (2·10⁵ pairs, 10 epochs of
//! batch 1000). The acceptance suite repeats them at full scale and adds
//! the circle-grid error check, which needs the full budget.

mod common;

use common::bayes_accuracy_s1;
use geosbi::manifold::sample_sphere;
use geosbi::nre::{fit_ratio, simulate_training_set, train_ratio, RatioModel, TrainConfig};
use geosbi::rng::rng_from_seed;
use geosbi::toy::VmfToy;

const KAPPA: f64 = 20.0;

fn reduced() -> TrainConfig {
    TrainConfig {
        sample_count: 200_000,
        batch_size: 1000,
        epochs: 10,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn held_out_accuracy(model: &RatioModel, n: usize, seed: u64) -> f64 {
    let toy = VmfToy::new(1);
    let data = simulate_training_set(&toy, n, seed);
    let obs_shifted: Vec<f64> = (0..n)
        .flat_map(|i| data.obs_row((i + 1) % n).to_vec())
        .collect();
    let pos = model.logits(&data.theta, &data.obs);
    let neg = model.logits(&data.theta, &obs_shifted);
    let hits = pos.iter().filter(|&&l| l > 0.0).count() + neg.iter().filter(|&&l| l <= 0.0).count();
    hits as f64 / (2 * n) as f64
}

#[test]
fn trained_toy_ratio_matches_analytic_oracles() {
    let model = train_ratio(&VmfToy::new(1), &reduced()).unwrap();
    assert!(model.is_trained());

    let acc = held_out_accuracy(&model, 100_000, 99);
    let best = bayes_accuracy_s1(KAPPA);
    assert!(
        (acc - best).abs() <= 0.02,
        "accuracy {acc}, Bayes-optimal {best}"
    );

    let mut rng = rng_from_seed(5);
    let (mut learned, mut exact) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let (mut t, mut x) = ([0.0; 2], [0.0; 2]);
        sample_sphere(&mut t, &mut rng);
        sample_sphere(&mut x, &mut rng);
        learned.push(model.logit(&t, &x).unwrap());
        exact.push(KAPPA * (t[0] * x[0] + t[1] * x[1]));
    }
    let corr = correlation(&learned, &exact);
    assert!(corr > 0.95, "correlation {corr}");
}

#[test]
fn untrained_model_is_at_chance() {
    let config = TrainConfig {
        epochs: 0,
        ..reduced()
    };
    let model = train_ratio(&VmfToy::new(1), &config).unwrap();
    assert!(!model.is_trained());
    let data = simulate_training_set(&VmfToy::new(1), 1000, 97);
    let logits = model.logits(&data.theta, &data.obs);
    assert!(
        logits.iter().all(|&l| l == logits[0]),
        "untrained logit is not constant"
    );
    let acc = held_out_accuracy(&model, 50_000, 98);
    assert!((acc - 0.5).abs() <= 0.02, "accuracy {acc}");
}

#[test]
fn training_is_deterministic() {
    let data = simulate_training_set(&VmfToy::new(3), 4000, 7);
    let config = TrainConfig {
        sample_count: 4000,
        batch_size: 500,
        epochs: 3,
        hidden: vec![16, 16],
        seed: 8,
        ..TrainConfig::default()
    };
    let a = fit_ratio(&data, &config).unwrap();
    let b = fit_ratio(&data, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_text(), b.to_text());
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}
