mod common;

use std::path::PathBuf;

use common::assert_gradient;
use geosbi::density::LogDensity;
use geosbi::diagnostics::{histogram, histogram_mode};
use geosbi::manifold::BoxBounds;
use geosbi::mcmc::SamplerConfig;
use geosbi::rng::rng_from_seed;
use geosbi::scene::{hand_prior, primitive_mass, random_orientation, sample_position_prior, Scene};
use rand::Rng;

fn fixture(name: &str) -> Scene {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name);
    Scene::load(&path).unwrap()
}

fn sampler(chains: usize, transitions: usize, burn_in: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        chains,
        transitions,
        burn_in,
        seed,
        ..SamplerConfig::default()
    }
}

#[test]
fn single_disk_draws_are_occupied_and_centred() {
    let scene = fixture("single_disk.scene");
    let batch = sample_position_prior(&scene, &sampler(100, 1500, 500, 1)).unwrap();
    let occupied = batch.rows().filter(|x| scene.occupancy(x) >= 0.5).count();
    assert!(
        occupied as f64 >= 0.99 * batch.len() as f64,
        "{occupied} of {}",
        batch.len()
    );
    for k in 0..2 {
        let v: Vec<f64> = batch.rows().map(|r| r[k]).collect();
        let mode = histogram_mode(&histogram(&v, 0.0, 1.0, 50)).unwrap();
        assert!((mode - 0.5).abs() <= 0.02, "axis {k} mode {mode}");
    }
    assert!(batch.rows().all(|x| scene.workspace().contains(x)));
}

#[test]
fn five_objects_mass_covers_four_primitives() {
    let scene = fixture("five_objects.scene");
    let batch = sample_position_prior(&scene, &sampler(100, 2000, 500, 2)).unwrap();
    let (mass, outside) = primitive_mass(&scene, batch.draws());
    assert_eq!(outside, 0.0);
    let covered = mass.iter().filter(|&&m| m >= 0.02).count();
    assert!(covered >= 4, "{mass:?}");
}

#[test]
fn empty_scene_draws_are_uniform_over_the_box() {
    let scene = Scene::new(BoxBounds::unit(2), Vec::new(), 0.01).unwrap();
    let mut config = sampler(50, 3000, 200, 3);
    config.step_size = 0.02;
    let batch = sample_position_prior(&scene, &config).unwrap();
    for k in 0..2 {
        let m = batch.rows().map(|r| r[k]).sum::<f64>() / batch.len() as f64;
        assert!((m - 0.5).abs() <= 0.02, "axis {k} mean {m}");
    }
    assert!(batch.rows().all(|x| scene.workspace().contains(x)));
}

#[test]
fn hand_prior_gradient_and_orientation_invariance() {
    let scene = fixture("five_objects.scene");
    let prior = hand_prior(&scene);
    let mut rng = rng_from_seed(4);
    for _ in 0..100 {
        let q = random_orientation(&mut rng);
        let h = [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            q[0],
            q[1],
        ];
        assert_gradient(|x: &[f64], g: &mut [f64]| prior.evaluate(x, g), &h);
        let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let rotated = [
            h[0],
            h[1],
            t.cos() * q[0] - t.sin() * q[1],
            t.sin() * q[0] + t.cos() * q[1],
        ];
        assert_eq!(prior.value(&h), prior.value(&rotated));
    }
}
