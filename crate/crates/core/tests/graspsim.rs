//! End-to-end grasp pipeline examples, scored against the analytic outcome
//! model.

use std::path::PathBuf;

use geosbi::graspsim::{
    end_to_end_pipeline, nearest_center, success_probability, GraspOutcomeModel, PipelineConfig,
};
use geosbi::rng::rng_from_seed;
use geosbi::scene::Scene;
use rand::Rng;

fn fixture(name: &str) -> Scene {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name);
    Scene::load(&path).unwrap()
}

/// Closer than the collision margin to a primitive other than the nearest one.
fn blocked(model: &GraspOutcomeModel, scene: &Scene, x: &[f64]) -> bool {
    let near = nearest_center(scene, x).unwrap();
    let mut g = [0.0; 2];
    scene
        .primitives()
        .iter()
        .enumerate()
        .any(|(j, p)| j != near && p.sdf(x, &mut g) < model.m_col)
}

#[test]
fn single_disk_map_reaches_the_optimum() {
    let scene = fixture("single_disk.scene");
    let config = PipelineConfig {
        seed: 11,
        ..PipelineConfig::default()
    };
    let report = end_to_end_pipeline(&scene, &config, None).unwrap();
    let optimum = config.model.optimum();
    assert_eq!(
        report.success_probability,
        success_probability(&config.model, &scene, report.map_point.coords())
    );
    assert!(
        report.success_probability >= 0.9 * optimum,
        "p(h*) = {} against optimum {optimum}",
        report.success_probability
    );
}

#[test]
fn blocked_gap_holds_little_posterior_mass() {
    let scene = fixture("blocked.scene");
    let config = PipelineConfig {
        seed: 12,
        ..PipelineConfig::default()
    };
    let model = config.model.clone();
    // the fixture must actually contain a blocked region
    let mut rng = rng_from_seed(4);
    let prior_blocked = (0..20_000)
        .filter(|_| {
            blocked(
                &model,
                &scene,
                &[rng.random_range(0.3..0.65), rng.random_range(0.4..0.6)],
            )
        })
        .count();
    assert!(prior_blocked > 0);

    let report = end_to_end_pipeline(&scene, &config, None).unwrap();
    let draws = report.posterior.draws();
    let n = draws.len() / 4;
    let inside = draws
        .chunks_exact(4)
        .filter(|h| blocked(&model, &scene, &h[..2]))
        .count();
    let fraction = inside as f64 / n as f64;
    assert!(fraction <= 0.1, "{inside} of {n} draws in the blocked gap");
}
