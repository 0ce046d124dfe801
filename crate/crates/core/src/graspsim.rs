//! Synthetic grasp outcomes and the end-to-end grasp inference pipeline.
//!
//! The outcome model is a hand-made stand-in for a physics simulator:
//!
//! ```text
//! p(S=1 | h) = (1 - p_slip) · exp(-d²/2σ_d²) · ((1 + cos 2(θ - θ_obj))/2)^β · collide
//! ```
//!
//! where `d` is the distance from the hand position to the centre of the
//! nearest primitive, `θ_obj` that primitive's principal axis angle and
//! `collide` is 0 when the hand is closer than `m_col` to any other primitive.
//! The `cos 2θ` form makes the gripper symmetric under half turns.

use std::f64::consts::TAU;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::density::{compose_posterior, LogDensity, Posterior};
use crate::diagnostics::{circular_two_means, resultant_length, CircularClustering};
use crate::error::{Error, Result, StageExt};
use crate::manifold::{ManifoldPoint, ManifoldSpec};
use crate::map_opt::{map_multistart, AscentConfig, MultiStartResult, StartPool};
use crate::mcmc::{geodesic_hmc, SampleBatch, SamplerConfig};
use crate::nre::{train_ensemble, ObservedRatio, RatioEnsemble, TrainConfig, TrainingSet};
use crate::rng::{derive_seed, indexed_seed, rng_from_seed, Rng};
use crate::scene::{hand_prior, sample_position_prior, HandPrior, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraspOutcomeModel {
    /// Distance scale σ_d of the position factor.
    pub sigma_d: f64,
    /// Alignment sharpness β.
    pub beta: f64,
    pub p_slip: f64,
    /// Collision margin m_col.
    pub m_col: f64,
}

impl Default for GraspOutcomeModel {
    fn default() -> Self {
        Self {
            sigma_d: 0.05,
            beta: 4.0,
            p_slip: 0.05,
            m_col: 0.08,
        }
    }
}

impl GraspOutcomeModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_d > 0.0) || !(self.beta >= 0.0) || !(self.m_col >= 0.0) {
            return Err(Error::Config(
                "sigma_d must be positive, beta and m_col non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.p_slip) {
            return Err(Error::Config("p_slip must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Best attainable success probability.
    pub fn optimum(&self) -> f64 {
        1.0 - self.p_slip
    }
}

/// Primitive whose centre is closest to `x` (first on ties).
pub fn nearest_center(scene: &Scene, x: &[f64]) -> Option<usize> {
    scene
        .primitives()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d2: f64 = p.center.iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
            (i, d2)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

/// `cos 2(θ - φ)` for `q = (cos θ, sin θ)`.
fn cos_double_gap(q: &[f64], phi: f64) -> f64 {
    let (s2, c2) = (2.0 * phi).sin_cos();
    (q[0] * q[0] - q[1] * q[1]) * c2 + 2.0 * q[0] * q[1] * s2
}

fn collides(model: &GraspOutcomeModel, scene: &Scene, x: &[f64], near: usize) -> bool {
    let mut g = vec![0.0; x.len()];
    scene
        .primitives()
        .iter()
        .enumerate()
        .any(|(j, p)| j != near && p.sdf(x, &mut g) < model.m_col)
}

/// Ground-truth `p(S=1 | h)` for `h = (x, q)` on R^n x S¹.
pub fn success_probability(model: &GraspOutcomeModel, scene: &Scene, h: &[f64]) -> f64 {
    let n = scene.dim();
    let (x, q) = (&h[..n], &h[n..n + 2]);
    let Some(near) = nearest_center(scene, x) else {
        return 0.0;
    };
    if collides(model, scene, x, near) {
        return 0.0;
    }
    let p = &scene.primitives()[near];
    let d2: f64 = p.center.iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
    let align = ((1.0 + cos_double_gap(q, p.angle)) / 2.0).clamp(0.0, 1.0);
    let align = if model.beta == 0.0 {
        1.0
    } else {
        align.powf(model.beta)
    };
    (1.0 - model.p_slip) * (-d2 / (2.0 * model.sigma_d * model.sigma_d)).exp() * align
}

/// Bernoulli draw with the ground-truth success probability.
pub fn simulate_grasp(model: &GraspOutcomeModel, scene: &Scene, h: &[f64], rng: &mut Rng) -> bool {
    let p = success_probability(model, scene, h);
    rng.random::<f64>() < p
}

/// Analytic `log p(S=1 | h)` as a density on R^n x S¹. The gradient ignores
/// the collision indicator, which is piecewise constant.
#[derive(Clone, Debug)]
pub struct GraspLikelihood {
    model: GraspOutcomeModel,
    scene: Scene,
    spec: ManifoldSpec,
}

impl GraspLikelihood {
    pub fn new(model: GraspOutcomeModel, scene: Scene) -> Self {
        let spec = ManifoldSpec::hand(scene.dim()).expect("2-D or 3-D");
        Self { model, scene, spec }
    }
}

impl LogDensity for GraspLikelihood {
    fn manifold(&self) -> &ManifoldSpec {
        &self.spec
    }

    fn evaluate(&self, h: &[f64], gradient: &mut [f64]) -> f64 {
        let n = self.scene.dim();
        gradient.iter_mut().for_each(|g| *g = 0.0);
        let (x, q) = (&h[..n], &h[n..n + 2]);
        let Some(near) = nearest_center(&self.scene, x) else {
            return f64::NEG_INFINITY;
        };
        if collides(&self.model, &self.scene, x, near) {
            return f64::NEG_INFINITY;
        }
        let p = &self.scene.primitives()[near];
        let s2 = self.model.sigma_d * self.model.sigma_d;
        let mut value = (1.0 - self.model.p_slip).ln();
        for i in 0..n {
            let diff = x[i] - p.center[i];
            value -= diff * diff / (2.0 * s2);
            gradient[i] = -diff / s2;
        }
        if self.model.beta != 0.0 {
            let c = cos_double_gap(q, p.angle);
            let base = (1.0 + c) / 2.0;
            if base <= 0.0 {
                gradient.iter_mut().for_each(|g| *g = 0.0);
                return f64::NEG_INFINITY;
            }
            value += self.model.beta * base.ln();
            let (sn, cs) = (2.0 * p.angle).sin_cos();
            let dc = [
                2.0 * q[0] * cs + 2.0 * q[1] * sn,
                -2.0 * q[1] * cs + 2.0 * q[0] * sn,
            ];
            let k = self.model.beta / (2.0 * base);
            gradient[n] = k * dc[0];
            gradient[n + 1] = k * dc[1];
        }
        value
    }
}

/// Hand configurations drawn from the hand prior: positions resampled from
/// `position_draws` (rows of width `n`), orientations uniform on the circle,
/// each with a simulated grasp outcome. Draw `i` uses its own stream.
pub fn grasp_training_set(
    model: &GraspOutcomeModel,
    scene: &Scene,
    position_draws: &[f64],
    count: usize,
    seed: u64,
) -> Result<TrainingSet> {
    let n = scene.dim();
    let pool = position_draws.len() / n;
    if pool == 0 {
        return Err(Error::Contract(
            "no position draws to build training pairs from".into(),
        ));
    }
    let mut theta = vec![0.0; count * (n + 2)];
    let mut obs = vec![0.0; count];
    for (i, (h, s)) in theta
        .chunks_exact_mut(n + 2)
        .zip(obs.iter_mut())
        .enumerate()
    {
        let mut rng = rng_from_seed(indexed_seed(seed, i as u64));
        let k = rng.random_range(0..pool);
        h[..n].copy_from_slice(&position_draws[k * n..(k + 1) * n]);
        let t: f64 = rng.random_range(0.0..TAU);
        h[n] = t.cos();
        h[n + 1] = t.sin();
        *s = if simulate_grasp(model, scene, h, &mut rng) {
            1.0
        } else {
            0.0
        };
    }
    TrainingSet::new(n + 2, 1, theta, obs)
}

/// Training pairs as CSV: hand coordinates, outcome and scene id.
pub fn write_training_csv(path: &Path, data: &TrainingSet, scene_id: &str) -> Result<()> {
    use std::fmt::Write as _;
    let spec = ManifoldSpec::hand(data.theta_dim - 2)?;
    let mut out = spec.coordinate_names().join(",");
    out.push_str(",success,scene\n");
    for i in 0..data.len() {
        for v in data.theta_row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{scene_id}", data.obs_row(i)[0]);
    }
    crate::io::write_file(path, &out)
}

/// Reads a training CSV written by [`write_training_csv`].
pub fn read_training_csv(path: &Path) -> Result<(TrainingSet, String)> {
    let text = crate::io::read_file(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let width = r.headers()?.len();
    if width < 5 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "expected hand coordinates, success and scene columns".into(),
        });
    }
    let hd = width - 2;
    let (mut theta, mut obs, mut scene_id) = (Vec::new(), Vec::new(), String::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |f: &str| Error::Parse {
            path: path.display().to_string(),
            line: i + 2,
            message: format!("not a number: {f:?}"),
        };
        for f in rec.iter().take(hd + 1) {
            let v: f64 = f.parse().map_err(|_| bad(f))?;
            if theta.len() < (i + 1) * hd {
                theta.push(v);
            } else {
                obs.push(v);
            }
        }
        scene_id = rec.get(hd + 1).unwrap_or_default().to_string();
    }
    Ok((TrainingSet::new(hd, 1, theta, obs)?, scene_id))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: GraspOutcomeModel,
    /// Position-prior sampler that supplies training and initial hand positions.
    pub prior_sampler: SamplerConfig,
    pub train: TrainConfig,
    pub members: usize,
    pub sampler: SamplerConfig,
    pub ascent: AscentConfig,
    /// Mean acceptance below this flags the run.
    pub min_acceptance: f64,
    /// Not read from config files; runs derive it from their global seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: GraspOutcomeModel::default(),
            prior_sampler: SamplerConfig {
                chains: 20,
                transitions: 1100,
                burn_in: 100,
                ..SamplerConfig::default()
            },
            train: TrainConfig {
                sample_count: 100_000,
                batch_size: 500,
                epochs: 20,
                hidden: vec![32, 32, 32],
                ..TrainConfig::default()
            },
            members: 6,
            sampler: SamplerConfig {
                chains: 50,
                transitions: 1000,
                burn_in: 500,
                ..SamplerConfig::default()
            },
            ascent: AscentConfig::default(),
            min_acceptance: 0.1,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prior_sampler.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.ascent.validate()?;
        if self.members == 0 {
            return Err(Error::Config("members must be at least 1".into()));
        }
        Ok(())
    }

    /// Stage configs with seeds derived from the global seed.
    fn seeded(&self) -> (SamplerConfig, TrainConfig, SamplerConfig, AscentConfig) {
        (
            SamplerConfig {
                seed: derive_seed(self.seed, "prior"),
                ..self.prior_sampler.clone()
            },
            TrainConfig {
                seed: derive_seed(self.seed, "train"),
                ..self.train.clone()
            },
            SamplerConfig {
                seed: derive_seed(self.seed, "chains"),
                ..self.sampler.clone()
            },
            AscentConfig {
                seed: derive_seed(self.seed, "map"),
                ..self.ascent.clone()
            },
        )
    }
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub map_point: ManifoldPoint,
    pub map_log_density: f64,
    /// Ground-truth success probability at the MAP.
    pub success_probability: f64,
    pub optimum: f64,
    pub prior_draws: SampleBatch,
    pub posterior: SampleBatch,
    pub ensemble: Arc<RatioEnsemble>,
    pub training_positive_rate: f64,
    pub low_acceptance: bool,
    pub orientation_resultant: f64,
    pub orientation_clusters: Option<CircularClustering>,
    pub stage_seconds: Vec<(&'static str, f64)>,
}

impl PipelineReport {
    pub fn mean_acceptance(&self) -> f64 {
        self.posterior.mean_acceptance()
    }

    /// Orientation angles of the posterior draws, in radians.
    pub fn orientation_angles(&self) -> Vec<f64> {
        let n = self.posterior.dim() - 2;
        self.posterior
            .rows()
            .map(|r| r[n + 1].atan2(r[n]))
            .collect()
    }

    /// Histogram of posterior orientation angles over `bins` equal bins of
    /// `[-pi, pi)`: `(bin centre, fraction)`.
    pub fn orientation_histogram(&self, bins: usize) -> Vec<(f64, f64)> {
        let angles = self.orientation_angles();
        let mut counts = vec![0usize; bins];
        for a in &angles {
            let k = (((a + std::f64::consts::PI) / TAU) * bins as f64).floor() as usize;
            counts[k.min(bins - 1)] += 1;
        }
        counts
            .iter()
            .enumerate()
            .map(|(k, c)| {
                (
                    -std::f64::consts::PI + (k as f64 + 0.5) * TAU / bins as f64,
                    *c as f64 / angles.len() as f64,
                )
            })
            .collect()
    }

    pub fn summary(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            (
                "map_point".to_string(),
                self.map_point
                    .coords()
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
            ("map_log_density".into(), self.map_log_density.to_string()),
            (
                "success_probability".into(),
                self.success_probability.to_string(),
            ),
            ("optimum".into(), self.optimum.to_string()),
            ("mean_acceptance".into(), self.mean_acceptance().to_string()),
            ("low_acceptance".into(), self.low_acceptance.to_string()),
            (
                "training_positive_rate".into(),
                self.training_positive_rate.to_string(),
            ),
            (
                "orientation_resultant".into(),
                self.orientation_resultant.to_string(),
            ),
        ];
        if let Some(c) = &self.orientation_clusters {
            kv.push(("orientation_silhouette".into(), c.silhouette.to_string()));
            kv.push(("orientation_separation".into(), c.separation().to_string()));
        }
        let losses: Vec<String> = self
            .ensemble
            .members()
            .iter()
            .map(|m| m.final_loss().map_or("none".into(), |l| l.to_string()))
            .collect();
        kv.push(("member_final_loss".into(), losses.join(" ")));
        kv
    }
}

/// Posterior over hand configurations given a successful grasp.
pub fn grasp_posterior(
    scene: &Scene,
    ensemble: Arc<RatioEnsemble>,
) -> Result<Posterior<ObservedRatio, HandPrior>> {
    let prior = hand_prior(scene);
    let ratio = ObservedRatio::new(ensemble, vec![1.0], prior.manifold().clone())?;
    compose_posterior(ratio, prior)
}

/// Position-prior draws and the grasp training set built on them.
pub fn grasp_training_data(
    scene: &Scene,
    config: &PipelineConfig,
) -> Result<(SampleBatch, TrainingSet)> {
    config.validate()?;
    let (prior_cfg, train_cfg, _, _) = config.seeded();
    let prior_draws = sample_position_prior(scene, &prior_cfg).stage("position prior")?;
    let data = grasp_training_set(
        &config.model,
        scene,
        prior_draws.draws(),
        train_cfg.sample_count,
        derive_seed(config.seed, "sim"),
    )
    .stage("simulation")?;
    Ok((prior_draws, data))
}

/// Trains the ratio ensemble on a grasp training set.
pub fn train_grasp_ensemble(data: &TrainingSet, config: &PipelineConfig) -> Result<RatioEnsemble> {
    let (_, train_cfg, _, _) = config.seeded();
    train_ensemble(data, &train_cfg, config.members).stage("training")
}

/// Geodesic HMC on the grasp posterior, chains started from prior draws.
pub fn sample_grasp_posterior(
    scene: &Scene,
    ensemble: Arc<RatioEnsemble>,
    prior_draws: &SampleBatch,
    config: &PipelineConfig,
) -> Result<SampleBatch> {
    let (_, _, sampler_cfg, _) = config.seeded();
    let posterior = grasp_posterior(scene, ensemble).stage("posterior")?;
    let init = initial_hands(
        &posterior,
        prior_draws,
        sampler_cfg.chains,
        derive_seed(config.seed, "init"),
    )
    .stage("posterior sampling")?;
    geodesic_hmc(&posterior, &init, &sampler_cfg).stage("posterior sampling")
}

/// Multi-start MAP from the highest-density rows of `pool`.
pub fn grasp_map(
    scene: &Scene,
    ensemble: Arc<RatioEnsemble>,
    pool: &[f64],
    config: &PipelineConfig,
) -> Result<MultiStartResult> {
    let (_, _, _, ascent_cfg) = config.seeded();
    let posterior = grasp_posterior(scene, ensemble).stage("posterior")?;
    map_multistart(&posterior, &ascent_cfg, StartPool::Rows(pool)).stage("map")
}

/// Prior draws -> simulated outcomes -> ratio ensemble -> geodesic HMC on the
/// posterior given success -> multi-start MAP -> ground-truth evaluation.
/// A supplied ensemble skips training.
pub fn end_to_end_pipeline(
    scene: &Scene,
    config: &PipelineConfig,
    ensemble: Option<Arc<RatioEnsemble>>,
) -> Result<PipelineReport> {
    config.validate()?;
    let n = scene.dim();
    let mut times = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, times: &mut Vec<(&'static str, f64)>| {
        times.push((name, clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let (prior_draws, data) = grasp_training_data(scene, config)?;
    let positive = data.obs.iter().sum::<f64>() / data.len() as f64;
    lap("simulation", &mut times);

    let ensemble = match ensemble {
        Some(e) => e,
        None => Arc::new(train_grasp_ensemble(&data, config)?),
    };
    lap("training", &mut times);

    let batch = sample_grasp_posterior(scene, ensemble.clone(), &prior_draws, config)?;
    lap("posterior sampling", &mut times);

    let map = grasp_map(scene, ensemble.clone(), batch.draws(), config)?;
    lap("map", &mut times);

    let success = success_probability(&config.model, scene, map.best.point.coords());
    let q: Vec<f64> = batch.rows().flat_map(|r| [r[n], r[n + 1]]).collect();
    Ok(PipelineReport {
        map_point: map.best.point.clone(),
        map_log_density: map.best.value,
        success_probability: success,
        optimum: config.model.optimum(),
        low_acceptance: batch.mean_acceptance() < config.min_acceptance,
        orientation_resultant: resultant_length(&q, 2),
        orientation_clusters: circular_two_means(&q).ok(),
        prior_draws,
        posterior: batch,
        ensemble,
        training_positive_rate: positive,
        stage_seconds: times,
    })
}

/// Candidate hands drawn per chain start.
const INIT_CANDIDATES_PER_CHAIN: usize = 20;

/// Chain starts by sampling-importance-resampling: candidate hands pair
/// resampled prior positions with uniform orientations, and starts are drawn
/// from them with weights proportional to the ratio.
pub fn initial_hands(
    posterior: &Posterior<ObservedRatio, HandPrior>,
    draws: &SampleBatch,
    chains: usize,
    seed: u64,
) -> Result<Vec<ManifoldPoint>> {
    let n = posterior.prior().scene().dim();
    let d = n + 2;
    let rows: Vec<&[f64]> = draws.rows().collect();
    if rows.is_empty() {
        return Err(Error::Initialization(
            "no prior draws to start chains from".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let count = chains * INIT_CANDIDATES_PER_CHAIN;
    let mut candidates = Vec::with_capacity(count * d);
    for _ in 0..count {
        let x = rows[rng.random_range(0..rows.len())];
        let t: f64 = rng.random_range(0.0..TAU);
        candidates.extend_from_slice(&x[..n]);
        candidates.extend([t.cos(), t.sin()]);
    }
    let mut log_r = vec![0.0; count];
    let mut grads = vec![0.0; count * d];
    posterior
        .ratio()
        .evaluate_batch(&candidates, &mut log_r, &mut grads);
    let top = log_r
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_r
        .iter()
        .map(|&v| if v.is_finite() { (v - top).exp() } else { 0.0 })
        .collect();
    let pick = WeightedIndex::new(&weights).map_err(|_| {
        Error::Initialization("the ratio is not finite at any candidate start".into())
    })?;
    Ok((0..chains)
        .map(|_| {
            let i = pick.sample(&mut rng);
            ManifoldPoint::from_coords_unchecked(candidates[i * d..(i + 1) * d].to_vec())
        })
        .collect())
}

/// Random single-object scene in the unit square: a disk, box or capsule
/// with random size and orientation, centred in `[0.3, 0.7]²`.
pub fn random_single_object_scene(rng: &mut Rng) -> Scene {
    use crate::scene::{Primitive, Shape};
    let center = vec![rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let shape = match rng.random_range(0..3) {
        0 => Shape::Disk {
            radius: rng.random_range(0.06..0.15),
        },
        1 => Shape::Box {
            half: vec![rng.random_range(0.06..0.15), rng.random_range(0.03..0.06)],
        },
        _ => Shape::Capsule {
            half_length: rng.random_range(0.05..0.12),
            radius: rng.random_range(0.03..0.06),
        },
    };
    Scene::new(
        crate::manifold::BoxBounds::unit(2),
        vec![Primitive {
            shape,
            center,
            angle,
        }],
        crate::scene::DEFAULT_TEMPERATURE,
    )
    .expect("center inside the unit square")
}
