//! The vMF toy problem: a uniform prior on S^d and observations drawn from a
//! von Mises-Fisher distribution centred on the parameter (κ = 20), whose
//! exact posterior is vMF(x, κ).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::density::{compose_posterior, Flat, VonMisesFisher};
use crate::diagnostics::{frechet_mean_distance, mmd_linear, MmdReport};
use crate::error::{Error, Result, StageExt};
use crate::manifold::{sample_sphere, ManifoldPoint, ManifoldSpec};
use crate::mcmc::{geodesic_hmc, SampleBatch, SamplerConfig};
use crate::nre::{train_ratio, ObservedRatio, RatioEnsemble, RatioModel, Simulator, TrainConfig};
use crate::rng::{derive_seed, indexed_seed, rng_from_seed, Rng};

pub const TOY_KAPPA: f64 = 20.0;

#[derive(Clone, Debug)]
pub struct VmfToy {
    pub sphere_dim: usize,
    pub kappa: f64,
}

impl VmfToy {
    pub fn new(sphere_dim: usize) -> Self {
        Self {
            sphere_dim,
            kappa: TOY_KAPPA,
        }
    }

    fn ambient(&self) -> usize {
        self.sphere_dim + 1
    }

    /// Analytic log-likelihood up to its θ-independent normalizer: κ θᵀx.
    pub fn log_likelihood_kernel(&self, theta: &[f64], obs: &[f64]) -> f64 {
        self.kappa * theta.iter().zip(obs).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Exact posterior for an observation.
    pub fn posterior(&self, obs: &[f64]) -> VonMisesFisher {
        VonMisesFisher::new(obs.to_vec(), self.kappa).expect("observation is a unit vector")
    }
}

impl Simulator for VmfToy {
    fn theta_dim(&self) -> usize {
        self.ambient()
    }

    fn obs_dim(&self) -> usize {
        self.ambient()
    }

    fn sample_prior(&self, rng: &mut Rng, theta: &mut [f64]) {
        sample_sphere(theta, rng);
    }

    fn simulate(&self, theta: &[f64], rng: &mut Rng, obs: &mut [f64]) {
        // renormalize: prior draws are unit only to rounding
        let n = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mean: Vec<f64> = theta.iter().map(|v| v / n).collect();
        VonMisesFisher::new(mean, self.kappa)
            .expect("unit mean")
            .sample_into(obs, rng);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub sphere_dim: usize,
    pub kappa: f64,
    pub observations: usize,
    /// i.i.d. draws from the exact posterior per observation.
    pub oracle_draws: usize,
    /// Points on the density table's great circle.
    pub grid_points: usize,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Not read from config files; runs derive it from their global seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            sphere_dim: 1,
            kappa: TOY_KAPPA,
            observations: 10,
            oracle_draws: 100_000,
            grid_points: 360,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sphere_dim == 0 {
            return Err(Error::Config("sphere_dim must be at least 1".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Config("kappa must be positive".into()));
        }
        if self.observations == 0 || self.oracle_draws == 0 || self.grid_points < 2 {
            return Err(Error::Config(
                "observations and oracle_draws must be positive, grid_points at least 2".into(),
            ));
        }
        self.train.validate()?;
        self.sampler.validate()
    }
}

#[derive(Clone, Debug)]
pub struct ToyObservation {
    pub observation: Vec<f64>,
    pub mmd: MmdReport,
    /// Geodesic distance between the Fréchet means of the two sample sets.
    pub frechet_distance: f64,
    pub batch: SampleBatch,
}

#[derive(Clone, Debug)]
pub struct ToyReport {
    pub config: ToyConfig,
    pub model: RatioModel,
    pub runs: Vec<ToyObservation>,
    /// `[angle, coordinates.., exact, approximate]` rows; densities are log
    /// densities relative to the uniform prior.
    pub density_table: Vec<Vec<f64>>,
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

impl ToyReport {
    pub fn untrained(&self) -> bool {
        !self.model.is_trained()
    }

    pub fn mmd_mean_stderr(&self) -> (f64, f64) {
        mean_stderr(&self.runs.iter().map(|r| r.mmd.mmd).collect::<Vec<_>>())
    }

    pub fn frechet_mean_stderr(&self) -> (f64, f64) {
        mean_stderr(
            &self
                .runs
                .iter()
                .map(|r| r.frechet_distance)
                .collect::<Vec<_>>(),
        )
    }

    pub fn summary(&self) -> Vec<(String, String)> {
        let (m, s) = self.mmd_mean_stderr();
        let (fm, fs) = self.frechet_mean_stderr();
        let mut kv = vec![
            ("sphere_dim".to_string(), self.config.sphere_dim.to_string()),
            (
                "status".into(),
                if self.untrained() {
                    "untrained"
                } else {
                    "trained"
                }
                .into(),
            ),
            (
                "final_loss".into(),
                self.model
                    .final_loss()
                    .map_or("none".into(), |l| l.to_string()),
            ),
            ("mmd_mean".into(), m.to_string()),
            ("mmd_stderr".into(), s.to_string()),
            (
                "mmd_squared_mean".into(),
                mean_stderr(
                    &self
                        .runs
                        .iter()
                        .map(|r| r.mmd.mmd_squared)
                        .collect::<Vec<_>>(),
                )
                .0
                .to_string(),
            ),
            ("frechet_distance_mean".into(), fm.to_string()),
            ("frechet_distance_stderr".into(), fs.to_string()),
        ];
        for (i, r) in self.runs.iter().enumerate() {
            kv.push((format!("obs{i}_mmd"), r.mmd.mmd.to_string()));
            kv.push((
                format!("obs{i}_frechet_distance"),
                r.frechet_distance.to_string(),
            ));
            kv.push((
                format!("obs{i}_mean_acceptance"),
                r.batch.mean_acceptance().to_string(),
            ));
        }
        kv
    }
}

/// `log E_u[exp(κ μᵀu)]` for `u` uniform on S^d, by quadrature over the
/// polar angle (density ∝ sin^(d-1) φ).
pub fn log_uniform_mgf(kappa: f64, sphere_dim: usize) -> f64 {
    let n = 20_000;
    let h = std::f64::consts::PI / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let phi = i as f64 * h;
        // Simpson weights
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let s = phi.sin().powi(sphere_dim as i32 - 1);
        num += w * s * (kappa * (phi.cos() - 1.0)).exp();
        den += w * s;
    }
    kappa + (num / den).ln()
}

/// Trains one ratio model on the toy simulator (unless one is supplied),
/// then samples and scores the approximate posterior for random observations.
pub fn run_toy_vmf(config: &ToyConfig, model: Option<RatioModel>) -> Result<ToyReport> {
    config.validate()?;
    let toy = VmfToy {
        sphere_dim: config.sphere_dim,
        kappa: config.kappa,
    };
    let spec = ManifoldSpec::sphere(config.sphere_dim)?;
    let m = spec.ambient_dim();
    let model = match model {
        Some(model) => {
            if model.theta_dim() != m || model.obs_dim() != m {
                return Err(Error::dims(
                    "toy ratio model input",
                    2 * m,
                    model.theta_dim() + model.obs_dim(),
                ));
            }
            model
        }
        None => {
            let train = TrainConfig {
                seed: derive_seed(config.seed, "train"),
                ..config.train.clone()
            };
            train_ratio(&toy, &train).stage("training")?
        }
    };
    let ensemble = Arc::new(RatioEnsemble::single(model.clone()));

    let mut obs_rng = rng_from_seed(derive_seed(config.seed, "observations"));
    let observations: Vec<Vec<f64>> = (0..config.observations)
        .map(|_| {
            let mut x = vec![0.0; m];
            sample_sphere(&mut x, &mut obs_rng);
            x
        })
        .collect();

    let mut runs = Vec::with_capacity(observations.len());
    for (j, x) in observations.iter().enumerate() {
        let ratio =
            ObservedRatio::new(ensemble.clone(), x.clone(), spec.clone()).stage("posterior")?;
        let posterior = compose_posterior(ratio, Flat::uniform(spec.clone())).stage("posterior")?;
        let mut init_rng = rng_from_seed(indexed_seed(derive_seed(config.seed, "init"), j as u64));
        let init: Vec<ManifoldPoint> = (0..config.sampler.chains)
            .map(|_| {
                let mut p = vec![0.0; m];
                sample_sphere(&mut p, &mut init_rng);
                ManifoldPoint::from_coords_unchecked(p)
            })
            .collect();
        let sampler = SamplerConfig {
            seed: indexed_seed(derive_seed(config.seed, "chains"), j as u64),
            ..config.sampler.clone()
        };
        let batch = geodesic_hmc(&posterior, &init, &sampler).stage("sampling")?;
        let mut oracle_rng =
            rng_from_seed(indexed_seed(derive_seed(config.seed, "oracle"), j as u64));
        let mut oracle = vec![0.0; config.oracle_draws * m];
        let exact = toy.posterior(x);
        for row in oracle.chunks_exact_mut(m) {
            exact.sample_into(row, &mut oracle_rng);
        }
        let mmd = mmd_linear(batch.draws(), &oracle, m).stage("diagnostics")?;
        let frechet_distance =
            frechet_mean_distance(batch.draws(), &oracle, m).stage("diagnostics")?;
        runs.push(ToyObservation {
            observation: x.clone(),
            mmd,
            frechet_distance,
            batch,
        });
    }

    let density_table = density_table(&toy, &model, &observations[0], config)?;
    Ok(ToyReport {
        config: config.clone(),
        model,
        runs,
        density_table,
    })
}

/// Exact and learned log densities (relative to the uniform prior) along the
/// great circle through `x` and a fixed orthogonal direction. The learned
/// density is normalized by Monte Carlo over uniform draws.
fn density_table(
    toy: &VmfToy,
    model: &RatioModel,
    x: &[f64],
    config: &ToyConfig,
) -> Result<Vec<Vec<f64>>> {
    let m = x.len();
    // orthogonal direction: Gram-Schmidt on the basis vector least aligned with x
    let k = (0..m)
        .min_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs()))
        .unwrap_or(0);
    let mut e: Vec<f64> = x.iter().map(|v| -v * x[k]).collect();
    e[k] += 1.0;
    let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    e.iter_mut().for_each(|v| *v /= en);

    let draws = 100_000;
    let mut rng = rng_from_seed(derive_seed(config.seed, "normalizer"));
    let mut thetas = vec![0.0; draws * m];
    for row in thetas.chunks_exact_mut(m) {
        sample_sphere(row, &mut rng);
    }
    let obs: Vec<f64> = x.iter().copied().cycle().take(draws * m).collect();
    let logits = model.logits(&thetas, &obs);
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = top + (logits.iter().map(|l| (l - top).exp()).sum::<f64>() / draws as f64).ln();
    let exact_log_z = log_uniform_mgf(toy.kappa, toy.sphere_dim);

    let n = config.grid_points;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let angle = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        let (s, c) = angle.sin_cos();
        let theta: Vec<f64> = x.iter().zip(&e).map(|(a, b)| c * a + s * b).collect();
        let exact = toy.log_likelihood_kernel(&theta, x) - exact_log_z;
        let approx = model.logit(&theta, x)? - log_z;
        let mut row = vec![angle];
        row.extend(&theta);
        row.extend([exact, approx]);
        rows.push(row);
    }
    Ok(rows)
}

/// Header for [`ToyReport::density_table`].
pub fn density_table_header(ambient: usize) -> Vec<String> {
    let mut h = vec!["angle".to_string()];
    h.extend((0..ambient).map(|i| format!("theta_{i}")));
    h.extend([
        "exact_log_density".to_string(),
        "approx_log_density".to_string(),
    ]);
    h
}
