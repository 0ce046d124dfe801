//! Riemannian gradient ascent for MAP estimates on product manifolds.
//!
//! Each iteration projects the ambient gradient onto the tangent space and
//! moves along the exact geodesic `exp_h(α π_h(∇ log p))`. A step is kept
//! only if it increases the log density; otherwise it is halved and retried.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::LogDensity;
use crate::error::{Error, Result};
use crate::manifold::{
    geodesic_flow_in_place, norm, project_in_place, BoxBounds, ManifoldPoint, POINT_TOLERANCE,
};
use crate::mcmc::SampleBatch;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AscentConfig {
    pub initial_step: f64,
    /// The base step is multiplied by `decay` every `decay_interval` iterations.
    pub decay: f64,
    pub decay_interval: usize,
    pub max_iterations: usize,
    /// Stop once the accepted geodesic step is shorter than this.
    pub tolerance: f64,
    /// Halvings tried before an iteration gives up on improving.
    pub max_halvings: usize,
    pub restarts: usize,
    /// Not read from config files; runs derive it from their global seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            initial_step: 0.05,
            decay: 1.0,
            decay_interval: 100,
            max_iterations: 1000,
            tolerance: 1e-9,
            max_halvings: 40,
            restarts: 8,
            seed: 0,
        }
    }
}

impl AscentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::Config("initial_step must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) || self.decay_interval == 0 {
            return Err(Error::Config(
                "decay must lie in (0, 1] with a positive interval".into(),
            ));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        Ok(())
    }

    fn base_step(&self, iteration: usize) -> f64 {
        self.initial_step * self.decay.powi((iteration / self.decay_interval) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentResult {
    pub point: ManifoldPoint,
    pub value: f64,
    /// Log density of the start and of every accepted iterate.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// False when the iteration budget ran out before the step fell below tolerance.
    pub converged: bool,
}

/// Gradient ascent from `start`.
pub fn riemannian_ascent<T: LogDensity + ?Sized>(
    target: &T,
    start: &ManifoldPoint,
    config: &AscentConfig,
) -> Result<AscentResult> {
    config.validate()?;
    let spec = target.manifold();
    spec.check_coords(start.coords(), POINT_TOLERANCE)?;
    let d = spec.ambient_dim();
    let mut x = start.coords().to_vec();
    let mut grad = vec![0.0; d];
    let mut value = target.evaluate(&x, &mut grad);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Initialization(format!(
            "ascent start has log density {value} or a non-finite gradient"
        )));
    }
    project_in_place(spec, &x, &mut grad);
    let mut trace = vec![value];
    let mut trial = vec![0.0; d];
    let mut velocity = vec![0.0; d];
    let mut trial_grad = vec![0.0; d];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let gnorm = norm(&grad);
        let mut alpha = config.base_step(iterations - 1);
        if alpha * gnorm < config.tolerance {
            converged = true;
            break;
        }
        let mut improved = false;
        for _ in 0..=config.max_halvings {
            trial.copy_from_slice(&x);
            velocity
                .iter_mut()
                .zip(&grad)
                .for_each(|(v, g)| *v = alpha * g);
            geodesic_flow_in_place(spec, &mut trial, &mut velocity, 1.0);
            let v = target.evaluate(&trial, &mut trial_grad);
            if v > value && trial_grad.iter().all(|g| g.is_finite()) {
                improved = true;
                break;
            }
            alpha *= 0.5;
            if alpha * gnorm < config.tolerance {
                break;
            }
        }
        if !improved {
            converged = true;
            break;
        }
        x.copy_from_slice(&trial);
        value = target.evaluate(&x, &mut grad);
        project_in_place(spec, &x, &mut grad);
        trace.push(value);
        if alpha * gnorm < config.tolerance {
            converged = true;
            break;
        }
    }
    Ok(AscentResult {
        point: ManifoldPoint::from_coords_unchecked(x),
        value,
        trace,
        iterations,
        converged,
    })
}

/// Where multi-start ascents begin.
pub enum StartPool<'a> {
    /// The highest-density rows of a sample set.
    Draws(&'a SampleBatch),
    /// The highest-density rows of a row-major candidate matrix.
    Rows(&'a [f64]),
    /// Uniform draws; one box per Euclidean block.
    Uniform(&'a [BoxBounds]),
}

fn top_rows<T: LogDensity + ?Sized>(
    target: &T,
    draws: &[f64],
    config: &AscentConfig,
) -> Result<Vec<ManifoldPoint>> {
    if draws.is_empty() {
        return Err(Error::Contract("empty candidate pool".into()));
    }
    let d = target.manifold().ambient_dim();
    let n = draws.len() / d;
    let mut values = vec![0.0; n];
    let mut grads = vec![0.0; n * d];
    target.evaluate_batch(draws, &mut values, &mut grads);
    let mut order: Vec<usize> = (0..n).filter(|&i| values[i].is_finite()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let rows: Vec<&[f64]> = draws.chunks_exact(d).collect();
    let mut picked: Vec<&[f64]> = Vec::new();
    for i in order {
        if picked.len() == config.restarts {
            break;
        }
        if !picked.contains(&rows[i]) {
            picked.push(rows[i]);
        }
    }
    if picked.is_empty() {
        return Err(Error::Initialization(
            "no pool member has finite log density".into(),
        ));
    }
    Ok(picked
        .into_iter()
        .map(|r| ManifoldPoint::from_coords_unchecked(r.to_vec()))
        .collect())
}

#[derive(Clone, Debug)]
pub struct MultiStartResult {
    pub best: AscentResult,
    /// Index of the winning run in `runs`.
    pub best_index: usize,
    pub runs: Vec<AscentResult>,
}

/// Starting points for [`map_multistart`].
pub fn start_points<T: LogDensity + ?Sized>(
    target: &T,
    pool: &StartPool<'_>,
    config: &AscentConfig,
) -> Result<Vec<ManifoldPoint>> {
    let spec = target.manifold();
    match pool {
        StartPool::Draws(batch) => {
            spec.check_same(batch.spec())?;
            top_rows(target, batch.draws(), config)
        }
        StartPool::Rows(rows) => {
            if rows.len() % spec.ambient_dim() != 0 {
                return Err(Error::dims(
                    "pool rows",
                    spec.ambient_dim(),
                    rows.len() % spec.ambient_dim(),
                ));
            }
            top_rows(target, rows, config)
        }
        StartPool::Uniform(boxes) => {
            let mut rng = rng_from_seed(derive_seed(config.seed, "map"));
            (0..config.restarts)
                .map(|_| spec.sample_uniform(boxes, &mut rng))
                .collect()
        }
    }
}

/// Runs one ascent per start point concurrently and keeps the highest final
/// log density (first run wins ties).
pub fn map_multistart<T: LogDensity + ?Sized>(
    target: &T,
    config: &AscentConfig,
    pool: StartPool<'_>,
) -> Result<MultiStartResult> {
    config.validate()?;
    let starts = start_points(target, &pool, config)?;
    let runs = starts
        .par_iter()
        .map(|s| riemannian_ascent(target, s, config))
        .collect::<Vec<_>>();
    // uniform starts may land where the target is -inf; skip those runs
    let runs: Vec<AscentResult> = runs.into_iter().filter_map(|r| r.ok()).collect();
    let mut best_index = None;
    for (i, r) in runs.iter().enumerate() {
        if best_index.is_none_or(|b: usize| r.value > runs[b].value) {
            best_index = Some(i);
        }
    }
    let best_index = best_index.ok_or_else(|| {
        Error::Initialization("every ascent start had a non-finite log density".into())
    })?;
    Ok(MultiStartResult {
        best: runs[best_index].clone(),
        best_index,
        runs,
    })
}
