//! Hamiltonian Monte Carlo on product manifolds.
//!
//! [`geodesic_hmc`] is the likelihood-free geodesic sampler: momentum kicks
//! use only the gradient of the log-ratio, the drift follows the exact
//! geodesic flow, and the Metropolis test uses the full posterior
//! `log r + log prior - |v|²/2`. [`euclidean_hmc`] is plain leapfrog HMC; on a
//! Euclidean space with a zero prior both produce the same draws.
//!
//! Each chain owns a random stream. Per transition a chain draws `D` standard
//! normals (momentum) and then one uniform (accept test), whatever sampler is
//! used. Chains advance in lockstep groups so the target can be evaluated in
//! batches; because every chain reads only its own stream and batched rows are
//! computed independently, the output does not depend on grouping or on the
//! number of threads.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{fill_standard_normal, LogDensity, Posterior};
use crate::error::{Error, Result};
use crate::manifold::{
    distance, geodesic_flow_in_place, project_in_place, ManifoldPoint, ManifoldSpec,
    POINT_TOLERANCE,
};
use crate::rng::{derive_seed, stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Transitions per chain, burn-in included.
    pub transitions: usize,
    pub burn_in: usize,
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Not read from config files; runs derive it from their global seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 100,
            transitions: 2000,
            burn_in: 1000,
            step_size: 0.01,
            leapfrog_steps: 20,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("chains must be positive".into()));
        }
        if self.burn_in >= self.transitions {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than transitions ({})",
                self.burn_in, self.transitions
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::Config("leapfrog_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.transitions - self.burn_in
    }
}

/// Per-chain counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChainStats {
    pub proposed: usize,
    pub accepted: usize,
    /// Proposals rejected because the trajectory produced NaN.
    pub nan_rejections: usize,
}

impl ChainStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Retained draws of all chains, chain-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    spec: ManifoldSpec,
    config: SamplerConfig,
    retained: usize,
    draws: Vec<f64>,
    /// Target log density (log r + log prior) at every retained draw.
    log_density: Vec<f64>,
    stats: Vec<ChainStats>,
}

impl SampleBatch {
    pub fn spec(&self) -> &ManifoldSpec {
        &self.spec
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn chains(&self) -> usize {
        self.stats.len()
    }

    pub fn retained_per_chain(&self) -> usize {
        self.retained
    }

    pub fn len(&self) -> usize {
        self.chains() * self.retained
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.spec.ambient_dim()
    }

    /// All draws, one row per draw, chain-major.
    pub fn draws(&self) -> &[f64] {
        &self.draws
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.draws.chunks_exact(self.dim())
    }

    pub fn chain_draws(&self, chain: usize) -> &[f64] {
        let w = self.retained * self.dim();
        &self.draws[chain * w..(chain + 1) * w]
    }

    pub fn draw(&self, chain: usize, t: usize) -> &[f64] {
        let d = self.dim();
        let i = chain * self.retained + t;
        &self.draws[i * d..(i + 1) * d]
    }

    pub fn log_density(&self) -> &[f64] {
        &self.log_density
    }

    pub fn stats(&self) -> &[ChainStats] {
        &self.stats
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.stats.iter().map(ChainStats::acceptance_rate).collect()
    }

    pub fn mean_acceptance(&self) -> f64 {
        self.acceptance_rates().iter().sum::<f64>() / self.chains() as f64
    }

    pub fn nan_rejections(&self) -> usize {
        self.stats.iter().map(|s| s.nan_rejections).sum()
    }

    pub fn points(&self) -> Vec<ManifoldPoint> {
        self.rows()
            .map(|r| ManifoldPoint::from_coords_unchecked(r.to_vec()))
            .collect()
    }

    /// Values of coordinate `k` for one chain, in transition order.
    pub fn trace(&self, chain: usize, k: usize) -> Vec<f64> {
        self.chain_draws(chain)
            .chunks_exact(self.dim())
            .map(|r| r[k])
            .collect()
    }

    /// Writes `chain,transition,<coordinate names>` rows. Transition indices
    /// count from the first retained transition.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("chain,transition");
        for name in self.spec.coordinate_names() {
            out.push(',');
            out.push_str(&name);
        }
        out.push('\n');
        for c in 0..self.chains() {
            for t in 0..self.retained {
                let _ = write!(out, "{c},{}", self.config.burn_in + t);
                for v in self.draw(c, t) {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        crate::io::write_file(path, &out)
    }

    /// Key/value run metadata: config echo and acceptance summary.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let c = &self.config;
        let mut kv = vec![
            ("manifold".to_string(), self.spec.to_string()),
            ("chains".into(), c.chains.to_string()),
            ("transitions".into(), c.transitions.to_string()),
            ("burn_in".into(), c.burn_in.to_string()),
            ("step_size".into(), c.step_size.to_string()),
            ("leapfrog_steps".into(), c.leapfrog_steps.to_string()),
            ("seed".into(), c.seed.to_string()),
            ("mean_acceptance".into(), self.mean_acceptance().to_string()),
            ("nan_rejections".into(), self.nan_rejections().to_string()),
        ];
        let rates: Vec<String> = self
            .acceptance_rates()
            .iter()
            .map(|r| r.to_string())
            .collect();
        kv.push(("chain_acceptance".into(), rates.join(" ")));
        kv
    }
}

/// Random stream of chain `index`.
pub fn chain_stream(seed: u64, index: usize) -> Rng {
    stream(derive_seed(seed, "chains"), index as u64)
}

fn check_init(spec: &ManifoldSpec, init: &[ManifoldPoint], config: &SamplerConfig) -> Result<()> {
    config.validate()?;
    if init.len() != config.chains {
        return Err(Error::dims("initial points", config.chains, init.len()));
    }
    for p in init {
        spec.check_coords(p.coords(), POINT_TOLERANCE)?;
    }
    Ok(())
}

fn neg_half_sq(v: &[f64]) -> f64 {
    -0.5 * v.iter().map(|x| x * x).sum::<f64>()
}

/// Positions, momenta and ratio values/gradients of a group of chains.
struct Group {
    dim: usize,
    pos: Vec<f64>,
    vel: Vec<f64>,
    value: Vec<f64>,
    grad: Vec<f64>,
}

impl Group {
    fn rows(&self) -> usize {
        self.value.len()
    }

    fn kick(&mut self, spec: &ManifoldSpec, half: f64) {
        let d = self.dim;
        for i in 0..self.rows() {
            let v = &mut self.vel[i * d..(i + 1) * d];
            for (vi, gi) in v.iter_mut().zip(&self.grad[i * d..(i + 1) * d]) {
                *vi += half * gi;
            }
            project_in_place(spec, &self.pos[i * d..(i + 1) * d], v);
        }
    }

    /// `steps` iterations of {half kick, geodesic drift, re-evaluate, half kick}.
    fn integrate<R: LogDensity + ?Sized>(&mut self, ratio: &R, step: f64, steps: usize) {
        let spec = ratio.manifold();
        let d = self.dim;
        let half = 0.5 * step;
        for _ in 0..steps {
            self.kick(spec, half);
            for (p, v) in self
                .pos
                .chunks_exact_mut(d)
                .zip(self.vel.chunks_exact_mut(d))
            {
                geodesic_flow_in_place(spec, p, v, step);
            }
            ratio.evaluate_batch(&self.pos, &mut self.value, &mut self.grad);
            self.kick(spec, half);
        }
    }
}

/// Output of one chain group.
struct GroupResult {
    draws: Vec<f64>,
    log_density: Vec<f64>,
    stats: Vec<ChainStats>,
}

fn run_group<R: LogDensity + ?Sized, P: LogDensity + ?Sized>(
    ratio: &R,
    prior: &P,
    first_chain: usize,
    init: &[ManifoldPoint],
    config: &SamplerConfig,
) -> Result<GroupResult> {
    let spec = ratio.manifold();
    let d = spec.ambient_dim();
    let g = init.len();
    let mut rngs: Vec<Rng> = (0..g)
        .map(|i| chain_stream(config.seed, first_chain + i))
        .collect();
    let mut pos: Vec<f64> = init
        .iter()
        .flat_map(|p| p.coords().iter().copied())
        .collect();
    let mut r_val = vec![0.0; g];
    let mut r_grad = vec![0.0; g * d];
    ratio.evaluate_batch(&pos, &mut r_val, &mut r_grad);
    let mut p_val = vec![0.0; g];
    let mut p_grad = vec![0.0; g * d];
    prior.evaluate_batch(&pos, &mut p_val, &mut p_grad);
    for i in 0..g {
        let lambda = r_val[i] + p_val[i];
        if !lambda.is_finite() {
            return Err(Error::Initialization(format!(
                "chain {}: log density at the initial point is {lambda}",
                first_chain + i
            )));
        }
    }

    let retained = config.retained();
    let mut draws = Vec::with_capacity(g * retained * d);
    draws.resize(g * retained * d, 0.0);
    let mut log_density = vec![0.0; g * retained];
    let mut stats = vec![ChainStats::default(); g];
    let mut group = Group {
        dim: d,
        pos: vec![0.0; g * d],
        vel: vec![0.0; g * d],
        value: vec![0.0; g],
        grad: vec![0.0; g * d],
    };
    let mut lambda_t = vec![0.0; g];
    let mut prior_k = vec![0.0; g];
    let mut prior_grad_k = vec![0.0; g * d];

    for t in 0..config.transitions {
        for i in 0..g {
            let v = &mut group.vel[i * d..(i + 1) * d];
            fill_standard_normal(v, &mut rngs[i]);
            project_in_place(spec, &pos[i * d..(i + 1) * d], v);
            lambda_t[i] = r_val[i] + p_val[i] + neg_half_sq(v);
        }
        group.pos.copy_from_slice(&pos);
        group.value.copy_from_slice(&r_val);
        group.grad.copy_from_slice(&r_grad);
        group.integrate(ratio, config.step_size, config.leapfrog_steps);
        prior.evaluate_batch(&group.pos, &mut prior_k, &mut prior_grad_k);

        for i in 0..g {
            let u: f64 = rngs[i].random();
            let v = &group.vel[i * d..(i + 1) * d];
            let h = &group.pos[i * d..(i + 1) * d];
            let lambda_k = group.value[i] + prior_k[i] + neg_half_sq(v);
            stats[i].proposed += 1;
            let invalid = lambda_k.is_nan() || h.iter().any(|x| x.is_nan());
            if invalid {
                stats[i].nan_rejections += 1;
            } else {
                let rho = (lambda_k - lambda_t[i]).exp().min(1.0);
                if u < rho {
                    stats[i].accepted += 1;
                    pos[i * d..(i + 1) * d].copy_from_slice(h);
                    r_val[i] = group.value[i];
                    r_grad[i * d..(i + 1) * d].copy_from_slice(&group.grad[i * d..(i + 1) * d]);
                    p_val[i] = prior_k[i];
                }
            }
            if t >= config.burn_in {
                let k = t - config.burn_in;
                let row = i * retained + k;
                draws[row * d..(row + 1) * d].copy_from_slice(&pos[i * d..(i + 1) * d]);
                log_density[row] = r_val[i] + p_val[i];
            }
        }
    }
    Ok(GroupResult {
        draws,
        log_density,
        stats,
    })
}

/// Chains per lockstep group: enough groups to keep every worker busy.
fn group_size(chains: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    chains.div_ceil(threads).clamp(1, 256)
}

fn assemble(spec: ManifoldSpec, config: &SamplerConfig, parts: Vec<GroupResult>) -> SampleBatch {
    let mut draws = Vec::new();
    let mut log_density = Vec::new();
    let mut stats = Vec::new();
    for p in parts {
        draws.extend(p.draws);
        log_density.extend(p.log_density);
        stats.extend(p.stats);
    }
    SampleBatch {
        spec,
        config: config.clone(),
        retained: config.retained(),
        draws,
        log_density,
        stats,
    }
}

/// Likelihood-free geodesic HMC on the posterior `target = ratio x prior`.
pub fn geodesic_hmc<R: LogDensity, P: LogDensity>(
    target: &Posterior<R, P>,
    init: &[ManifoldPoint],
    config: &SamplerConfig,
) -> Result<SampleBatch> {
    geodesic_hmc_parts(target.ratio(), target.prior(), init, config)
}

/// [`geodesic_hmc`] with the two factors passed separately.
pub fn geodesic_hmc_parts<R: LogDensity + ?Sized, P: LogDensity + ?Sized>(
    ratio: &R,
    prior: &P,
    init: &[ManifoldPoint],
    config: &SamplerConfig,
) -> Result<SampleBatch> {
    let spec = ratio.manifold();
    spec.check_same(prior.manifold())?;
    check_init(spec, init, config)?;
    let size = group_size(config.chains);
    let parts = init
        .par_chunks(size)
        .enumerate()
        .map(|(k, chunk)| run_group(ratio, prior, k * size, chunk, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(spec.clone(), config, parts))
}

/// Standard leapfrog HMC on a Euclidean space, one chain at a time.
pub fn euclidean_hmc<T: LogDensity + ?Sized>(
    target: &T,
    init: &[ManifoldPoint],
    config: &SamplerConfig,
) -> Result<SampleBatch> {
    let spec = target.manifold();
    if spec.has_sphere() {
        return Err(Error::Config(format!(
            "euclidean_hmc needs a Euclidean space, got {spec}"
        )));
    }
    check_init(spec, init, config)?;
    let parts = init
        .par_iter()
        .enumerate()
        .map(|(c, start)| euclidean_chain(target, c, start, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(spec.clone(), config, parts))
}

fn euclidean_chain<T: LogDensity + ?Sized>(
    target: &T,
    chain: usize,
    start: &ManifoldPoint,
    config: &SamplerConfig,
) -> Result<GroupResult> {
    let d = start.coords().len();
    let mut rng = chain_stream(config.seed, chain);
    let mut x = start.coords().to_vec();
    let mut grad = vec![0.0; d];
    let mut value = target.evaluate(&x, &mut grad);
    if !value.is_finite() {
        return Err(Error::Initialization(format!(
            "chain {chain}: log density at the initial point is {value}"
        )));
    }
    let retained = config.retained();
    let mut draws = vec![0.0; retained * d];
    let mut log_density = vec![0.0; retained];
    let mut stats = ChainStats::default();
    let (eps, half) = (config.step_size, 0.5 * config.step_size);
    let mut p = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut gy = vec![0.0; d];
    for t in 0..config.transitions {
        fill_standard_normal(&mut p, &mut rng);
        let h0 = value + neg_half_sq(&p);
        y.copy_from_slice(&x);
        gy.copy_from_slice(&grad);
        let mut vy = value;
        for _ in 0..config.leapfrog_steps {
            for (pi, gi) in p.iter_mut().zip(&gy) {
                *pi += half * gi;
            }
            for (yi, pi) in y.iter_mut().zip(&p) {
                *yi += eps * *pi;
            }
            vy = target.evaluate(&y, &mut gy);
            for (pi, gi) in p.iter_mut().zip(&gy) {
                *pi += half * gi;
            }
        }
        let u: f64 = rng.random();
        let h1 = vy + neg_half_sq(&p);
        stats.proposed += 1;
        if h1.is_nan() || y.iter().any(|v| v.is_nan()) {
            stats.nan_rejections += 1;
        } else if u < (h1 - h0).exp().min(1.0) {
            stats.accepted += 1;
            x.copy_from_slice(&y);
            grad.copy_from_slice(&gy);
            value = vy;
        }
        if t >= config.burn_in {
            let k = t - config.burn_in;
            draws[k * d..(k + 1) * d].copy_from_slice(&x);
            log_density[k] = value;
        }
    }
    Ok(GroupResult {
        draws,
        log_density,
        stats: vec![stats],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReversibilityReport {
    /// Geodesic distance between the start and the round-trip end point.
    pub distance: f64,
    /// `|v_end + v_start|`: the returned momentum should be the negated start momentum.
    pub momentum_mismatch: f64,
}

/// Integrates `steps` leapfrog/geodesic steps with the ratio gradient, negates
/// the momentum and integrates again.
pub fn reversibility_check<R: LogDensity + ?Sized>(
    ratio: &R,
    point: &ManifoldPoint,
    step: f64,
    steps: usize,
    rng: &mut Rng,
) -> Result<ReversibilityReport> {
    let spec = ratio.manifold();
    spec.check_coords(point.coords(), POINT_TOLERANCE)?;
    let d = spec.ambient_dim();
    let mut v0 = vec![0.0; d];
    fill_standard_normal(&mut v0, rng);
    project_in_place(spec, point.coords(), &mut v0);
    let mut group = Group {
        dim: d,
        pos: point.coords().to_vec(),
        vel: v0.clone(),
        value: vec![0.0],
        grad: vec![0.0; d],
    };
    ratio.evaluate_batch(&group.pos, &mut group.value, &mut group.grad);
    group.integrate(ratio, step, steps);
    group.vel.iter_mut().for_each(|v| *v = -*v);
    group.integrate(ratio, step, steps);
    let mismatch = group
        .vel
        .iter()
        .zip(&v0)
        .map(|(a, b)| (a + b) * (a + b))
        .sum::<f64>()
        .sqrt();
    Ok(ReversibilityReport {
        distance: distance(spec, point.coords(), &group.pos),
        momentum_mismatch: mismatch,
    })
}

/// Hamiltonian error `H(end) - H(start)` of one trajectory per start point,
/// with `H = -(log r + log prior) + |v|²/2`. Momenta come from `seed`'s
/// chain streams, so two calls with the same seed share momenta.
pub fn energy_errors<R: LogDensity + ?Sized, P: LogDensity + ?Sized>(
    ratio: &R,
    prior: &P,
    points: &[ManifoldPoint],
    step: f64,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let spec = ratio.manifold();
    spec.check_same(prior.manifold())?;
    let d = spec.ambient_dim();
    let n = points.len();
    let mut group = Group {
        dim: d,
        pos: points
            .iter()
            .flat_map(|p| p.coords().iter().copied())
            .collect(),
        vel: vec![0.0; n * d],
        value: vec![0.0; n],
        grad: vec![0.0; n * d],
    };
    for (i, p) in points.iter().enumerate() {
        spec.check_coords(p.coords(), POINT_TOLERANCE)?;
        let v = &mut group.vel[i * d..(i + 1) * d];
        fill_standard_normal(v, &mut chain_stream(seed, i));
        project_in_place(spec, p.coords(), v);
    }
    let mut prior_v = vec![0.0; n];
    let mut scratch = vec![0.0; n * d];
    ratio.evaluate_batch(&group.pos, &mut group.value, &mut group.grad);
    prior.evaluate_batch(&group.pos, &mut prior_v, &mut scratch);
    let h0: Vec<f64> = (0..n)
        .map(|i| -(group.value[i] + prior_v[i]) - neg_half_sq(&group.vel[i * d..(i + 1) * d]))
        .collect();
    group.integrate(ratio, step, steps);
    prior.evaluate_batch(&group.pos, &mut prior_v, &mut scratch);
    Ok((0..n)
        .map(|i| {
            -(group.value[i] + prior_v[i]) - neg_half_sq(&group.vel[i * d..(i + 1) * d]) - h0[i]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{compose_posterior, Flat, FnDensity, VonMisesFisher};
    use crate::manifold::BoxBounds;
    use crate::rng::rng_from_seed;

    fn circle_init(n: usize, seed: u64) -> Vec<ManifoldPoint> {
        let spec = ManifoldSpec::sphere(1).unwrap();
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| spec.sample_uniform(&[], &mut rng).unwrap())
            .collect()
    }

    fn small_config(chains: usize) -> SamplerConfig {
        SamplerConfig {
            chains,
            transitions: 300,
            burn_in: 100,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        for bad in [
            SamplerConfig {
                burn_in: 2000,
                ..Default::default()
            },
            SamplerConfig {
                step_size: 0.0,
                ..Default::default()
            },
            SamplerConfig {
                leapfrog_steps: 0,
                ..Default::default()
            },
            SamplerConfig {
                chains: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_force_on_circle_accepts_everything() {
        let spec = ManifoldSpec::sphere(1).unwrap();
        let target = compose_posterior(Flat::new(spec.clone(), 0.0), Flat::uniform(spec)).unwrap();
        let batch = geodesic_hmc(&target, &circle_init(8, 1), &small_config(8)).unwrap();
        assert_eq!(batch.mean_acceptance(), 1.0);
    }

    #[test]
    fn draws_stay_on_the_sphere() {
        let vmf = VonMisesFisher::new(vec![0.0, 0.0, 1.0], 20.0).unwrap();
        let spec = vmf.manifold().clone();
        let target = compose_posterior(&vmf, Flat::uniform(spec.clone())).unwrap();
        let mut rng = rng_from_seed(2);
        let init: Vec<_> = (0..6)
            .map(|_| spec.sample_uniform(&[], &mut rng).unwrap())
            .collect();
        let batch = geodesic_hmc(&target, &init, &small_config(6)).unwrap();
        for row in batch.rows() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!(batch.mean_acceptance() > 0.6);
    }

    #[test]
    fn grouping_does_not_change_draws() {
        let vmf = VonMisesFisher::new(vec![0.6, 0.8], 20.0).unwrap();
        let target = compose_posterior(&vmf, Flat::uniform(vmf.manifold().clone())).unwrap();
        let init = circle_init(10, 3);
        let config = small_config(10);
        let all = geodesic_hmc(&target, &init, &config).unwrap();
        // chains 4..10 run as their own group
        let tail = run_group(target.ratio(), target.prior(), 4, &init[4..], &config).unwrap();
        assert_eq!(&all.draws()[4 * 200 * 2..], &tail.draws[..]);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let threaded = pool.install(|| geodesic_hmc(&target, &init, &config).unwrap());
        assert_eq!(all, threaded);
    }

    #[test]
    fn initialization_errors() {
        let spec = ManifoldSpec::euclidean(1).unwrap();
        let boxed =
            crate::density::BoxUniform::new(spec.clone(), vec![BoxBounds::unit(1)]).unwrap();
        let target = compose_posterior(Flat::new(spec.clone(), 0.0), boxed).unwrap();
        let init = vec![ManifoldPoint::from_coords_unchecked(vec![2.0])];
        let config = small_config(1);
        assert!(matches!(
            geodesic_hmc(&target, &init, &config),
            Err(Error::Initialization(_))
        ));
        let two = vec![init[0].clone(), init[0].clone()];
        assert!(matches!(
            geodesic_hmc(&target, &two, &config),
            Err(Error::DimensionMismatch { .. })
        ));
        let off = vec![ManifoldPoint::from_coords_unchecked(vec![2.0, 0.0])];
        let circle = ManifoldSpec::sphere(1).unwrap();
        let t2 = compose_posterior(Flat::uniform(circle.clone()), Flat::uniform(circle)).unwrap();
        assert!(matches!(
            geodesic_hmc(&t2, &off, &config),
            Err(Error::InvalidPoint { .. })
        ));
    }

    #[test]
    fn nan_proposals_are_rejected_and_counted() {
        let spec = ManifoldSpec::euclidean(1).unwrap();
        let nan_right = FnDensity::new(spec.clone(), |x: &[f64], g: &mut [f64]| {
            g[0] = -x[0];
            if x[0] > 0.5 {
                f64::NAN
            } else {
                -0.5 * x[0] * x[0]
            }
        });
        let config = SamplerConfig {
            step_size: 0.2,
            ..small_config(2)
        };
        let init = vec![ManifoldPoint::from_coords_unchecked(vec![0.0]); 2];
        let batch = euclidean_hmc(&nan_right, &init, &config).unwrap();
        assert!(batch.nan_rejections() > 0);
        assert!(batch.draws().iter().all(|x| *x <= 0.5));
    }

    #[test]
    fn reversibility_on_euclidean_gaussian() {
        let spec = ManifoldSpec::euclidean(3).unwrap();
        let normal = FnDensity::new(spec, |x: &[f64], g: &mut [f64]| {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = -xi;
            }
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        });
        let mut rng = rng_from_seed(5);
        let p = ManifoldPoint::from_coords_unchecked(vec![0.3, -1.0, 2.0]);
        let r = reversibility_check(&normal, &p, 0.01, 20, &mut rng).unwrap();
        assert!(r.distance <= 1e-10, "{}", r.distance);
    }

    #[test]
    fn reversibility_with_large_steps_on_sharp_vmf() {
        // 20x the default step: energy errors are large but the map stays
        // within the leapfrog stability region (step * sqrt(kappa) < 2)
        let vmf = VonMisesFisher::new(vec![0.0, 1.0], 20.0).unwrap();
        let mut rng = rng_from_seed(6);
        for _ in 0..100 {
            let p = vmf.manifold().sample_uniform(&[], &mut rng).unwrap();
            let r = reversibility_check(&vmf, &p, 0.2, 50, &mut rng).unwrap();
            assert!(r.distance <= 1e-6, "{}", r.distance);
        }
        let flat = Flat::uniform(vmf.manifold().clone());
        let e = energy_errors(&vmf, &flat, &circle_init(100, 9), 0.2, 50, 1).unwrap();
        assert!(e.iter().any(|x| x.abs() > 1.0));
    }

    #[test]
    fn csv_export_layout() {
        let spec = ManifoldSpec::hand(2).unwrap();
        let target = compose_posterior(Flat::new(spec.clone(), 0.0), Flat::uniform(spec)).unwrap();
        let init = vec![ManifoldPoint::from_coords_unchecked(vec![0.5, 0.5, 1.0, 0.0]); 2];
        let config = SamplerConfig {
            transitions: 4,
            burn_in: 1,
            ..small_config(2)
        };
        let batch = geodesic_hmc(&target, &init, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        batch.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "chain,transition,b0_0,b0_1,b1_0,b1_1");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("0,1,"));
        assert!(lines[6].starts_with("1,3,"));
    }
}
