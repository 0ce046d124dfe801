//! Sampler diagnostics: linear-kernel MMD, Fréchet means on spheres,
//! effective sample size, circular clustering and acceptance summaries.

use crate::error::{Error, Result};
use crate::manifold::{geodesic_flow_in_place, norm, sphere_distance, sphere_log, ManifoldPoint};
use crate::mcmc::SampleBatch;

/// Biased (V-statistic) MMD with the linear kernel `k(x, y) = xᵀy`.
#[derive(Clone, Debug, PartialEq)]
pub struct MmdReport {
    pub mmd_squared: f64,
    /// Square root of `mmd_squared`: the distance between the sample means.
    pub mmd: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub kernel: &'static str,
}

fn row_mean(rows: &[f64], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for r in rows.chunks_exact(dim) {
        for (mi, x) in m.iter_mut().zip(r) {
            *mi += x;
        }
    }
    let n = (rows.len() / dim) as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

/// `a` and `b` hold row-major sample sets of width `dim`.
pub fn mmd_linear(a: &[f64], b: &[f64], dim: usize) -> Result<MmdReport> {
    if dim == 0 || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(Error::Contract(format!(
            "sample sets of {} and {} values are not rows of width {dim}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("empty sample set".into()));
    }
    let (ma, mb) = (row_mean(a, dim), row_mean(b, dim));
    let mmd_squared: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(MmdReport {
        mmd_squared,
        mmd: mmd_squared.sqrt(),
        n_a: a.len() / dim,
        n_b: b.len() / dim,
        kernel: "linear",
    })
}

const FRECHET_TOLERANCE: f64 = 1e-10;
const FRECHET_MAX_ITERATIONS: usize = 1000;

/// Minimizer of the summed squared great-circle distances to unit-vector
/// samples of width `dim`, by averaging log maps and stepping along the
/// geodesic. Starts from the normalized extrinsic mean.
pub fn frechet_mean(samples: &[f64], dim: usize) -> Result<ManifoldPoint> {
    if dim < 2 || samples.is_empty() || !samples.len().is_multiple_of(dim) {
        return Err(Error::Contract(
            "frechet_mean needs non-empty unit-vector rows".into(),
        ));
    }
    let n = (samples.len() / dim) as f64;
    let mut m = row_mean(samples, dim);
    let len = norm(&m);
    if len < 1e-12 {
        m = samples[..dim].to_vec();
    } else {
        m.iter_mut().for_each(|x| *x /= len);
    }
    let mut step = vec![0.0; dim];
    let mut log = vec![0.0; dim];
    let mut residual = f64::INFINITY;
    for _ in 0..FRECHET_MAX_ITERATIONS {
        step.iter_mut().for_each(|s| *s = 0.0);
        for x in samples.chunks_exact(dim) {
            sphere_log(&m, x, &mut log);
            for (s, l) in step.iter_mut().zip(&log) {
                *s += l;
            }
        }
        step.iter_mut().for_each(|s| *s /= n);
        residual = norm(&step);
        if residual < FRECHET_TOLERANCE {
            return Ok(ManifoldPoint::from_coords_unchecked(m));
        }
        let spec = crate::manifold::ManifoldSpec::sphere(dim - 1)?;
        geodesic_flow_in_place(&spec, &mut m, &mut step, 1.0);
    }
    Err(Error::Convergence {
        iterations: FRECHET_MAX_ITERATIONS,
        residual,
    })
}

/// Reading (ii) of the sample-set distance: great-circle distance between the
/// Fréchet means of two sets on the same sphere.
pub fn frechet_mean_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    let ma = frechet_mean(a, dim)?;
    let mb = frechet_mean(b, dim)?;
    Ok(sphere_distance(ma.coords(), mb.coords()))
}

/// Length of the mean of unit vectors; 0 for a uniform spread, 1 for a point mass.
pub fn resultant_length(samples: &[f64], dim: usize) -> f64 {
    norm(&row_mean(samples, dim))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EssEstimate {
    pub ess: f64,
    /// Set when the trace has zero variance; `ess` is then 1.
    pub degenerate: bool,
}

fn autocovariance(x: &[f64], mean: f64, lag: usize) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for t in 0..n - lag {
        s += (x[t] - mean) * (x[t + lag] - mean);
    }
    s / n as f64
}

/// Sums Geyer's initial positive sequence of paired autocorrelations
/// `rho(2k) + rho(2k+1)` and converts it into `n / tau`.
fn ips_ess(n_total: f64, max_lag: usize, rho: impl Fn(usize) -> f64) -> f64 {
    let mut sum = 0.0;
    let mut k = 0;
    while 2 * k + 1 < max_lag {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        k += 1;
    }
    let tau = (-1.0 + 2.0 * sum).max(1.0 / n_total.log10().max(1.0));
    n_total / tau
}

/// Initial-positive-sequence ESS of one trace.
pub fn ess(trace: &[f64]) -> Result<EssEstimate> {
    if trace.len() < 10 {
        return Err(Error::Contract(format!(
            "ESS needs at least 10 values, got {}",
            trace.len()
        )));
    }
    let n = trace.len();
    let mean = trace.iter().sum::<f64>() / n as f64;
    let c0 = autocovariance(trace, mean, 0);
    if !(c0 > 0.0) {
        return Ok(EssEstimate {
            ess: 1.0,
            degenerate: true,
        });
    }
    Ok(EssEstimate {
        ess: ips_ess(n as f64, n, |lag| autocovariance(trace, mean, lag) / c0),
        degenerate: false,
    })
}

/// Multi-chain ESS: autocorrelations combine within-chain autocovariances with
/// the between-chain variance, so poorly mixed chains lower the estimate.
pub fn ess_pooled(traces: &[Vec<f64>]) -> Result<EssEstimate> {
    let m = traces.len();
    if m == 0 {
        return Err(Error::Contract("no traces".into()));
    }
    let n = traces[0].len();
    if n < 10 || traces.iter().any(|t| t.len() != n) {
        return Err(Error::Contract(
            "traces must share a length of at least 10".into(),
        ));
    }
    if m == 1 {
        return ess(&traces[0]);
    }
    let means: Vec<f64> = traces
        .iter()
        .map(|t| t.iter().sum::<f64>() / n as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let nf = n as f64;
    // within-chain variances with the unbiased (n - 1) normalization
    let w = traces
        .iter()
        .zip(&means)
        .map(|(t, mu)| autocovariance(t, *mu, 0) * nf / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    let b_over_n = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    if !(var_plus > 0.0) {
        return Ok(EssEstimate {
            ess: 1.0,
            degenerate: true,
        });
    }
    let rho = |lag: usize| {
        let mean_acov = traces
            .iter()
            .zip(&means)
            .map(|(t, mu)| autocovariance(t, *mu, lag))
            .sum::<f64>()
            / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    Ok(EssEstimate {
        ess: ips_ess((n * m) as f64, n, rho),
        degenerate: false,
    })
}

/// ESS of one ambient coordinate: per chain and pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateEss {
    pub per_chain: Vec<EssEstimate>,
    pub pooled: EssEstimate,
}

pub fn ess_per_coordinate(batch: &SampleBatch) -> Result<Vec<CoordinateEss>> {
    (0..batch.dim())
        .map(|k| {
            let traces: Vec<Vec<f64>> = (0..batch.chains()).map(|c| batch.trace(c, k)).collect();
            Ok(CoordinateEss {
                per_chain: traces.iter().map(|t| ess(t)).collect::<Result<_>>()?,
                pooled: ess_pooled(&traces)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcceptanceSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub nan_rejections: usize,
}

pub fn acceptance_summary(batch: &SampleBatch) -> AcceptanceSummary {
    let rates = batch.acceptance_rates();
    AcceptanceSummary {
        mean: batch.mean_acceptance(),
        min: rates.iter().copied().fold(f64::INFINITY, f64::min),
        max: rates.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        nan_rejections: batch.nan_rejections(),
    }
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Equal-width histogram of `values` on `[lo, hi]`: `(bin centre, fraction)`.
/// Values outside the range are dropped from the counts but not from the
/// denominator.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v >= lo && v <= hi {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
    }
    let n = values.len().max(1) as f64;
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (lo + (k as f64 + 0.5) * width, c as f64 / n))
        .collect()
}

/// Centre of the fullest bin (first on ties).
pub fn histogram_mode(hist: &[(f64, f64)]) -> Option<f64> {
    hist.iter()
        .fold(None, |best: Option<(f64, f64)>, &(c, f)| match best {
            Some((_, bf)) if bf >= f => best,
            _ => Some((c, f)),
        })
        .map(|(c, _)| c)
}

/// Two-cluster split of points on S¹.
#[derive(Clone, Debug, PartialEq)]
pub struct CircularClustering {
    /// Cluster centre angles in radians.
    pub centers: [f64; 2],
    pub sizes: [usize; 2],
    /// Mean silhouette over (a stride-subsample of) the points.
    pub silhouette: f64,
}

impl CircularClustering {
    /// Angular separation of the two centres, in `[0, pi]`.
    pub fn separation(&self) -> f64 {
        angle_gap(self.centers[0], self.centers[1])
    }
}

const SILHOUETTE_POINTS: usize = 2000;

/// Two-means clustering of unit vectors in R² under arc-length distance.
/// Seeds: the first point and the point farthest from it.
pub fn circular_two_means(samples: &[f64]) -> Result<CircularClustering> {
    if samples.len() < 4 || !samples.len().is_multiple_of(2) {
        return Err(Error::Contract(
            "circular clustering needs at least two points in R²".into(),
        ));
    }
    let angles: Vec<f64> = samples.chunks_exact(2).map(|q| q[1].atan2(q[0])).collect();
    let far = angles
        .iter()
        .copied()
        .max_by(|a, b| angle_gap(*a, angles[0]).total_cmp(&angle_gap(*b, angles[0])))
        .unwrap();
    let mut centers = [angles[0], far];
    let mut labels = vec![0usize; angles.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (l, a) in labels.iter_mut().zip(&angles) {
            let new = usize::from(angle_gap(*a, centers[1]) < angle_gap(*a, centers[0]));
            changed |= new != *l;
            *l = new;
        }
        for (k, c) in centers.iter_mut().enumerate() {
            let (mut s, mut co) = (0.0, 0.0);
            for (l, a) in labels.iter().zip(&angles) {
                if *l == k {
                    s += a.sin();
                    co += a.cos();
                }
            }
            if s != 0.0 || co != 0.0 {
                *c = s.atan2(co);
            }
        }
        if !changed {
            break;
        }
    }
    let sizes = [
        labels.iter().filter(|&&l| l == 0).count(),
        labels.iter().filter(|&&l| l == 1).count(),
    ];
    let stride = angles.len().div_ceil(SILHOUETTE_POINTS);
    let idx: Vec<usize> = (0..angles.len()).step_by(stride).collect();
    let mut total = 0.0;
    for &i in &idx {
        let (mut sum, mut cnt) = ([0.0; 2], [0usize; 2]);
        for &j in &idx {
            if j != i {
                sum[labels[j]] += angle_gap(angles[i], angles[j]);
                cnt[labels[j]] += 1;
            }
        }
        let own = labels[i];
        let other = 1 - own;
        if cnt[own] == 0 || cnt[other] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = sum[other] / cnt[other] as f64;
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(CircularClustering {
        centers,
        sizes,
        silhouette: total / idx.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::VonMisesFisher;
    use crate::rng::rng_from_seed;
    use crate::testutil::{apply, random_rotation};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn histogram_bins_and_mode() {
        let values = [0.05, 0.15, 0.16, 0.95, 1.0, 1.5, -0.1, 0.55];
        let h = histogram(&values, 0.0, 1.0, 10);
        assert_eq!(h.len(), 10);
        assert!((h[0].0 - 0.05).abs() < 1e-15 && (h[9].0 - 0.95).abs() < 1e-15);
        let counts: Vec<f64> = h.iter().map(|b| b.1 * 8.0).collect();
        assert_eq!(counts, [1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        // ties go to the first bin
        assert!((histogram_mode(&h).unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(histogram_mode(&[]), None);
    }

    fn flat(points: &[ManifoldPoint]) -> Vec<f64> {
        points
            .iter()
            .flat_map(|p| p.coords().iter().copied())
            .collect()
    }

    #[test]
    fn mmd_examples() {
        let a = [1.0, 0.0].repeat(5);
        let b = [0.0, 1.0].repeat(5);
        assert_eq!(mmd_linear(&a, &b, 2).unwrap().mmd_squared, 2.0);
        assert_eq!(mmd_linear(&a, &a, 2).unwrap().mmd_squared, 0.0);
        assert!(mmd_linear(&a, &[1.0, 2.0, 3.0], 2).is_err());
        assert!(mmd_linear(&[], &a, 2).is_err());
    }

    #[test]
    fn mmd_matches_kernel_sum_oracle() {
        let mut rng = rng_from_seed(1);
        for (na, nb, dim) in [(10, 17, 2), (200, 150, 4), (1, 1, 3)] {
            let a: Vec<f64> = (0..na * dim).map(|_| rng.sample(StandardNormal)).collect();
            let b: Vec<f64> = (0..nb * dim).map(|_| rng.sample(StandardNormal)).collect();
            let k = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            let mean_k = |s: &[f64], t: &[f64]| {
                let mut acc = 0.0;
                for x in s.chunks_exact(dim) {
                    for y in t.chunks_exact(dim) {
                        acc += k(x, y);
                    }
                }
                acc / ((s.len() / dim) * (t.len() / dim)) as f64
            };
            let oracle = mean_k(&a, &a) + mean_k(&b, &b) - 2.0 * mean_k(&a, &b);
            let r = mmd_linear(&a, &b, dim).unwrap();
            assert!((r.mmd_squared - oracle).abs() < 1e-12);
            assert_eq!(r.mmd_squared, mmd_linear(&b, &a, dim).unwrap().mmd_squared);
        }
    }

    #[test]
    fn frechet_mean_examples() {
        let same = [0.6, 0.8].repeat(4);
        let m = frechet_mean(&same, 2).unwrap();
        assert!((m.coords()[0] - 0.6).abs() < 1e-15 && (m.coords()[1] - 0.8).abs() < 1e-15);
        let m = frechet_mean(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.coords()[0] - h).abs() < 1e-12 && (m.coords()[1] - h).abs() < 1e-12);
    }

    #[test]
    fn frechet_mean_of_vmf_draws() {
        let mut rng = rng_from_seed(2);
        let nu = vec![0.0, 0.6, 0.8];
        let draws = VonMisesFisher::new(nu.clone(), 20.0)
            .unwrap()
            .sample(100_000, &mut rng);
        let m = frechet_mean(&flat(&draws), 3).unwrap();
        assert!(sphere_distance(m.coords(), &nu) < 0.01);
    }

    #[test]
    fn frechet_mean_is_rotation_equivariant() {
        let mut rng = rng_from_seed(3);
        for dim in [2, 3, 4] {
            let mut nu = vec![0.0; dim];
            nu[0] = 1.0;
            let draws = flat(&VonMisesFisher::new(nu, 5.0).unwrap().sample(500, &mut rng));
            let rot = random_rotation(dim, &mut rng);
            let rotated: Vec<f64> = draws
                .chunks_exact(dim)
                .flat_map(|x| apply(&rot, x))
                .collect();
            let m = frechet_mean(&draws, dim).unwrap();
            let mr = frechet_mean(&rotated, dim).unwrap();
            let expect = apply(&rot, m.coords());
            for (a, b) in mr.coords().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ess_examples() {
        let mut rng = rng_from_seed(4);
        let noise: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let e = ess(&noise).unwrap();
        assert!((e.ess - 10_000.0).abs() < 2_000.0, "{}", e.ess);

        let c = ess(&[3.0; 50]).unwrap();
        assert_eq!(c.ess, 1.0);
        assert!(c.degenerate);

        let mut ar = vec![0.0; 10_000];
        let s = (1.0f64 - 0.81).sqrt();
        for t in 1..ar.len() {
            ar[t] = 0.9 * ar[t - 1] + s * rng.sample::<f64, _>(StandardNormal);
        }
        let expect = 10_000.0 * 0.1 / 1.9;
        let e = ess(&ar).unwrap();
        assert!((e.ess - expect).abs() < 0.25 * expect, "{}", e.ess);
        assert!(ess(&[1.0; 5]).is_err());
    }

    #[test]
    fn pooled_ess_penalizes_separated_chains() {
        let mut rng = rng_from_seed(5);
        let mixed: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..1000).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let e = ess_pooled(&mixed).unwrap();
        assert!((e.ess - 4000.0).abs() < 800.0, "{}", e.ess);
        let stuck: Vec<Vec<f64>> = (0..4)
            .map(|c| {
                (0..1000)
                    .map(|_| 10.0 * c as f64 + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        assert!(ess_pooled(&stuck).unwrap().ess < 100.0);
    }

    #[test]
    fn circular_clustering_finds_antipodal_modes() {
        let mut rng = rng_from_seed(6);
        let a = VonMisesFisher::new(vec![0.6, 0.8], 30.0)
            .unwrap()
            .sample(3000, &mut rng);
        let b = VonMisesFisher::new(vec![-0.6, -0.8], 30.0)
            .unwrap()
            .sample(2000, &mut rng);
        let mut pts = flat(&a);
        pts.extend(flat(&b));
        let c = circular_two_means(&pts).unwrap();
        assert!(c.silhouette > 0.8, "{}", c.silhouette);
        assert!((c.separation() - std::f64::consts::PI).abs() < 0.05);
        let mut sizes = c.sizes;
        sizes.sort();
        assert!(sizes[0] > 1900 && sizes[1] < 3100);

        let uniform: Vec<f64> = (0..4000)
            .flat_map(|_| {
                let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                [t.cos(), t.sin()]
            })
            .collect();
        let u = circular_two_means(&uniform).unwrap();
        assert!(u.silhouette < 0.5, "{}", u.silhouette);
        assert!(resultant_length(&uniform, 2) < 0.05);
    }
}
