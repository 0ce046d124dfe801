//! Unnormalized log densities over manifold points.
//!
//! Every density reports its value together with the gradient in ambient
//! coordinates. Projecting that gradient onto a tangent space is left to the
//! consumer (sampler or optimizer).

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::manifold::{dot, norm, sample_sphere, Block, ManifoldPoint, ManifoldSpec};

pub trait LogDensity: Sync {
    fn manifold(&self) -> &ManifoldSpec;

    /// Writes the ambient gradient into `gradient` and returns the log value.
    /// Where the value is `-inf` the gradient is zero.
    fn evaluate(&self, point: &[f64], gradient: &mut [f64]) -> f64;

    /// Evaluates `points.len() / dim` points stored row by row.
    fn evaluate_batch(&self, points: &[f64], values: &mut [f64], gradients: &mut [f64]) {
        let dim = self.manifold().ambient_dim();
        for ((p, v), g) in points
            .chunks_exact(dim)
            .zip(values.iter_mut())
            .zip(gradients.chunks_exact_mut(dim))
        {
            *v = self.evaluate(p, g);
        }
    }

    fn value(&self, point: &[f64]) -> f64 {
        let mut g = vec![0.0; point.len()];
        self.evaluate(point, &mut g)
    }

    /// Checked evaluation on a typed point.
    fn log_density(&self, point: &ManifoldPoint) -> Result<(f64, Vec<f64>)> {
        self.manifold()
            .check_len("log density", point.coords().len())?;
        let mut g = vec![0.0; point.coords().len()];
        let v = self.evaluate(point.coords(), &mut g);
        Ok((v, g))
    }
}

impl<T: LogDensity + ?Sized> LogDensity for &T {
    fn manifold(&self) -> &ManifoldSpec {
        (**self).manifold()
    }
    fn evaluate(&self, point: &[f64], gradient: &mut [f64]) -> f64 {
        (**self).evaluate(point, gradient)
    }
    fn evaluate_batch(&self, points: &[f64], values: &mut [f64], gradients: &mut [f64]) {
        (**self).evaluate_batch(points, values, gradients)
    }
}

impl<T: LogDensity + ?Sized + Send> LogDensity for Arc<T> {
    fn manifold(&self) -> &ManifoldSpec {
        (**self).manifold()
    }
    fn evaluate(&self, point: &[f64], gradient: &mut [f64]) -> f64 {
        (**self).evaluate(point, gradient)
    }
    fn evaluate_batch(&self, points: &[f64], values: &mut [f64], gradients: &mut [f64]) {
        (**self).evaluate_batch(points, values, gradients)
    }
}

impl<T: LogDensity + ?Sized> LogDensity for Box<T> {
    fn manifold(&self) -> &ManifoldSpec {
        (**self).manifold()
    }
    fn evaluate(&self, point: &[f64], gradient: &mut [f64]) -> f64 {
        (**self).evaluate(point, gradient)
    }
    fn evaluate_batch(&self, points: &[f64], values: &mut [f64], gradients: &mut [f64]) {
        (**self).evaluate_batch(points, values, gradients)
    }
}

/// Constant log density; the uniform prior on compact factors.
#[derive(Clone, Debug)]
pub struct Flat {
    spec: ManifoldSpec,
    constant: f64,
}

impl Flat {
    pub fn new(spec: ManifoldSpec, constant: f64) -> Self {
        Self { spec, constant }
    }

    /// Uniform distribution on a product of spheres (normalization dropped).
    pub fn uniform(spec: ManifoldSpec) -> Self {
        Self::new(spec, 0.0)
    }
}

impl LogDensity for Flat {
    fn manifold(&self) -> &ManifoldSpec {
        &self.spec
    }

    fn evaluate(&self, _point: &[f64], gradient: &mut [f64]) -> f64 {
        gradient.iter_mut().for_each(|g| *g = 0.0);
        self.constant
    }
}

/// Adapter turning a closure `(point, gradient) -> value` into a [`LogDensity`].
pub struct FnDensity<F> {
    spec: ManifoldSpec,
    f: F,
}

impl<F> FnDensity<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    pub fn new(spec: ManifoldSpec, f: F) -> Self {
        Self { spec, f }
    }
}

impl<F> LogDensity for FnDensity<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    fn manifold(&self) -> &ManifoldSpec {
        &self.spec
    }

    fn evaluate(&self, point: &[f64], gradient: &mut [f64]) -> f64 {
        (self.f)(point, gradient)
    }
}

/// von Mises-Fisher distribution on `S^d`, unnormalized log density `kappa * mean . x`.
#[derive(Clone, Debug)]
pub struct VonMisesFisher {
    spec: ManifoldSpec,
    mean: Vec<f64>,
    kappa: f64,
}

impl VonMisesFisher {
    pub fn new(mean: Vec<f64>, kappa: f64) -> Result<Self> {
        if mean.len() < 2 {
            return Err(Error::Config(
                "vMF mean direction needs at least 2 coordinates".into(),
            ));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!(
                "vMF concentration must be positive, got {kappa}"
            )));
        }
        let n = norm(&mean);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPoint { block: 0, norm: n });
        }
        let mean = mean.iter().map(|m| m / n).collect::<Vec<_>>();
        Ok(Self {
            spec: ManifoldSpec::sphere(mean.len() - 1)?,
            mean,
            kappa,
        })
    }

    pub fn mean_direction(&self) -> &[f64] {
        &self.mean
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Intrinsic dimension `d` of the sphere `S^d`.
    pub fn sphere_dim(&self) -> usize {
        self.mean.len() - 1
    }

    /// `n` i.i.d. draws. Circle: Best-Fisher wrapped-Cauchy rejection on the
    /// angle. Higher spheres: Wood's rejection scheme on the cosine.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<ManifoldPoint> {
        (0..n)
            .map(|_| {
                let mut out = vec![0.0; self.mean.len()];
                self.sample_into(&mut out, rng);
                ManifoldPoint::from_coords_unchecked(out)
            })
            .collect()
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        if self.sphere_dim() == 1 {
            let angle = best_fisher_angle(self.kappa, rng);
            let (s, c) = angle.sin_cos();
            let (m0, m1) = (self.mean[0], self.mean[1]);
            out[0] = c * m0 - s * m1;
            out[1] = c * m1 + s * m0;
        } else {
            self.wood_into(out, rng);
        }
    }

    fn wood_into<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        let m = self.mean.len();
        let dim = (m - 1) as f64;
        let kappa = self.kappa;
        // b = (-2k + sqrt(4k^2 + (m-1)^2)) / (m-1), rationalized for large k.
        let b = dim / (2.0 * kappa + (4.0 * kappa * kappa + dim * dim).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let c = kappa * x0 + dim * (1.0 - x0 * x0).ln();
        let beta = Beta::new(0.5 * dim, 0.5 * dim).expect("positive Beta parameters");
        let w = loop {
            let z: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u: f64 = rng.random();
            if kappa * w + dim * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        // Sample about e_0, then reflect e_0 onto the mean direction.
        let mut tangent = vec![0.0; m - 1];
        sample_sphere(&mut tangent, rng);
        let r = (1.0 - w * w).max(0.0).sqrt();
        out[0] = w;
        for (o, t) in out[1..].iter_mut().zip(&tangent) {
            *o = r * t;
        }
        householder_from_e0(&self.mean, out);
    }
}

impl LogDensity for VonMisesFisher {
    fn manifold(&self) -> &ManifoldSpec {
        &self.spec
    }

    fn evaluate(&self, point: &[f64], gradient: &mut [f64]) -> f64 {
        for (g, m) in gradient.iter_mut().zip(&self.mean) {
            *g = self.kappa * m;
        }
        self.kappa * dot(&self.mean, point)
    }
}

/// Best & Fisher (1979) sampler for the von Mises angle around 0.
fn best_fisher_angle<R: Rng + ?Sized>(kappa: f64, rng: &mut R) -> f64 {
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let u3: f64 = rng.random();
        let z = (std::f64::consts::PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let angle = f.clamp(-1.0, 1.0).acos();
            return if u3 > 0.5 { angle } else { -angle };
        }
    }
}

/// Applies the reflection that maps `e_0` to `target` (both unit) to `x`.
fn householder_from_e0(target: &[f64], x: &mut [f64]) {
    let mut u: Vec<f64> = target.iter().map(|t| -t).collect();
    u[0] += 1.0;
    let un2 = dot(&u, &u);
    if un2 < 1e-30 {
        return;
    }
    let c = 2.0 * dot(&u, x) / un2;
    for (xi, ui) in x.iter_mut().zip(&u) {
        *xi -= c * ui;
    }
}

/// Unnormalized posterior `log r + log prior`. The ratio part drives the
/// sampler's dynamics; the sum is what the accept step and the optimizer see.
#[derive(Clone, Debug)]
pub struct Posterior<R, P> {
    ratio: R,
    prior: P,
}

pub fn compose_posterior<R: LogDensity, P: LogDensity>(
    ratio: R,
    prior: P,
) -> Result<Posterior<R, P>> {
    ratio.manifold().check_same(prior.manifold())?;
    Ok(Posterior { ratio, prior })
}

impl<R: LogDensity, P: LogDensity> Posterior<R, P> {
    pub fn ratio(&self) -> &R {
        &self.ratio
    }

    pub fn prior(&self) -> &P {
        &self.prior
    }
}

impl<R: LogDensity, P: LogDensity> LogDensity for Posterior<R, P> {
    fn manifold(&self) -> &ManifoldSpec {
        self.ratio.manifold()
    }

    fn evaluate(&self, point: &[f64], gradient: &mut [f64]) -> f64 {
        let mut prior_grad = vec![0.0; gradient.len()];
        let lp = self.prior.evaluate(point, &mut prior_grad);
        if lp == f64::NEG_INFINITY {
            gradient.iter_mut().for_each(|g| *g = 0.0);
            return f64::NEG_INFINITY;
        }
        let lr = self.ratio.evaluate(point, gradient);
        for (g, p) in gradient.iter_mut().zip(&prior_grad) {
            *g += p;
        }
        lr + lp
    }

    fn evaluate_batch(&self, points: &[f64], values: &mut [f64], gradients: &mut [f64]) {
        let mut prior_vals = vec![0.0; values.len()];
        let mut prior_grads = vec![0.0; gradients.len()];
        self.prior
            .evaluate_batch(points, &mut prior_vals, &mut prior_grads);
        self.ratio.evaluate_batch(points, values, gradients);
        let dim = self.manifold().ambient_dim();
        for (i, (v, lp)) in values.iter_mut().zip(&prior_vals).enumerate() {
            let g = &mut gradients[i * dim..(i + 1) * dim];
            if *lp == f64::NEG_INFINITY {
                *v = f64::NEG_INFINITY;
                g.iter_mut().for_each(|x| *x = 0.0);
            } else {
                *v += lp;
                for (gi, pi) in g.iter_mut().zip(&prior_grads[i * dim..(i + 1) * dim]) {
                    *gi += pi;
                }
            }
        }
    }
}

/// Uniform prior over the sphere blocks and a box over each Euclidean block.
/// Value `-inf` outside the boxes.
#[derive(Clone, Debug)]
pub struct BoxUniform {
    spec: ManifoldSpec,
    boxes: Vec<crate::manifold::BoxBounds>,
    log_volume: f64,
}

impl BoxUniform {
    pub fn new(spec: ManifoldSpec, boxes: Vec<crate::manifold::BoxBounds>) -> Result<Self> {
        let euclid: Vec<usize> = spec
            .blocks()
            .iter()
            .filter_map(|b| match b {
                Block::Euclidean(n) => Some(*n),
                _ => None,
            })
            .collect();
        if euclid.len() != boxes.len() {
            return Err(Error::Config(format!(
                "{} Euclidean blocks but {} boxes",
                euclid.len(),
                boxes.len()
            )));
        }
        for (n, b) in euclid.iter().zip(&boxes) {
            if *n != b.dim() {
                return Err(Error::dims("box bounds", *n, b.dim()));
            }
        }
        let log_volume = boxes.iter().map(|b| b.volume().ln()).sum();
        Ok(Self {
            spec,
            boxes,
            log_volume,
        })
    }

    pub fn boxes(&self) -> &[crate::manifold::BoxBounds] {
        &self.boxes
    }
}

impl LogDensity for BoxUniform {
    fn manifold(&self) -> &ManifoldSpec {
        &self.spec
    }

    fn evaluate(&self, point: &[f64], gradient: &mut [f64]) -> f64 {
        gradient.iter_mut().for_each(|g| *g = 0.0);
        let mut boxes = self.boxes.iter();
        for (block, range) in self.spec.layout() {
            if let Block::Euclidean(_) = block {
                let b = boxes.next().expect("validated box count");
                if !b.contains(&point[range]) {
                    return f64::NEG_INFINITY;
                }
            }
        }
        -self.log_volume
    }
}

/// Standard normal draws in ambient coordinates.
pub(crate) fn fill_standard_normal<R: Rng + ?Sized>(out: &mut [f64], rng: &mut R) {
    for o in out.iter_mut() {
        *o = rng.sample(StandardNormal);
    }
}
