//! Independent oracles shared by unit and integration tests. Only std and rand
//! here, so the file can be compiled both inside and outside the crate.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;

/// Central finite-difference gradient.
pub fn fd_gradient<F: Fn(&[f64], &mut [f64]) -> f64>(f: &F, point: &[f64], step: f64) -> Vec<f64> {
    let mut scratch = vec![0.0; point.len()];
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x, &mut scratch);
            x[i] = orig - step;
            let down = f(&x, &mut scratch);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest componentwise error relative to the largest finite-difference
/// component, with an absolute floor of 1e-6.
pub fn gradient_error<F: Fn(&[f64], &mut [f64]) -> f64>(f: &F, point: &[f64]) -> (f64, f64) {
    let mut analytic = vec![0.0; point.len()];
    f(point, &mut analytic);
    let fd = fd_gradient(f, point, 1e-5);
    let err = analytic
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = fd.iter().map(|x| x.abs()).fold(0.0, f64::max);
    (err, (1e-4 * scale).max(1e-6))
}

pub fn assert_gradient<F: Fn(&[f64], &mut [f64]) -> f64>(f: F, point: &[f64]) {
    let (err, tol) = gradient_error(&f, point);
    assert!(err <= tol, "gradient error {err:e} > {tol:e} at {point:?}");
}

fn uniform_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// vMF draws by accepting uniform proposals u with probability
/// exp(kappa (mean.u - 1)).
pub fn rejection_vmf<R: Rng + ?Sized>(
    mean: &[f64],
    kappa: f64,
    n: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = uniform_sphere(mean.len(), rng);
        let c: f64 = u.iter().zip(mean).map(|(a, b)| a * b).sum();
        if rng.random::<f64>() < (kappa * (c - 1.0)).exp() {
            out.push(u);
        }
    }
    out
}

pub fn mean_of<T: AsRef<[f64]>>(samples: &[T]) -> Vec<f64> {
    let dim = samples[0].as_ref().len();
    let mut m = vec![0.0; dim];
    for s in samples {
        for (mi, x) in m.iter_mut().zip(s.as_ref()) {
            *mi += x;
        }
    }
    m.iter_mut().for_each(|x| *x /= samples.len() as f64);
    m
}

/// Rotates the first two coordinates by `angle`.
pub fn rotation_2d(angle: f64, q: &[f64]) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = q.to_vec();
    out[0] = c * q[0] - s * q[1];
    out[1] = s * q[0] + c * q[1];
    out
}

/// Random rotation of R^n (QR of a Gaussian matrix by Gram-Schmidt), row-major.
pub fn random_rotation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let c: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= c * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

pub fn apply(rot: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    rot.iter()
        .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Modified Bessel function I_nu(x) for integer or half-integer nu by
/// trapezoidal quadrature of its integral representation (nu integer) or the
/// power series (any nu); used for analytic vMF normalizers.
pub fn bessel_i(nu: f64, x: f64) -> f64 {
    // power series: sum_k (x/2)^(2k+nu) / (k! Gamma(k+nu+1))
    let half = x / 2.0;
    let mut term = half.powf(nu) / gamma(nu + 1.0);
    let mut sum = term;
    for k in 1..500 {
        let kf = k as f64;
        term *= half * half / (kf * (kf + nu));
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Lanczos approximation of the Gamma function.
pub fn gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut a = G[0];
        let t = x + 7.5;
        for (i, g) in G.iter().enumerate().skip(1) {
            a += g / (x + i as f64);
        }
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
    }
}

/// Accuracy of the Bayes-optimal classifier `kappa θᵀx > log I0(kappa)` on
/// balanced joint / independent pairs for the vMF toy on S¹, by trapezoid
/// quadrature over the angle between θ and x.
pub fn bayes_accuracy_s1(kappa: f64) -> f64 {
    let i0 = bessel_i(0.0, kappa);
    let cut = (i0.ln() / kappa).acos();
    let n = 200_000;
    let h = cut / n as f64;
    let mut joint = 0.0;
    for i in 0..=n {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        joint += w * (kappa * (i as f64 * h).cos()).exp();
    }
    let joint = 2.0 * joint * h / (2.0 * std::f64::consts::PI * i0);
    let marginal = 1.0 - cut / std::f64::consts::PI;
    0.5 * (joint + marginal)
}
