//! Analytic scenes: primitives with signed distance fields, a smooth
//! occupancy model `p(o=1|x) = logistic(-sdf(x)/τ)`, and the position and hand
//! priors built on it.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use crate::density::LogDensity;
use crate::error::{Error, Result};
use crate::manifold::{BoxBounds, ManifoldPoint, ManifoldSpec};
use crate::mcmc::{euclidean_hmc, SampleBatch, SamplerConfig};
use crate::nre::{sigmoid, softplus};
use crate::rng::{derive_seed, rng_from_seed};

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Disk in 2-D, ball in 3-D.
    Disk { radius: f64 },
    /// Rectangle or cuboid with the given half extents (local axes).
    Box { half: Vec<f64> },
    /// Segment of half length `half_length` along the local x axis, inflated by `radius`.
    Capsule { half_length: f64, radius: f64 },
}

impl Shape {
    pub fn tag(&self) -> &'static str {
        match self {
            Shape::Disk { .. } => "disk",
            Shape::Box { .. } => "box",
            Shape::Capsule { .. } => "capsule",
        }
    }
}

/// A shape placed at `center` and rotated by `angle` about the z axis. The
/// local x axis is the principal axis used for grasp alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec<f64>,
    pub angle: f64,
}

impl Primitive {
    /// Signed distance and its gradient.
    pub fn sdf(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let n = x.len();
        let (s, c) = self.angle.sin_cos();
        // local coordinates: rotate (x - center) by -angle in the xy plane
        let mut p = [0.0; 3];
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        p[0] = c * dx + s * dy;
        p[1] = -s * dx + c * dy;
        if n == 3 {
            p[2] = x[2] - self.center[2];
        }
        let p = &p[..n];
        let mut g = [0.0; 3];
        let value = match &self.shape {
            Shape::Disk { radius } => {
                let r = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r > 0.0 {
                    for (gi, pi) in g.iter_mut().zip(p) {
                        *gi = pi / r;
                    }
                }
                r - radius
            }
            Shape::Box { half } => {
                let q: Vec<f64> = p.iter().zip(half).map(|(pi, h)| pi.abs() - h).collect();
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                if outside > 0.0 {
                    for i in 0..n {
                        g[i] = p[i].signum() * q[i].max(0.0) / outside;
                    }
                    outside
                } else {
                    let k = (0..n).max_by(|&a, &b| q[a].total_cmp(&q[b])).unwrap();
                    g[k] = if p[k] >= 0.0 { 1.0 } else { -1.0 };
                    q[k]
                }
            }
            Shape::Capsule {
                half_length,
                radius,
            } => {
                let t = p[0].clamp(-half_length, *half_length);
                let mut v = [0.0; 3];
                v[..n].copy_from_slice(p);
                v[0] -= t;
                let r = v[..n].iter().map(|a| a * a).sum::<f64>().sqrt();
                if r > 0.0 {
                    for i in 0..n {
                        g[i] = v[i] / r;
                    }
                }
                r - radius
            }
        };
        // rotate the local gradient back by +angle
        grad[0] = c * g[0] - s * g[1];
        grad[1] = s * g[0] + c * g[1];
        if n == 3 {
            grad[2] = g[2];
        }
        value
    }

    /// Axis-aligned bounds of the primitive.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.center.len();
        let (s, c) = self.angle.sin_cos();
        let mut ext = vec![0.0; n];
        match &self.shape {
            Shape::Disk { radius } => ext.iter_mut().for_each(|e| *e = *radius),
            Shape::Box { half } => {
                ext[0] = c.abs() * half[0] + s.abs() * half[1];
                ext[1] = s.abs() * half[0] + c.abs() * half[1];
                if n == 3 {
                    ext[2] = half[2];
                }
            }
            Shape::Capsule {
                half_length,
                radius,
            } => {
                ext[0] = c.abs() * half_length + radius;
                ext[1] = s.abs() * half_length + radius;
                if n == 3 {
                    ext[2] = *radius;
                }
            }
        }
        (
            self.center.iter().zip(&ext).map(|(c, e)| c - e).collect(),
            self.center.iter().zip(&ext).map(|(c, e)| c + e).collect(),
        )
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.center.len() != dim {
            return Err(Error::dims("primitive center", dim, self.center.len()));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let ok = match &self.shape {
            Shape::Disk { radius } => positive(*radius),
            Shape::Box { half } => {
                if half.len() != dim {
                    return Err(Error::dims("box half extents", dim, half.len()));
                }
                half.iter().all(|h| positive(*h))
            }
            Shape::Capsule {
                half_length,
                radius,
            } => *half_length >= 0.0 && positive(*radius),
        };
        if !ok || !self.angle.is_finite() {
            return Err(Error::Config(format!(
                "invalid {} size parameters",
                self.shape.tag()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    workspace: BoxBounds,
    primitives: Vec<Primitive>,
    temperature: f64,
}

impl Scene {
    pub fn new(workspace: BoxBounds, primitives: Vec<Primitive>, temperature: f64) -> Result<Self> {
        let dim = workspace.dim();
        if dim != 2 && dim != 3 {
            return Err(Error::Config(format!(
                "workspace must be 2-D or 3-D, got {dim}-D"
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        for (i, p) in primitives.iter().enumerate() {
            p.validate(dim)?;
            if !workspace.contains(&p.center) {
                return Err(Error::Config(format!(
                    "primitive {i} has its center outside the workspace"
                )));
            }
        }
        Ok(Self {
            workspace,
            primitives,
            temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.workspace.dim()
    }

    pub fn workspace(&self) -> &BoxBounds {
        &self.workspace
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Smooth minimum `m - τ ln Σ exp(-(d_i - m)/τ)` of the primitive SDFs,
    /// with `m = min d_i`; equals the single SDF when there is one primitive.
    /// An empty scene has SDF 0 everywhere.
    pub fn sdf(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.dim();
        grad[..n].iter_mut().for_each(|g| *g = 0.0);
        match self.primitives.len() {
            0 => 0.0,
            1 => self.primitives[0].sdf(x, grad),
            k => {
                let mut d = vec![0.0; k];
                let mut g = vec![0.0; k * n];
                for (i, p) in self.primitives.iter().enumerate() {
                    d[i] = p.sdf(x, &mut g[i * n..(i + 1) * n]);
                }
                let m = d.iter().copied().fold(f64::INFINITY, f64::min);
                let tau = self.temperature;
                let w: Vec<f64> = d.iter().map(|di| (-(di - m) / tau).exp()).collect();
                let total: f64 = w.iter().sum();
                for i in 0..k {
                    let wi = w[i] / total;
                    for j in 0..n {
                        grad[j] += wi * g[i * n + j];
                    }
                }
                m - tau * total.ln()
            }
        }
    }

    /// `log p(o=1|x) = log logistic(-sdf/τ) = -softplus(sdf/τ)` and its gradient.
    pub fn occupancy_log_prob(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let s = self.sdf(x, grad) / self.temperature;
        let scale = -sigmoid(s) / self.temperature;
        grad[..self.dim()].iter_mut().for_each(|g| *g *= scale);
        -softplus(s)
    }

    pub fn occupancy(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        sigmoid(-self.sdf(x, &mut g) / self.temperature)
    }

    /// Index and signed distance of the primitive with the smallest SDF.
    pub fn nearest_primitive(&self, x: &[f64]) -> Option<(usize, f64)> {
        let mut g = vec![0.0; self.dim()];
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.sdf(x, &mut g)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Bounding box of all primitives clipped to the workspace; the workspace
    /// itself for an empty scene.
    pub fn objects_bounding_box(&self) -> BoxBounds {
        if self.primitives.is_empty() {
            return self.workspace.clone();
        }
        let n = self.dim();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for p in &self.primitives {
            let (a, b) = p.bounds();
            for i in 0..n {
                lo[i] = lo[i].min(a[i]).max(self.workspace.lower[i]);
                hi[i] = hi[i].max(b[i]).min(self.workspace.upper[i]);
            }
        }
        BoxBounds::new(lo, hi).expect("primitive centers lie inside the workspace")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_file(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses the text scene format:
    ///
    /// ```text
    /// scene-format 1
    /// workspace 0 1 0 1          # min/max per axis
    /// temperature 0.01           # optional
    /// disk center=0.5,0.5 radius=0.1
    /// box center=0.3,0.7 half=0.1,0.04 angle=0.5
    /// capsule center=0.7,0.3 half_length=0.08 radius=0.03 angle=1.2
    /// ```
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: source.to_string(),
            line,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, "scene-format 1")) => {}
            Some((n, l)) => {
                return Err(err(
                    n,
                    format!("expected header `scene-format 1`, got {l:?}"),
                ))
            }
            None => return Err(err(1, "empty scene file".into())),
        }
        let mut workspace: Option<BoxBounds> = None;
        let mut temperature = DEFAULT_TEMPERATURE;
        let mut primitives = Vec::new();
        for (n, line) in lines {
            let mut tokens = line.split_whitespace();
            let head = tokens.next().unwrap_or_default();
            match head {
                "workspace" => {
                    let v = tokens
                        .map(|t| {
                            t.parse::<f64>()
                                .map_err(|_| err(n, format!("bad number {t:?}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if v.len() != 4 && v.len() != 6 {
                        return Err(err(
                            n,
                            "workspace needs min/max pairs for 2 or 3 axes".into(),
                        ));
                    }
                    let lo = v.iter().step_by(2).copied().collect();
                    let hi = v.iter().skip(1).step_by(2).copied().collect();
                    workspace = Some(BoxBounds::new(lo, hi).map_err(|e| err(n, e.to_string()))?);
                }
                "temperature" => {
                    let t = tokens
                        .next()
                        .ok_or_else(|| err(n, "missing temperature".into()))?;
                    temperature = t
                        .parse()
                        .map_err(|_| err(n, format!("bad temperature {t:?}")))?;
                }
                "disk" | "ball" | "box" | "capsule" => {
                    let dim = workspace
                        .as_ref()
                        .ok_or_else(|| err(n, "primitive before workspace".into()))?
                        .dim();
                    let p = parse_primitive(head, tokens, dim).map_err(|m| err(n, m))?;
                    p.validate(dim).map_err(|e| err(n, e.to_string()))?;
                    primitives.push(p);
                }
                other => return Err(err(n, format!("unknown shape tag `{other}`"))),
            }
        }
        let workspace = workspace.ok_or_else(|| err(1, "missing workspace line".into()))?;
        Scene::new(workspace, primitives, temperature).map_err(|e| match e {
            Error::Config(m) => err(1, m),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("scene-format 1\nworkspace");
        for (lo, hi) in self.workspace.lower.iter().zip(&self.workspace.upper) {
            let _ = write!(s, " {lo} {hi}");
        }
        let _ = writeln!(s, "\ntemperature {}", self.temperature);
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        for p in &self.primitives {
            let _ = write!(s, "{} center={}", p.shape.tag(), list(&p.center));
            match &p.shape {
                Shape::Disk { radius } => {
                    let _ = write!(s, " radius={radius}");
                }
                Shape::Box { half } => {
                    let _ = write!(s, " half={}", list(half));
                }
                Shape::Capsule {
                    half_length,
                    radius,
                } => {
                    let _ = write!(s, " half_length={half_length} radius={radius}");
                }
            }
            let _ = writeln!(s, " angle={}", p.angle);
        }
        s
    }
}

fn parse_primitive<'a>(
    tag: &str,
    fields: impl Iterator<Item = &'a str>,
    dim: usize,
) -> std::result::Result<Primitive, String> {
    let mut center = None;
    let mut radius = None;
    let mut half = None;
    let mut half_length = None;
    let mut angle = 0.0;
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {f:?}"))?;
        let nums = || {
            v.split(',')
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| format!("bad number {t:?} in {k}"))
                })
                .collect::<std::result::Result<Vec<f64>, String>>()
        };
        let one = || {
            v.parse::<f64>()
                .map_err(|_| format!("bad number {v:?} for {k}"))
        };
        match k {
            "center" => center = Some(nums()?),
            "radius" => radius = Some(one()?),
            "half" => half = Some(nums()?),
            "half_length" => half_length = Some(one()?),
            "angle" => angle = one()?,
            _ => return Err(format!("unknown field `{k}` for {tag}")),
        }
    }
    let center = center.ok_or("missing center")?;
    if center.len() != dim {
        return Err(format!(
            "center has {} coordinates, workspace is {dim}-D",
            center.len()
        ));
    }
    let shape = match tag {
        "disk" | "ball" => Shape::Disk {
            radius: radius.ok_or("missing radius")?,
        },
        "box" => Shape::Box {
            half: half.ok_or("missing half")?,
        },
        _ => Shape::Capsule {
            half_length: half_length.ok_or("missing half_length")?,
            radius: radius.ok_or("missing radius")?,
        },
    };
    Ok(Primitive {
        shape,
        center,
        angle,
    })
}

/// `log p(o=1|x) + log p(x)` with `p(x)` uniform on the workspace box.
#[derive(Clone, Debug)]
pub struct PositionPrior {
    scene: Scene,
    spec: ManifoldSpec,
    log_volume: f64,
}

impl PositionPrior {
    pub fn new(scene: Scene) -> Self {
        let spec = ManifoldSpec::euclidean(scene.dim()).expect("2-D or 3-D");
        let log_volume = scene.workspace.volume().ln();
        Self {
            scene,
            spec,
            log_volume,
        }
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }
}

impl LogDensity for PositionPrior {
    fn manifold(&self) -> &ManifoldSpec {
        &self.spec
    }

    fn evaluate(&self, point: &[f64], gradient: &mut [f64]) -> f64 {
        if !self.scene.workspace.contains(point) {
            gradient.iter_mut().for_each(|g| *g = 0.0);
            return f64::NEG_INFINITY;
        }
        self.scene.occupancy_log_prob(point, gradient) - self.log_volume
    }
}

/// Euclidean HMC on the position prior; chains start uniformly in the
/// objects' bounding box.
pub fn sample_position_prior(scene: &Scene, config: &SamplerConfig) -> Result<SampleBatch> {
    config.validate()?;
    let prior = PositionPrior::new(scene.clone());
    let bbox = scene.objects_bounding_box();
    let mut rng = rng_from_seed(derive_seed(config.seed, "init"));
    let init: Vec<ManifoldPoint> = (0..config.chains)
        .map(|_| {
            let mut x = vec![0.0; scene.dim()];
            bbox.fill_uniform(&mut x, &mut rng);
            ManifoldPoint::from_coords_unchecked(x)
        })
        .collect();
    euclidean_hmc(&prior, &init, config)
}

/// Share of position draws (rows of width `scene.dim()`) attributed to each
/// primitive by smallest SDF, and the share outside the workspace.
pub fn primitive_mass(scene: &Scene, draws: &[f64]) -> (Vec<f64>, f64) {
    let n = scene.dim();
    let mut counts = vec![0usize; scene.primitives().len()];
    let mut outside = 0usize;
    let rows = draws.len() / n;
    for x in draws.chunks_exact(n) {
        if !scene.workspace().contains(x) {
            outside += 1;
        }
        if let Some((j, _)) = scene.nearest_primitive(x) {
            counts[j] += 1;
        }
    }
    let total = rows.max(1) as f64;
    (
        counts.iter().map(|&c| c as f64 / total).collect(),
        outside as f64 / total,
    )
}

/// `log p(x|o=1) + log p(q)` on R^n x S¹ with `p(q)` uniform on the circle.
#[derive(Clone, Debug)]
pub struct HandPrior {
    position: PositionPrior,
    spec: ManifoldSpec,
}

pub fn hand_prior(scene: &Scene) -> HandPrior {
    HandPrior {
        position: PositionPrior::new(scene.clone()),
        spec: ManifoldSpec::hand(scene.dim()).expect("2-D or 3-D"),
    }
}

impl HandPrior {
    pub fn scene(&self) -> &Scene {
        &self.position.scene
    }

    pub fn position(&self) -> &PositionPrior {
        &self.position
    }
}

impl LogDensity for HandPrior {
    fn manifold(&self) -> &ManifoldSpec {
        &self.spec
    }

    fn evaluate(&self, point: &[f64], gradient: &mut [f64]) -> f64 {
        let n = self.position.scene.dim();
        gradient[n..].iter_mut().for_each(|g| *g = 0.0);
        self.position.evaluate(&point[..n], &mut gradient[..n]) - TAU.ln()
    }
}

/// Uniform angle on the circle as a unit vector.
pub fn random_orientation<R: rand::Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    let t: f64 = rng.random_range(0.0..TAU);
    [t.cos(), t.sin()]
}
