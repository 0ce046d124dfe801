//! Command-line front end. Every command resolves a [`RunConfig`] (defaults,
//! then the `--config` file, then flags), echoes it to `config.toml` in the
//! output directory and writes CSV tables plus `key = value` reports.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    ess_pooled, frechet_mean, frechet_mean_distance, histogram, histogram_mode, mmd_linear,
    resultant_length,
};
use crate::error::{Error, Result, StageExt};
use crate::graspsim::{
    end_to_end_pipeline, grasp_map, grasp_training_data, read_training_csv, sample_grasp_posterior,
    success_probability, train_grasp_ensemble, write_training_csv, PipelineConfig,
};
use crate::io::{read_file, read_table, write_file, write_key_values, write_table};
use crate::manifold::{Block, ManifoldSpec};
use crate::mcmc::{SampleBatch, SamplerConfig};
use crate::nre::{RatioEnsemble, RatioModel, TrainConfig};
use crate::rng::derive_seed;
use crate::scene::{primitive_mass, sample_position_prior, Scene};
use crate::toy::{density_table_header, run_toy_vmf, ToyConfig};

const PRECEDENCE: &str =
    "Settings are resolved as built-in defaults, then the --config TOML file, \
then command-line flags; a flag always wins. Each flag sets the config key of the same name in the \
command's section (toy, scene_prior, grasp). The resolved configuration is written to \
<out>/config.toml and can be passed back with --config.\n\n\
Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numerical error.";

#[derive(Debug, Parser)]
#[command(name = "geosbi", version, about = "Likelihood-free geodesic HMC for grasp inference", after_help = PRECEDENCE)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration (see config.toml in any output directory)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Global seed; every random stream is derived from it
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on it)
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct SamplerArgs {
    #[arg(long)]
    pub chains: Option<usize>,
    /// Transitions per chain, burn-in included
    #[arg(long)]
    pub transitions: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub leapfrog_steps: Option<usize>,
}

impl SamplerArgs {
    fn apply(&self, c: &mut SamplerConfig) {
        set(&mut c.chains, self.chains);
        set(&mut c.transitions, self.transitions);
        set(&mut c.burn_in, self.burn_in);
        set(&mut c.step_size, self.step_size);
        set(&mut c.leapfrog_steps, self.leapfrog_steps);
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainArgs {
    /// Number of simulated training pairs
    #[arg(long)]
    pub sample_count: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Hidden layer widths, comma separated
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

impl TrainArgs {
    fn apply(&self, c: &mut TrainConfig) {
        set(&mut c.sample_count, self.sample_count);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.epochs, self.epochs);
        set(&mut c.learning_rate, self.learning_rate);
        set(&mut c.hidden, self.hidden.clone());
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct GraspArgs {
    #[arg(long)]
    pub sigma_d: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub p_slip: Option<f64>,
    #[arg(long)]
    pub m_col: Option<f64>,
    /// Ratio models in the ensemble
    #[arg(long)]
    pub members: Option<usize>,
    /// Multi-start ascent runs
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub min_acceptance: Option<f64>,
}

impl GraspArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        set(&mut c.model.sigma_d, self.sigma_d);
        set(&mut c.model.beta, self.beta);
        set(&mut c.model.p_slip, self.p_slip);
        set(&mut c.model.m_col, self.m_col);
        set(&mut c.members, self.members);
        set(&mut c.ascent.restarts, self.restarts);
        set(&mut c.ascent.max_iterations, self.max_iterations);
        set(&mut c.min_acceptance, self.min_acceptance);
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a ratio on the vMF toy problem and score HMC against the exact posterior
    ToyVmf {
        /// Sphere dimension d of S^d
        #[arg(long = "d", visible_alias = "sphere-dim")]
        sphere_dim: Option<usize>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        observations: Option<usize>,
        #[arg(long)]
        oracle_draws: Option<usize>,
        #[arg(long)]
        grid_points: Option<usize>,
        /// Use a saved ratio model instead of training
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Sample the occupancy-based position prior of a scene
    ScenePrior {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Histogram bins per axis
        #[arg(long)]
        bins: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Simulate grasp outcomes on a scene and train the ratio ensemble
    TrainRatio {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Train on an exported training set instead of simulating one
        #[arg(long)]
        training: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        grasp: GraspArgs,
    },
    /// Geodesic HMC on the grasp posterior with a trained ensemble
    SamplePosterior {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        grasp: GraspArgs,
    },
    /// Multi-start Riemannian MAP on the grasp posterior
    Map {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Sample CSV whose highest-density rows seed the ascents
        #[arg(long)]
        samples: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        grasp: GraspArgs,
    },
    /// Prior, training, posterior sampling, MAP and ground-truth evaluation
    GraspPipeline {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        grasp: GraspArgs,
    },
    /// ESS, means and MMD for a sample CSV
    Diagnostics {
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Second sample CSV to compare against
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Manifold of the sample columns, e.g. R2xS1
        #[arg(long)]
        manifold: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenePriorConfig {
    pub sampler: SamplerConfig,
    pub bins: usize,
}

impl Default for ScenePriorConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig {
                chains: 100,
                transitions: 5000,
                burn_in: 1000,
                ..SamplerConfig::default()
            },
            bins: 50,
        }
    }
}

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub output: PathBuf,
    pub scene: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub training: Option<PathBuf>,
    pub manifold: Option<String>,
    pub toy: ToyConfig,
    pub scene_prior: ScenePriorConfig,
    pub grasp: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            output: PathBuf::from("geosbi-out"),
            scene: None,
            model: None,
            samples: None,
            reference: None,
            training: None,
            manifold: None,
            toy: ToyConfig::default(),
            scene_prior: ScenePriorConfig::default(),
            grasp: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::Config(format!("cannot serialize run config: {e}")))
    }

    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_file(path)?, &path.display().to_string())
    }

    fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs --{flag}", self.command)))
    }

    fn toy(&self) -> ToyConfig {
        ToyConfig {
            seed: self.seed,
            ..self.toy.clone()
        }
    }

    fn grasp(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            ..self.grasp.clone()
        }
    }
}

fn resolve(command: &Command) -> Result<(RunConfig, Option<usize>)> {
    let common = match command {
        Command::ToyVmf { common, .. }
        | Command::ScenePrior { common, .. }
        | Command::TrainRatio { common, .. }
        | Command::SamplePosterior { common, .. }
        | Command::Map { common, .. }
        | Command::GraspPipeline { common, .. }
        | Command::Diagnostics { common, .. } => common,
    };
    let mut run = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut run.output, common.out.clone());
    set(&mut run.seed, common.seed);
    match command {
        Command::ToyVmf {
            sphere_dim,
            kappa,
            observations,
            oracle_draws,
            grid_points,
            model,
            train,
            sampler,
            ..
        } => {
            run.command = "toy-vmf".into();
            set(&mut run.toy.sphere_dim, *sphere_dim);
            set(&mut run.toy.kappa, *kappa);
            set(&mut run.toy.observations, *observations);
            set(&mut run.toy.oracle_draws, *oracle_draws);
            set(&mut run.toy.grid_points, *grid_points);
            if model.is_some() {
                run.model = model.clone();
            }
            train.apply(&mut run.toy.train);
            sampler.apply(&mut run.toy.sampler);
        }
        Command::ScenePrior {
            scene,
            bins,
            sampler,
            ..
        } => {
            run.command = "scene-prior".into();
            if scene.is_some() {
                run.scene = scene.clone();
            }
            set(&mut run.scene_prior.bins, *bins);
            sampler.apply(&mut run.scene_prior.sampler);
        }
        Command::TrainRatio {
            scene,
            training,
            train,
            grasp,
            ..
        } => {
            run.command = "train-ratio".into();
            if scene.is_some() {
                run.scene = scene.clone();
            }
            if training.is_some() {
                run.training = training.clone();
            }
            train.apply(&mut run.grasp.train);
            grasp.apply(&mut run.grasp);
        }
        Command::SamplePosterior {
            scene,
            model,
            sampler,
            grasp,
            ..
        } => {
            run.command = "sample-posterior".into();
            if scene.is_some() {
                run.scene = scene.clone();
            }
            if model.is_some() {
                run.model = model.clone();
            }
            sampler.apply(&mut run.grasp.sampler);
            grasp.apply(&mut run.grasp);
        }
        Command::Map {
            scene,
            model,
            samples,
            grasp,
            ..
        } => {
            run.command = "map".into();
            if scene.is_some() {
                run.scene = scene.clone();
            }
            if model.is_some() {
                run.model = model.clone();
            }
            if samples.is_some() {
                run.samples = samples.clone();
            }
            grasp.apply(&mut run.grasp);
        }
        Command::GraspPipeline {
            scene,
            train,
            sampler,
            grasp,
            ..
        } => {
            run.command = "grasp-pipeline".into();
            if scene.is_some() {
                run.scene = scene.clone();
            }
            train.apply(&mut run.grasp.train);
            sampler.apply(&mut run.grasp.sampler);
            grasp.apply(&mut run.grasp);
        }
        Command::Diagnostics {
            samples,
            reference,
            manifold,
            ..
        } => {
            run.command = "diagnostics".into();
            if samples.is_some() {
                run.samples = samples.clone();
            }
            if reference.is_some() {
                run.reference = reference.clone();
            }
            if manifold.is_some() {
                run.manifold = manifold.clone();
            }
        }
    }
    Ok((run, common.threads))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (run, threads) = match resolve(&cli.command) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {threads:?} worker threads: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&run, pool.current_num_threads())) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

/// Runs a resolved configuration, writing all outputs under `run.output`.
pub fn execute(run: &RunConfig, threads: usize) -> Result<()> {
    let start = Instant::now();
    let out = run.output.as_path();
    let echo = run.to_toml()?;
    let mut meta = match run.command.as_str() {
        "toy-vmf" => cmd_toy_vmf(run, out)?,
        "scene-prior" => cmd_scene_prior(run, out)?,
        "train-ratio" => cmd_train_ratio(run, out)?,
        "sample-posterior" => cmd_sample_posterior(run, out)?,
        "map" => cmd_map(run, out)?,
        "grasp-pipeline" => cmd_grasp_pipeline(run, out)?,
        "diagnostics" => cmd_diagnostics(run, out)?,
        other => return Err(Error::Config(format!("unknown command {other:?}"))),
    };
    write_file(&out.join("config.toml"), &echo)?;
    meta.insert(0, ("command".into(), run.command.clone()));
    meta.push(("threads".into(), threads.to_string()));
    meta.push((
        "wall_seconds".into(),
        format!("{:.3}", start.elapsed().as_secs_f64()),
    ));
    write_key_values(&out.join("run.txt"), &meta)
}

type Meta = Vec<(String, String)>;

fn prefixed(prefix: &str, kv: Vec<(String, String)>) -> Meta {
    kv.into_iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v))
        .collect()
}

fn load_scene(run: &RunConfig) -> Result<Scene> {
    Scene::load(run.require(&run.scene, "scene")?)
}

fn load_ensemble(run: &RunConfig) -> Result<Arc<RatioEnsemble>> {
    let path = run.require(&run.model, "model")?;
    let text = read_file(path)?;
    Ok(Arc::new(RatioEnsemble::from_text(
        &text,
        &path.display().to_string(),
    )?))
}

fn print_report(kv: &[(String, String)]) {
    for (k, v) in kv {
        println!("{k} = {v}");
    }
}

fn cmd_toy_vmf(run: &RunConfig, out: &Path) -> Result<Meta> {
    let config = run.toy();
    let model = match &run.model {
        Some(path) => Some(RatioModel::from_text(
            &read_file(path)?,
            &path.display().to_string(),
        )?),
        None => None,
    };
    let report = run_toy_vmf(&config, model)?;
    let m = config.sphere_dim + 1;
    write_file(&out.join("model.txt"), &report.model.to_text())?;
    let mut meta = Vec::new();
    let mut obs_rows = Vec::new();
    for (j, r) in report.runs.iter().enumerate() {
        r.batch
            .write_csv(&out.join(format!("samples_obs{j}.csv")))?;
        meta.extend(prefixed(&format!("obs{j}_"), r.batch.metadata()));
        let mut row = vec![j as f64];
        row.extend(&r.observation);
        obs_rows.push(row);
    }
    let mut header = vec!["observation".to_string()];
    header.extend((0..m).map(|i| format!("x_{i}")));
    write_table(&out.join("observations.csv"), &refs(&header), &obs_rows)?;
    write_table(
        &out.join("density_grid.csv"),
        &refs(&density_table_header(m)),
        &report.density_table,
    )?;
    let summary = report.summary();
    write_key_values(&out.join("report.txt"), &summary)?;
    print_report(&summary[..summary.len().min(8)]);
    Ok(meta)
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn cmd_scene_prior(run: &RunConfig, out: &Path) -> Result<Meta> {
    let scene = load_scene(run)?;
    let config = SamplerConfig {
        seed: derive_seed(run.seed, "prior"),
        ..run.scene_prior.sampler.clone()
    };
    let batch = sample_position_prior(&scene, &config)?;
    batch.write_csv(&out.join("draws.csv"))?;
    let bins = run.scene_prior.bins.max(1);
    let n = scene.dim();
    let ws = scene.workspace();
    let mut rows = Vec::new();
    let mut report = Vec::new();
    for k in 0..n {
        let values: Vec<f64> = batch.rows().map(|r| r[k]).collect();
        let hist = histogram(&values, ws.lower[k], ws.upper[k], bins);
        if let Some(mode) = histogram_mode(&hist) {
            report.push((format!("axis{k}_mode"), mode.to_string()));
        }
        rows.extend(hist.into_iter().map(|(c, f)| vec![k as f64, c, f]));
    }
    write_table(
        &out.join("histograms.csv"),
        &["axis", "bin_center", "fraction"],
        &rows,
    )?;
    if n == 2 {
        write_table(
            &out.join("histogram_2d.csv"),
            &["x", "y", "fraction"],
            &joint_histogram(&batch, &scene, bins),
        )?;
    }
    let (mass, outside) = primitive_mass(&scene, batch.draws());
    for (j, m) in mass.iter().enumerate() {
        report.push((format!("primitive{j}_mass"), m.to_string()));
    }
    report.push((
        "primitives_with_2pct_mass".into(),
        mass.iter().filter(|&&m| m >= 0.02).count().to_string(),
    ));
    report.push(("outside_workspace".into(), outside.to_string()));
    report.push((
        "mean_acceptance".into(),
        batch.mean_acceptance().to_string(),
    ));
    write_key_values(&out.join("report.txt"), &report)?;
    print_report(&report);
    Ok(batch.metadata())
}

fn joint_histogram(batch: &SampleBatch, scene: &Scene, bins: usize) -> Vec<Vec<f64>> {
    let ws = scene.workspace();
    let w: Vec<f64> = (0..2)
        .map(|k| (ws.upper[k] - ws.lower[k]) / bins as f64)
        .collect();
    let mut counts = vec![0usize; bins * bins];
    for r in batch.rows() {
        let ix = (((r[0] - ws.lower[0]) / w[0]) as usize).min(bins - 1);
        let iy = (((r[1] - ws.lower[1]) / w[1]) as usize).min(bins - 1);
        counts[ix * bins + iy] += 1;
    }
    let total = batch.len().max(1) as f64;
    let mut rows = Vec::with_capacity(bins * bins);
    for ix in 0..bins {
        for iy in 0..bins {
            rows.push(vec![
                ws.lower[0] + (ix as f64 + 0.5) * w[0],
                ws.lower[1] + (iy as f64 + 0.5) * w[1],
                counts[ix * bins + iy] as f64 / total,
            ]);
        }
    }
    rows
}

fn scene_id(run: &RunConfig) -> String {
    run.scene
        .as_deref()
        .and_then(Path::file_stem)
        .map_or("scene".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_train_ratio(run: &RunConfig, out: &Path) -> Result<Meta> {
    let config = run.grasp();
    let data = match &run.training {
        Some(path) => read_training_csv(path)?.0,
        None => {
            let scene = load_scene(run)?;
            let (prior, data) = grasp_training_data(&scene, &config)?;
            prior.write_csv(&out.join("prior_draws.csv"))?;
            write_training_csv(&out.join("training.csv"), &data, &scene_id(run))?;
            data
        }
    };
    let ensemble = train_grasp_ensemble(&data, &config)?;
    write_file(&out.join("ensemble.txt"), &ensemble.to_text())?;
    let losses: Vec<String> = ensemble
        .members()
        .iter()
        .map(|m| m.final_loss().map_or("none".into(), |l| l.to_string()))
        .collect();
    let report = vec![
        ("training_pairs".to_string(), data.len().to_string()),
        (
            "positive_rate".into(),
            (data.obs.iter().sum::<f64>() / data.len() as f64).to_string(),
        ),
        ("members".into(), ensemble.members().len().to_string()),
        ("member_final_loss".into(), losses.join(" ")),
    ];
    write_key_values(&out.join("report.txt"), &report)?;
    print_report(&report);
    Ok(Vec::new())
}

fn orientation_table(batch: &SampleBatch, bins: usize) -> Vec<Vec<f64>> {
    let n = batch.dim() - 2;
    let angles: Vec<f64> = batch.rows().map(|r| r[n + 1].atan2(r[n])).collect();
    histogram(&angles, -std::f64::consts::PI, std::f64::consts::PI, bins)
        .into_iter()
        .map(|(c, f)| vec![c, f])
        .collect()
}

fn cmd_sample_posterior(run: &RunConfig, out: &Path) -> Result<Meta> {
    let config = run.grasp();
    let scene = load_scene(run)?;
    let ensemble = load_ensemble(run)?;
    let prior_cfg = SamplerConfig {
        seed: derive_seed(config.seed, "prior"),
        ..config.prior_sampler.clone()
    };
    let prior = sample_position_prior(&scene, &prior_cfg).stage("position prior")?;
    let batch = sample_grasp_posterior(&scene, ensemble, &prior, &config)?;
    batch.write_csv(&out.join("posterior.csv"))?;
    write_table(
        &out.join("orientation_histogram.csv"),
        &["angle", "fraction"],
        &orientation_table(&batch, 36),
    )?;
    let n = scene.dim();
    let q: Vec<f64> = batch.rows().flat_map(|r| [r[n], r[n + 1]]).collect();
    let report = vec![
        (
            "mean_acceptance".to_string(),
            batch.mean_acceptance().to_string(),
        ),
        (
            "low_acceptance".into(),
            (batch.mean_acceptance() < config.min_acceptance).to_string(),
        ),
        ("nan_rejections".into(), batch.nan_rejections().to_string()),
        (
            "orientation_resultant".into(),
            resultant_length(&q, 2).to_string(),
        ),
    ];
    write_key_values(&out.join("report.txt"), &report)?;
    print_report(&report);
    Ok(batch.metadata())
}

/// Coordinate columns of a sample CSV (leading `chain,transition` dropped)
/// and the chain index of each row, if present.
fn sample_rows(path: &Path) -> Result<(Vec<String>, Vec<f64>, Option<Vec<usize>>)> {
    let (header, rows) = read_table(path)?;
    let skip = if header.len() >= 2 && header[0] == "chain" && header[1] == "transition" {
        2
    } else {
        0
    };
    let chains = (skip == 2).then(|| rows.iter().map(|r| r[0] as usize).collect());
    let data = rows.iter().flat_map(|r| r[skip..].to_vec()).collect();
    Ok((header[skip..].to_vec(), data, chains))
}

fn cmd_map(run: &RunConfig, out: &Path) -> Result<Meta> {
    let config = run.grasp();
    let scene = load_scene(run)?;
    let ensemble = load_ensemble(run)?;
    let pool = match &run.samples {
        Some(path) => sample_rows(path)?.1,
        None => {
            let prior_cfg = SamplerConfig {
                seed: derive_seed(config.seed, "prior"),
                ..config.prior_sampler.clone()
            };
            let prior = sample_position_prior(&scene, &prior_cfg).stage("position prior")?;
            sample_grasp_posterior(&scene, ensemble.clone(), &prior, &config)?
                .draws()
                .to_vec()
        }
    };
    let result = grasp_map(&scene, ensemble, &pool, &config)?;
    let rows: Vec<Vec<f64>> = result
        .runs
        .iter()
        .map(|r| {
            let mut row = r.point.coords().to_vec();
            row.extend([
                r.value,
                r.iterations as f64,
                if r.converged { 1.0 } else { 0.0 },
            ]);
            row
        })
        .collect();
    let spec = ManifoldSpec::hand(scene.dim())?;
    let mut header = spec.coordinate_names();
    header.extend([
        "log_density".into(),
        "iterations".into(),
        "converged".into(),
    ]);
    write_table(&out.join("map_runs.csv"), &refs(&header), &rows)?;
    let p = success_probability(&config.model, &scene, result.best.point.coords());
    let report = map_report(result.best.point.coords(), result.best.value, p, &config);
    write_key_values(&out.join("map.txt"), &report)?;
    print_report(&report);
    Ok(Vec::new())
}

fn map_report(point: &[f64], value: f64, p: f64, config: &PipelineConfig) -> Meta {
    vec![
        (
            "map_point".to_string(),
            point
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        ),
        ("map_log_density".into(), value.to_string()),
        ("success_probability".into(), p.to_string()),
        ("optimum".into(), config.model.optimum().to_string()),
    ]
}

fn cmd_grasp_pipeline(run: &RunConfig, out: &Path) -> Result<Meta> {
    let config = run.grasp();
    let scene = load_scene(run)?;
    let report = end_to_end_pipeline(&scene, &config, None)?;
    report.prior_draws.write_csv(&out.join("prior_draws.csv"))?;
    report.posterior.write_csv(&out.join("posterior.csv"))?;
    let hist: Vec<Vec<f64>> = report
        .orientation_histogram(36)
        .into_iter()
        .map(|(c, f)| vec![c, f])
        .collect();
    write_table(
        &out.join("orientation_histogram.csv"),
        &["angle", "fraction"],
        &hist,
    )?;
    write_file(&out.join("ensemble.txt"), &report.ensemble.to_text())?;
    write_key_values(
        &out.join("map.txt"),
        &map_report(
            report.map_point.coords(),
            report.map_log_density,
            report.success_probability,
            &config,
        ),
    )?;
    let summary = report.summary();
    write_key_values(&out.join("report.txt"), &summary)?;
    print_report(&summary);
    if report.low_acceptance {
        eprintln!(
            "warning: mean acceptance {} is below {}; the ratio may be badly trained",
            report.mean_acceptance(),
            config.min_acceptance
        );
    }
    let mut meta = report.posterior.metadata();
    meta.extend(report.stage_seconds.iter().map(|(s, t)| {
        (
            format!("seconds_{}", s.replace(' ', "_")),
            format!("{t:.3}"),
        )
    }));
    Ok(meta)
}

fn cmd_diagnostics(run: &RunConfig, out: &Path) -> Result<Meta> {
    let path = run.require(&run.samples, "samples")?;
    let (names, data, chains) = sample_rows(path)?;
    let spec: ManifoldSpec = match &run.manifold {
        Some(s) => s.parse()?,
        None => {
            return Err(Error::Config(
                "diagnostics needs --manifold (e.g. R2xS1)".into(),
            ))
        }
    };
    spec.check_len("sample columns", names.len())?;
    let d = names.len();
    let rows = data.len() / d;
    let chain_of = chains.unwrap_or_else(|| vec![0; rows]);
    let n_chains = chain_of.iter().copied().max().map_or(0, |c| c + 1);
    let mut report = vec![
        ("draws".to_string(), rows.to_string()),
        ("chains".into(), n_chains.to_string()),
    ];
    for (k, name) in names.iter().enumerate() {
        let mut traces = vec![Vec::new(); n_chains];
        for (i, &c) in chain_of.iter().enumerate() {
            traces[c].push(data[i * d + k]);
        }
        let e = ess_pooled(&traces)?;
        report.push((format!("ess_{name}"), e.ess.to_string()));
        let mean = (0..rows).map(|i| data[i * d + k]).sum::<f64>() / rows as f64;
        report.push((format!("mean_{name}"), mean.to_string()));
    }
    let reference = match &run.reference {
        Some(p) => {
            let (rnames, rdata, _) = sample_rows(p)?;
            if rnames.len() != d {
                return Err(Error::dims("reference sample columns", d, rnames.len()));
            }
            let mmd = mmd_linear(&data, &rdata, d)?;
            report.push(("mmd".into(), mmd.mmd.to_string()));
            report.push(("mmd_squared".into(), mmd.mmd_squared.to_string()));
            Some(rdata)
        }
        None => None,
    };
    for (b, (block, range)) in spec.layout().enumerate() {
        if let Block::Sphere(_) = block {
            let w = range.len();
            let part: Vec<f64> = (0..rows)
                .flat_map(|i| data[i * d + range.start..i * d + range.end].to_vec())
                .collect();
            let fm = frechet_mean(&part, w)?;
            report.push((
                format!("block{b}_frechet_mean"),
                fm.coords()
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            ));
            report.push((
                format!("block{b}_resultant_length"),
                resultant_length(&part, w).to_string(),
            ));
            if let Some(rdata) = &reference {
                let rrows = rdata.len() / d;
                let rpart: Vec<f64> = (0..rrows)
                    .flat_map(|i| rdata[i * d + range.start..i * d + range.end].to_vec())
                    .collect();
                report.push((
                    format!("block{b}_frechet_distance"),
                    frechet_mean_distance(&part, &rpart, w)?.to_string(),
                ));
            }
        }
    }
    write_key_values(&out.join("diagnostics.txt"), &report)?;
    print_report(&report);
    Ok(Vec::new())
}
