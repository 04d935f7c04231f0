//! The `ggode` command line: data generation, splitting, training,
//! evaluation, rollout export and embedding export.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ggode_core::datagen::{
    default_lj_box, generate_record, lj_catalog, rampbox_catalog, Boundary, EnvironmentSpec, SimSettings,
    TrajectoryRecord,
};
use ggode_core::model::{embedding_of, predict_trajectory, Model, PreparedTrajectory};
use ggode_core::training::{
    chunk_split, evaluate_rollout_mse, train, LastObservedPredictor, ModelPredictor, OraclePredictor, Predictor,
    SplitConfig,
};
use ggode_core::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::container::{self, PayloadBuilder, Span};
use crate::dataset::{file_hash, read_dataset, read_json, write_catalog, write_dataset, write_json};
use crate::error::{Error, Result};
use crate::experiment::{prepare, PERCENTAGES};
use crate::run::{percent_map, LossLog, MetricsReport, RunConfig, RunDir, SplitManifest, TrainingFile};

#[derive(Debug, Parser)]
#[command(name = "ggode", version, about = "Environment-conditioned graph ODE simulator")]
pub struct Cli {
    /// Worker threads (falls back to GGODE_THREADS, then all cores).
    #[arg(long, global = true, env = "GGODE_THREADS")]
    pub threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a multi-environment dataset and its environment catalog.
    GenData(GenDataArgs),
    /// Split a dataset by environment and into training windows.
    Split(SplitArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Rollout MSE of a trained run on its test partitions.
    Eval(EvalArgs),
    /// Predicted positions of one trajectory.
    Rollout(RolloutArgs),
    /// Environment embeddings of every window as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    #[value(name = "lj", alias = "lennard_jones")]
    Lj,
    #[value(name = "ramp_box", alias = "ramp-box")]
    RampBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundaryArg {
    Periodic,
    Reflective,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    #[arg(long)]
    pub envs: usize,
    #[arg(long)]
    pub trajs_per_env: usize,
    #[arg(long)]
    pub particles: usize,
    /// Recorded steps per trajectory.
    #[arg(long)]
    pub steps: usize,
    /// Integrator step.
    #[arg(long)]
    pub dt: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset file; the catalog goes next to it unless --catalog is given.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Integrator steps per recorded step.
    #[arg(long, default_value_t = 1)]
    pub record_every: usize,
    /// Spatial dimension of Lennard-Jones systems (ramp boxes are 2-D).
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Temperature range spread over Lennard-Jones environments.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [0.5, 1.5])]
    pub temperature: Vec<f64>,
    /// Drag coefficient range spread over Lennard-Jones environments.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [0.0, 0.0])]
    pub damping: Vec<f64>,
    #[arg(long, value_enum, default_value_t = BoundaryArg::Periodic)]
    pub boundary: BoundaryArg,
    /// Box edge; defaults to a size that fits the particles.
    #[arg(long)]
    pub box_size: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub obs_len: usize,
    #[arg(long)]
    pub pred_len: usize,
    #[arg(long)]
    pub interval: usize,
    #[arg(long, default_value_t = 0.2)]
    pub inductive_frac: f64,
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    /// JSON file with optional `model` and `train` blocks.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Force ordered reductions (the training loop is always sequential).
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Trans,
    Induct,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictorChoice {
    Model,
    Oracle,
    LastObserved,
}

impl PredictorChoice {
    fn name(self) -> &'static str {
        match self {
            PredictorChoice::Model => "model",
            PredictorChoice::Oracle => "oracle",
            PredictorChoice::LastObserved => "last-observed",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Both)]
    pub split: SplitChoice,
    /// Observed steps; defaults to the split's observation length.
    #[arg(long)]
    pub obs_len: Option<usize>,
    #[arg(long, value_enum, default_value_t = PredictorChoice::Model)]
    pub predictor: PredictorChoice,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Index of the trajectory in the dataset file.
    #[arg(long)]
    pub traj_id: usize,
    #[arg(long)]
    pub obs_len: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `args` (program name first) and run the command; stdout receives
/// a one-line summary.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    run(cli, out)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Usage(e.to_string()))?;
    match cli.command {
        Command::GenData(a) => gen_data(&a, &pool, out),
        Command::Split(a) => split(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Rollout(a) => rollout(&a, out),
        Command::ExportEmbeddings(a) => export_embeddings(&a, out),
    }
}

fn say(out: &mut dyn Write, line: String) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn catalog_path(args: &GenDataArgs) -> PathBuf {
    args.catalog.clone().unwrap_or_else(|| {
        let mut name = args.out.file_stem().unwrap_or_default().to_os_string();
        name.push(".catalog.json");
        args.out.with_file_name(name)
    })
}

pub fn build_catalog(args: &GenDataArgs) -> Result<Vec<EnvironmentSpec>> {
    if args.envs == 0 || args.trajs_per_env == 0 {
        return Err(Error::Usage("--envs and --trajs-per-env must be positive".into()));
    }
    let catalog = match args.kind {
        Kind::Lj => {
            let boundary = match args.boundary {
                BoundaryArg::Periodic => Boundary::Periodic,
                BoundaryArg::Reflective => Boundary::Reflective,
            };
            let extent = match args.box_size {
                Some(l) => vec![l; args.dim],
                None => default_lj_box(args.particles, args.dim),
            };
            lj_catalog(
                args.envs,
                (args.temperature[0], args.temperature[1]),
                (args.damping[0], args.damping[1]),
                &extent,
                boundary,
            )
        }
        Kind::RampBox => {
            let l = args.box_size.unwrap_or(4.0);
            let mut rng = Rng::new(args.seed).derive(&[0xca7a]);
            rampbox_catalog(args.envs, [l, l], &mut rng)
        }
    };
    for env in &catalog {
        env.validate()?;
    }
    Ok(catalog)
}

fn gen_data(args: &GenDataArgs, pool: &rayon::ThreadPool, out: &mut dyn Write) -> Result<()> {
    let catalog = build_catalog(args)?;
    let settings = SimSettings {
        n_particles: args.particles,
        steps: args.steps,
        dt: args.dt,
        record_every: args.record_every,
    };
    settings.validate()?;
    let jobs: Vec<(usize, usize)> = (0..catalog.len())
        .flat_map(|e| (0..args.trajs_per_env).map(move |k| (e, k)))
        .collect();
    // Each record depends only on (seed, env, index), so the parallel order
    // does not affect the output.
    let records = pool.install(|| {
        jobs.par_iter()
            .map(|&(e, k)| generate_record(&catalog[e], k, &settings, args.seed))
            .collect::<ggode_core::Result<Vec<TrajectoryRecord>>>()
    })?;
    write_dataset(&args.out, &records, None)?;
    let cpath = catalog_path(args);
    write_catalog(&cpath, &catalog)?;
    say(
        out,
        format!(
            "wrote {} records from {} environments to {} (catalog {})",
            records.len(),
            catalog.len(),
            args.out.display(),
            cpath.display()
        ),
    )
}

fn split(args: &SplitArgs, out: &mut dyn Write) -> Result<()> {
    let config = SplitConfig {
        obs_len: args.obs_len,
        pred_len: args.pred_len,
        interval: args.interval,
        inductive_env_fraction: args.inductive_frac,
        train_fraction: args.train_frac,
        val_fraction: args.val_frac,
        test_fraction: args.test_frac,
    };
    config.validate()?;
    let (records, _) = read_dataset(&args.data)?;
    let manifest = SplitManifest::build(&records, config, args.seed, file_hash(&args.data)?)?;
    manifest.write(&args.out)?;
    let s = &manifest.samples;
    say(
        out,
        format!(
            "train {} val {} test_trans {} test_induct {} samples; inductive envs {:?}",
            s.train.len(),
            s.val.len(),
            s.test_trans.len(),
            s.test_induct.len(),
            manifest.trajectories.inductive_envs
        ),
    )
}

fn train_cmd(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = SplitManifest::read(&args.splits)?;
    let mut file: TrainingFile = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainingFile::default(),
    };
    if let Some(e) = args.epochs {
        file.train.epochs = e;
    }
    if let Some(s) = args.seed {
        file.train.seed = s;
    }
    if args.deterministic {
        file.train.deterministic = true;
    }
    let dir = RunDir::create(&args.out_dir)?;
    let (records, _) = read_dataset(&args.data)?;
    if let Some(r) = records.first() {
        file.model.pos_dim = r.dim;
    }
    let config = RunConfig {
        version: container::FORMAT_VERSION,
        data: absolute(&args.data),
        splits: absolute(&args.splits),
        data_hash: manifest.data_hash.clone(),
        model: file.model,
        train: file.train,
    };
    write_json(&dir.config(), &config)?;
    manifest.check_data(&args.data)?;

    let split = &manifest.trajectories;
    let (trajs, stats) = prepare(&records, &split.train)?;
    let model = Model::new(config.model.clone(), stats, config.train.seed)?;
    let mut log = LossLog::create(&dir.loss_log())?;
    let mut log_err = None;
    let outcome = train(
        model,
        &trajs,
        &split.train,
        &split.val,
        &manifest.config,
        &config.train,
        &mut |e| {
            log::info!("epoch {} total {:.6} val {:?}", e.epoch, e.total, e.val_elbo);
            if let Err(err) = log.append(e) {
                log_err.get_or_insert(err);
            }
        },
    )?;
    if let Some(err) = log_err {
        return Err(err);
    }
    save_checkpoint(&dir.checkpoint(), &outcome.model)?;
    let last = outcome.history.last().map_or(f64::NAN, |e| e.total);
    say(
        out,
        format!(
            "trained {} epochs, final total loss {last:.6}, best epoch {}; run in {}",
            outcome.history.len(),
            outcome.best_epoch,
            dir.0.display()
        ),
    )
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Everything a finished run needs to make predictions.
struct LoadedRun {
    dir: RunDir,
    manifest: SplitManifest,
    records: Vec<TrajectoryRecord>,
}

fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let dir = RunDir::open(run_dir)?;
    let config = dir.read_config()?;
    let manifest = SplitManifest::read(&config.splits)?;
    manifest.check_data(&config.data)?;
    let (records, _) = read_dataset(&config.data)?;
    Ok(LoadedRun { dir, manifest, records })
}

fn load_model(dir: &RunDir) -> Result<Model> {
    let path = dir.checkpoint();
    if !path.is_file() {
        return Err(Error::data(format!("checkpoint {} is missing", path.display())));
    }
    load_checkpoint(&path)
}

fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let run = load_run(&args.run_dir)?;
    let obs_len = args.obs_len.unwrap_or(run.manifest.config.obs_len);
    let model = match args.predictor {
        PredictorChoice::Model => Some(load_model(&run.dir)?),
        _ => None,
    };
    // Normalization: the checkpoint's when there is one, else refit on train.
    let trajs = match &model {
        Some(m) => run
            .records
            .iter()
            .map(|r| PreparedTrajectory::new(r, &m.stats))
            .collect::<ggode_core::Result<Vec<_>>>()?,
        None => prepare(&run.records, &run.manifest.trajectories.train)?.0,
    };
    let mut predictor: Box<dyn Predictor + '_> = match (&model, args.predictor) {
        (Some(m), _) => Box::new(ModelPredictor(m)),
        (None, PredictorChoice::Oracle) => Box::new(OraclePredictor),
        _ => Box::new(LastObservedPredictor),
    };
    let mut measure = |idx: &[usize]| -> Result<_> {
        let refs: Vec<&PreparedTrajectory> = idx.iter().map(|&k| &trajs[k]).collect();
        Ok(percent_map(&evaluate_rollout_mse(predictor.as_mut(), &refs, obs_len, &PERCENTAGES)?))
    };
    let split = &run.manifest.trajectories;
    let transductive = match args.split {
        SplitChoice::Trans | SplitChoice::Both => Some(measure(&split.test_trans)?),
        SplitChoice::Induct => None,
    };
    let inductive = match args.split {
        SplitChoice::Induct | SplitChoice::Both => Some(measure(&split.test_induct)?),
        SplitChoice::Trans => None,
    };
    let report = MetricsReport {
        predictor: args.predictor.name().to_string(),
        obs_len,
        transductive,
        inductive,
    };
    write_json(&run.dir.metrics(), &report)?;
    let fmt = |m: &Option<std::collections::BTreeMap<String, f64>>| {
        m.as_ref().map_or("-".to_string(), |m| {
            PERCENTAGES
                .iter()
                .map(|p| format!("{p}%={:.6}", m[&p.to_string()]))
                .collect::<Vec<_>>()
                .join(" ")
        })
    };
    say(
        out,
        format!(
            "transductive {} | inductive {}",
            fmt(&report.transductive),
            fmt(&report.inductive)
        ),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutHeader {
    pub traj_id: usize,
    pub env_id: u32,
    pub obs_len: usize,
    /// Predicted steps, `T - obs_len`.
    pub steps: usize,
    pub n_agents: usize,
    pub dim: usize,
    pub times: Span,
    /// Predicted positions, `steps x n_agents x dim`, raw units.
    pub predicted: Span,
    /// Recorded positions over the same steps.
    pub target: Span,
}

pub const ROLLOUT_KIND: &str = "rollout";

fn rollout(args: &RolloutArgs, out: &mut dyn Write) -> Result<()> {
    let run = load_run(&args.run_dir)?;
    let model = load_model(&run.dir)?;
    let record = run.records.get(args.traj_id).ok_or_else(|| {
        Error::Usage(format!(
            "--traj-id {} out of range for {} trajectories",
            args.traj_id,
            run.records.len()
        ))
    })?;
    let obs_len = args.obs_len.unwrap_or(run.manifest.config.obs_len);
    let traj = PreparedTrajectory::new(record, &model.stats)?;
    let preds = predict_trajectory(&model, &traj, obs_len)?;
    let w = record.frame_width();
    let predicted: Vec<f64> = preds
        .iter()
        .flat_map(|y| model.stats.denormalize_positions(y.data()))
        .collect();
    let mut payload = PayloadBuilder::default();
    let header = RolloutHeader {
        traj_id: args.traj_id,
        env_id: record.env_id,
        obs_len,
        steps: preds.len(),
        n_agents: record.n_agents,
        dim: record.dim,
        times: payload.push(&record.times[obs_len..]),
        predicted: payload.push(&predicted),
        target: payload.push(&record.positions[obs_len * w..]),
    };
    let steps = header.steps;
    container::write_file(&args.out, ROLLOUT_KIND, header, &payload.finish())?;
    say(out, format!("wrote {steps} predicted steps to {}", args.out.display()))
}

fn export_embeddings(args: &ExportArgs, out: &mut dyn Write) -> Result<()> {
    let dir = RunDir::open(&args.run_dir)?;
    let config = dir.read_config()?;
    let manifest = SplitManifest::read(&config.splits)?;
    let model = load_model(&dir)?;
    let (records, _) = read_dataset(&args.data)?;
    let file = File::create(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut csv = csv::Writer::from_writer(file);
    let d = model.config.d;
    let mut header = vec!["env_id".to_string(), "sample_id".to_string()];
    header.extend((1..=d).map(|k| format!("u_{k}")));
    let csv_err = |e: csv::Error| Error::format(format!("{}: {e}", args.out.display()));
    csv.write_record(&header).map_err(csv_err)?;
    let mut rows = 0usize;
    for (k, record) in records.iter().enumerate() {
        let traj = PreparedTrajectory::new(record, &model.stats)?;
        for s in chunk_split(traj.steps, k, traj.env_id, &manifest.config) {
            let u = embedding_of(&model, &traj, s.offset, s.obs_len)?;
            let mut row = vec![record.env_id.to_string(), rows.to_string()];
            row.extend(u.data().iter().map(|v| format!("{v:.16e}")));
            csv.write_record(&row).map_err(csv_err)?;
            rows += 1;
        }
    }
    csv.flush().map_err(|e| Error::io(&args.out, e))?;
    say(out, format!("wrote {rows} embeddings of width {d} to {}", args.out.display()))
}
