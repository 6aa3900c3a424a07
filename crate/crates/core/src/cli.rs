//! The `egomem` command line: one subcommand per pipeline stage, each writing
//! a run manifest beside its outputs and one JSON metrics line to stdout.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::agent::{walkthrough_seed, Navigator, Walkthrough};
use crate::config::{Config, ConfigBuilder, ConfigError, Preset};
use crate::dataset::{annotate, with_workers, Dataset, DatasetError};
use crate::envmemory::{EnvMemoryModel, ModelConfig, ModelError, PoseMode};
use crate::epm::{dataset_queries, eval_epm, localizable_queries, train_localizer, EpmError, Localizer, LocalizerConfig, IOU_THRESHOLDS};
use crate::io::{self, IoError, RunManifest};
use crate::numgrad::checkpoint::CheckpointError;
use crate::pretrain::{eval_ap, pretrain, EvalOptions, Objective, PretrainError};
use crate::room::{entropy_split, eval_room, room_instances, train_room, FusionOrder, RoomClassifier, RoomConfig, RoomError, RoomMode};
use crate::viz::{render_attention, render_topdown, RenderOptions, VizError};
use crate::worldgen::{generate_environment, EnvironmentSpec, WorldError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Root for relative artifact paths.
pub const DATA_DIR_ENV: &str = "EGOMEM_DATA_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Validation(_) => EXIT_VALIDATION,
            Self::Io(_) => EXIT_IO,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        if e.is_validation() {
            Self::Validation(e.to_string())
        } else {
            Self::Io(e.to_string())
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint(CheckpointError::Io(_)) => Self::Io(e.to_string()),
            e => Self::Validation(e.to_string()),
        }
    }
}

macro_rules! validation_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Validation(e.to_string())
            }
        }
    )*};
}

validation_errors!(ConfigError, DatasetError, PretrainError, RoomError, EpmError, VizError, WorldError);

#[derive(Debug, Parser)]
#[command(name = "egomem", version, about = "Environment memory for egocentric walkthroughs")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Base hyperparameter preset.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    /// TOML file layered over the preset.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set pretrain.epochs=5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads (0 = all cores). Never changes outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Self::On
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    EnvState,
    Ssl,
    Pano,
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoseArg {
    Relative,
    Global,
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoomModeArg {
    Fused,
    Baseline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderArg {
    FuseThenPool,
    PoolThenFuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VizMode {
    Trajectory,
    Attention,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate environments with seeds `seed..seed+count`, one per line.
    GenEnv {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample walkthroughs in every environment of a file.
    GenWalkthroughs {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Walkthroughs per environment (default `data.walks_per_env`).
        #[arg(long)]
        walks: Option<usize>,
        /// Poses per walkthrough (default `data.steps`).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute features, local-state labels and rooms into a dataset directory.
    Label {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        walkthroughs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an environment memory model.
    Pretrain {
        #[arg(long)]
        train: PathBuf,
        /// Held-out dataset for checkpoint selection and the AP report.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        #[arg(long, value_enum)]
        pose: Option<PoseArg>,
        #[arg(long, value_enum)]
        noise: Option<Switch>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-direction AP of a pretrained model.
    EvalPretrain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a room classifier (scratch memory model without `--model`).
    TrainRoom {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<RoomModeArg>,
        #[arg(long, value_enum)]
        freeze: Option<Switch>,
        #[arg(long, value_enum)]
        order: Option<OrderArg>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Room accuracy on all, easy and hard instances.
    EvalRoom {
        #[arg(long)]
        model: PathBuf,
        /// Frame-only classifier defining the entropy split; defaults to the
        /// evaluated model when that is itself a baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Seed for the evaluation instance sample.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate templated moment queries for a dataset.
    GenQueries {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a moment localizer.
    TrainEpm {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        env_feat: Option<Switch>,
        #[arg(long, value_enum)]
        freeze: Option<Switch>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank-1 recall of a localizer.
    EvalEpm {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a top-down SVG of a walkthrough, optionally with attention.
    Viz {
        #[arg(long, value_enum, default_value = "trajectory")]
        mode: VizMode,
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        walkthrough: PathBuf,
        /// Which walkthrough of the file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Memory views to highlight.
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a dataset directory and/or run manifests.
    Validate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenEnv { .. } => "gen-env",
            Self::GenWalkthroughs { .. } => "gen-walkthroughs",
            Self::Label { .. } => "label",
            Self::Pretrain { .. } => "pretrain",
            Self::EvalPretrain { .. } => "eval-pretrain",
            Self::TrainRoom { .. } => "train-room",
            Self::EvalRoom { .. } => "eval-room",
            Self::GenQueries { .. } => "gen-queries",
            Self::TrainEpm { .. } => "train-epm",
            Self::EvalEpm { .. } => "eval-epm",
            Self::Viz { .. } => "viz",
            Self::Validate { .. } => "validate",
        }
    }
}

/// Relative paths resolve under `$EGOMEM_DATA_DIR` when it is set.
pub fn resolve_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

struct Run {
    command: &'static str,
    args: Vec<String>,
    config: Config,
    workers: usize,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    start: Instant,
}

impl Run {
    fn input(&mut self, p: &Path) -> PathBuf {
        let p = resolve_path(p);
        self.inputs.push(p.clone());
        p
    }

    fn seed(&mut self, name: &str, v: u64) {
        self.seeds.insert(name.to_string(), v);
    }

    /// Hashes inputs and outputs into a manifest beside `outputs[0]` and
    /// prints the metrics line.
    fn finish(self, outputs: &[PathBuf], metrics: Value) -> Result<Value, CliError> {
        let path = outputs.first().map(|o| io::manifest_path(o));
        let base = path.as_deref().and_then(Path::parent).filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        let manifest = RunManifest {
            schema: io::MANIFEST_SCHEMA.to_string(),
            version: io::FORMAT_VERSION,
            command: self.command.to_string(),
            args: self.args,
            config: self.config.to_json(),
            seeds: self.seeds,
            inputs: io::hash_paths(&self.inputs, &base)?,
            outputs: io::hash_paths(outputs, &base)?,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let mut line = json!({ "command": self.command, "metrics": metrics });
        if let Some(path) = path {
            io::write_manifest(&path, &manifest)?;
            line["manifest"] = json!(path.to_string_lossy());
        }
        println!("{}", serde_json::to_string(&line).expect("metrics serialize"));
        Ok(line)
    }
}

fn build_config(common: &Common) -> Result<Config, CliError> {
    let mut b = ConfigBuilder::default();
    if let Some(p) = common.preset {
        b = b.preset(match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        })?;
    }
    if let Some(path) = &common.config {
        let path = resolve_path(path);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        b = b.toml_str(&text, &path.display().to_string())?;
    }
    for kv in &common.set {
        b = b.set(kv)?;
    }
    Ok(b.resolve()?)
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, recorded) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command; `args` are recorded in the manifest. Returns the
/// metrics line it printed.
pub fn execute(cli: Cli, args: Vec<String>) -> Result<Value, CliError> {
    let config = build_config(&cli.common)?;
    let mut run = Run {
        command: cli.command.name(),
        args,
        config,
        workers: cli.common.workers,
        seeds: BTreeMap::new(),
        inputs: Vec::new(),
        start: Instant::now(),
    };
    match cli.command {
        Command::GenEnv { seed, count, out } => gen_env(run, seed, count, &out),
        Command::GenWalkthroughs { env, seed, walks, steps, out } => {
            let env = run.input(&env);
            gen_walkthroughs(run, &env, seed, walks, steps, &out)
        }
        Command::Label { env, walkthroughs, out } => {
            let (env, walks) = (run.input(&env), run.input(&walkthroughs));
            label(run, &env, &walks, &out)
        }
        Command::Pretrain { train, val, objective, pose, noise, seed, out } => {
            let c = &mut run.config.pretrain;
            if let Some(o) = objective {
                c.objective = match o {
                    ObjectiveArg::EnvState => Objective::EnvState,
                    ObjectiveArg::Ssl => Objective::SslMasked,
                    ObjectiveArg::Pano => Objective::PanoFeat,
                    ObjectiveArg::None => Objective::None,
                };
            }
            if let Some(p) = pose {
                c.pose_mode = pose_mode(p);
            }
            if let Some(n) = noise {
                c.noise.enabled = n.on();
            }
            c.seed = seed;
            let train = run.input(&train);
            let val = val.map(|v| run.input(&v));
            pretrain_cmd(run, &train, val.as_deref(), &out)
        }
        Command::EvalPretrain { model, data, out } => {
            let (model, data) = (run.input(&model), run.input(&data));
            eval_pretrain_cmd(run, &model, &data, out.as_deref())
        }
        Command::TrainRoom { train, model, mode, freeze, order, seed, out } => {
            let c = &mut run.config.room.classifier;
            if let Some(m) = mode {
                c.mode = match m {
                    RoomModeArg::Fused => RoomMode::Fused,
                    RoomModeArg::Baseline => RoomMode::Baseline,
                };
            }
            if let Some(f) = freeze {
                c.freeze = f.on();
            }
            if let Some(o) = order {
                c.order = match o {
                    OrderArg::FuseThenPool => FusionOrder::FuseThenPool,
                    OrderArg::PoolThenFuse => FusionOrder::PoolThenFuse,
                };
            }
            c.seed = seed;
            let train = run.input(&train);
            let model = model.map(|m| run.input(&m));
            train_room_cmd(run, &train, model.as_deref(), &out)
        }
        Command::EvalRoom { model, baseline, data, seed, out } => {
            let (model, data) = (run.input(&model), run.input(&data));
            let baseline = baseline.map(|b| run.input(&b));
            run.seed("seed", seed);
            eval_room_cmd(run, &model, baseline.as_deref(), &data, seed, out.as_deref())
        }
        Command::GenQueries { data, out } => {
            let data = run.input(&data);
            gen_queries_cmd(run, &data, &out)
        }
        Command::TrainEpm { train, queries, model, env_feat, freeze, seed, out } => {
            let c = &mut run.config.epm;
            if let Some(e) = env_feat {
                c.env_feat = e.on();
            }
            if let Some(f) = freeze {
                c.freeze = f.on();
            }
            c.seed = seed;
            let (train, queries) = (run.input(&train), run.input(&queries));
            let model = model.map(|m| run.input(&m));
            train_epm_cmd(run, &train, &queries, model.as_deref(), &out)
        }
        Command::EvalEpm { model, data, queries, out } => {
            let (model, data, queries) = (run.input(&model), run.input(&data), run.input(&queries));
            eval_epm_cmd(run, &model, &data, &queries, out.as_deref())
        }
        Command::Viz { mode, env, walkthrough, index, step, model, k, out } => {
            let (env, walk) = (run.input(&env), run.input(&walkthrough));
            let model = model.map(|m| run.input(&m));
            viz_cmd(run, mode, &env, &walk, index, step, model.as_deref(), k, &out)
        }
        Command::Validate { data, manifest } => validate_cmd(run, data.as_deref(), &manifest),
    }
}

fn pose_mode(p: PoseArg) -> PoseMode {
    match p {
        PoseArg::Relative => PoseMode::Relative,
        PoseArg::Global => PoseMode::Global,
        PoseArg::None => PoseMode::None,
    }
}

fn gen_env(mut run: Run, seed: u64, count: usize, out: &Path) -> Result<Value, CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    run.seed("seed", seed);
    let gen = run.config.data.gen;
    let envs = with_workers(run.workers, || {
        (0..count as u64).into_par_iter().map(|i| generate_environment(seed + i, &gen)).collect::<Result<Vec<_>, _>>()
    })??;
    let out = resolve_path(out);
    io::write_envs(&out, &envs)?;
    let ids: Vec<&str> = envs.iter().map(|e| e.id.as_str()).collect();
    let metrics = json!({ "envs": envs.len(), "ids": ids });
    run.finish(&[out], metrics)
}

fn gen_walkthroughs(mut run: Run, env: &Path, seed: u64, walks: Option<usize>, steps: Option<usize>, out: &Path) -> Result<Value, CliError> {
    run.seed("seed", seed);
    let walks = walks.unwrap_or(run.config.data.walks_per_env);
    let steps = steps.unwrap_or(run.config.data.steps);
    if walks == 0 || steps == 0 {
        return Err(CliError::Usage("--walks and --steps must be positive".into()));
    }
    let envs = io::read_envs(env)?;
    let all = with_workers(run.workers, || {
        envs.par_iter()
            .map(|e| {
                let nav = Navigator::new(e).map_err(|err| CliError::Validation(format!("{}: {err}", e.id)))?;
                (0..walks)
                    .into_par_iter()
                    .map(|w| nav.walkthrough(walkthrough_seed(seed, e.seed, w as u64), steps).map_err(|err| CliError::Validation(format!("{}: {err}", e.id))))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()
    })??;
    let all: Vec<Walkthrough> = all.into_iter().flatten().collect();
    let out = resolve_path(out);
    io::write_walkthroughs(&out, &all)?;
    let metrics = json!({ "walkthroughs": all.len(), "steps": steps });
    run.finish(&[out], metrics)
}

fn label(run: Run, env: &Path, walks: &Path, out: &Path) -> Result<Value, CliError> {
    let envs = io::read_envs(env)?;
    let walks = io::read_walkthroughs(walks)?;
    let index: BTreeMap<&str, usize> = envs.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let jobs = walks
        .into_iter()
        .map(|w| index.get(w.env_id.as_str()).map(|&i| (i, w.clone())).ok_or_else(|| CliError::Validation(format!("walkthrough references unknown environment {:?}", w.env_id))))
        .collect::<Result<Vec<_>, _>>()?;
    let (obs, direction) = (run.config.data.obs, run.config.data.direction);
    let episodes = with_workers(run.workers, || jobs.into_par_iter().map(|(i, w)| annotate(&envs[i], i, w, &obs, &direction)).collect::<Vec<_>>())?;
    let ds = Dataset { envs, episodes, obs, direction };
    let out = resolve_path(out);
    io::write_dataset(&out, &ds)?;
    let steps: usize = ds.episodes.iter().map(|e| e.len()).sum();
    let metrics = json!({ "envs": ds.envs.len(), "episodes": ds.episodes.len(), "steps": steps, "feature_dim": ds.feature_dim() });
    run.finish(&[out], metrics)
}

fn model_config(cfg: &Config, ds: &Dataset) -> ModelConfig {
    ModelConfig { feature_dim: ds.feature_dim(), n_classes: ds.n_classes(), ..cfg.model }
}

/// A checkpoint with the `extra` metadata it was saved with.
fn load_model(path: &Path) -> Result<(EnvMemoryModel, Value), CliError> {
    Ok(EnvMemoryModel::load(path)?)
}

fn check_dims(model: &EnvMemoryModel, ds: &Dataset) -> Result<(), CliError> {
    let m = &model.config;
    if m.feature_dim != ds.feature_dim() || m.n_classes != ds.n_classes() {
        return Err(CliError::Validation(format!(
            "model expects {} features and {} classes, dataset has {} and {}",
            m.feature_dim,
            m.n_classes,
            ds.feature_dim(),
            ds.n_classes()
        )));
    }
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    io::write_text(path, &(serde_json::to_string_pretty(v).expect("report serializes") + "\n"))?;
    Ok(())
}

fn pretrain_cmd(mut run: Run, train: &Path, val: Option<&Path>, out: &Path) -> Result<Value, CliError> {
    let cfg = run.config.pretrain;
    run.seed("seed", cfg.seed);
    let train = io::read_dataset(train)?;
    let val = val.map(io::read_dataset).transpose()?;
    let model = EnvMemoryModel::new(model_config(&run.config, &train), cfg.seed)?;
    let outcome = pretrain(&train, val.as_ref(), &cfg, model, run.workers)?;
    let out = resolve_path(out);
    let extra = json!({ "kind": "pretrain", "pretrain": cfg });
    outcome.model.save(&out, extra)?;
    let csv = sibling(&out, ".loss.csv");
    let rows: Vec<Vec<Option<f64>>> = outcome.curve.iter().map(|e| vec![Some(e.epoch as f64), Some(e.train), e.val]).collect();
    io::write_csv(&csv, &["epoch", "train", "val"], &rows)?;
    let mut outputs = vec![out.clone(), crate::numgrad::checkpoint::sidecar_path(&out), csv];
    let mut metrics = json!({
        "objective": cfg.objective.name(),
        "epochs": outcome.curve.len(),
        "best_epoch": outcome.best_epoch,
        "final_train_loss": outcome.curve.last().map(|e| e.train),
    });
    if let Some(v) = &val {
        let opts = EvalOptions { pose_mode: cfg.pose_mode, memory_k: cfg.memory_k, ..run.config.eval };
        let report = with_workers(run.workers, || eval_ap(&outcome.model, v, &opts))??;
        let path = sibling(&out, ".eval.json");
        write_json(&path, &report)?;
        outputs.push(path);
        metrics["map"] = json!(report.map);
        metrics["ap"] = json!(report.ap);
    }
    run.finish(&outputs, metrics)
}

fn eval_pretrain_cmd(run: Run, model: &Path, data: &Path, out: Option<&Path>) -> Result<Value, CliError> {
    let (model, extra) = load_model(model)?;
    let ds = io::read_dataset(data)?;
    check_dims(&model, &ds)?;
    let mut opts = run.config.eval;
    if let Ok(p) = serde_json::from_value::<crate::pretrain::PretrainConfig>(extra["pretrain"].clone()) {
        opts.pose_mode = p.pose_mode;
        opts.memory_k = p.memory_k;
    }
    let report = with_workers(run.workers, || eval_ap(&model, &ds, &opts))??;
    let metrics = serde_json::to_value(&report).expect("report serializes");
    let outputs = match out {
        Some(p) => {
            let p = resolve_path(p);
            write_json(&p, &report)?;
            vec![p]
        }
        None => Vec::new(),
    };
    run.finish(&outputs, metrics)
}

fn train_room_cmd(mut run: Run, train: &Path, model: Option<&Path>, out: &Path) -> Result<Value, CliError> {
    let cfg = run.config.room.classifier;
    run.seed("seed", cfg.seed);
    let ds = io::read_dataset(train)?;
    let model = match model {
        Some(p) => {
            let (m, _) = load_model(p)?;
            check_dims(&m, &ds)?;
            m
        }
        None => EnvMemoryModel::new(model_config(&run.config, &ds), cfg.seed)?,
    };
    let instances = room_instances(&ds, run.config.room.train_per_episode, cfg.window, cfg.seed);
    let outcome = train_room(&ds, &instances, &cfg, model, run.workers)?;
    let out = resolve_path(out);
    outcome.classifier.model.save(&out, json!({ "kind": "room", "room": cfg }))?;
    let csv = sibling(&out, ".loss.csv");
    let rows: Vec<Vec<Option<f64>>> = outcome.curve.iter().enumerate().map(|(i, &l)| vec![Some(i as f64), Some(l)]).collect();
    io::write_csv(&csv, &["epoch", "train"], &rows)?;
    let metrics = json!({ "instances": instances.len(), "epochs": outcome.curve.len(), "final_train_loss": outcome.curve.last() });
    run.finish(&[out.clone(), crate::numgrad::checkpoint::sidecar_path(&out), csv], metrics)
}

fn load_room(path: &Path) -> Result<RoomClassifier, CliError> {
    let (model, extra) = load_model(path)?;
    if extra["kind"] != "room" {
        return Err(CliError::Validation(format!("{} is not a room classifier checkpoint", path.display())));
    }
    let config: RoomConfig = serde_json::from_value(extra["room"].clone()).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(RoomClassifier { model, config })
}

fn eval_room_cmd(run: Run, model: &Path, baseline: Option<&Path>, data: &Path, seed: u64, out: Option<&Path>) -> Result<Value, CliError> {
    let clf = load_room(model)?;
    let ds = io::read_dataset(data)?;
    check_dims(&clf.model, &ds)?;
    let base = match baseline {
        Some(p) => load_room(p)?,
        None if clf.config.mode == RoomMode::Baseline => clf.clone(),
        None => return Err(CliError::Usage("a fused classifier needs --baseline to define the hard split".into())),
    };
    if base.config.mode != RoomMode::Baseline {
        return Err(CliError::Validation("--baseline must be a frame-only classifier".into()));
    }
    let instances = room_instances(&ds, run.config.room.eval_per_episode, clf.config.window, seed);
    let hard_fraction = run.config.room.hard_fraction;
    let acc = with_workers(run.workers, || -> Result<_, RoomError> {
        let split = entropy_split(&base, &ds, &instances, hard_fraction)?;
        eval_room(&clf, &ds, &instances, &split)
    })??;
    let metrics = serde_json::to_value(acc).expect("accuracy serializes");
    let outputs = match out {
        Some(p) => {
            let p = resolve_path(p);
            write_json(&p, &acc)?;
            vec![p]
        }
        None => Vec::new(),
    };
    run.finish(&outputs, metrics)
}

fn gen_queries_cmd(run: Run, data: &Path, out: &Path) -> Result<Value, CliError> {
    let ds = io::read_dataset(data)?;
    let queries = with_workers(run.workers, || dataset_queries(&ds))?;
    let out = resolve_path(out);
    io::write_queries(&out, &queries)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for q in &queries {
        *counts.entry(q.template.name()).or_default() += 1;
    }
    run.finish(&[out], json!({ "queries": queries.len(), "per_template": counts }))
}

fn check_queries(queries: &[crate::epm::MomentQuery], ds: &Dataset) -> Result<(), CliError> {
    for q in queries {
        let ep = ds.episodes.get(q.walkthrough_id).ok_or_else(|| CliError::Validation(format!("query references walkthrough {} outside the dataset", q.walkthrough_id)))?;
        if !(q.t_s <= q.t_e && q.t_e < ep.len()) {
            return Err(CliError::Validation(format!("query interval ({}, {}) outside walkthrough {}", q.t_s, q.t_e, q.walkthrough_id)));
        }
    }
    Ok(())
}

fn train_epm_cmd(mut run: Run, train: &Path, queries: &Path, model: Option<&Path>, out: &Path) -> Result<Value, CliError> {
    let cfg = run.config.epm;
    run.seed("seed", cfg.seed);
    let ds = io::read_dataset(train)?;
    let queries = io::read_queries(queries)?;
    check_queries(&queries, &ds)?;
    let model = match model {
        Some(p) => {
            let (m, _) = load_model(p)?;
            check_dims(&m, &ds)?;
            m
        }
        None => EnvMemoryModel::new(model_config(&run.config, &ds), cfg.seed)?,
    };
    let (kept, drops) = localizable_queries(&ds, &queries, &cfg)?;
    let outcome = train_localizer(&ds, &kept, &cfg, model, run.workers)?;
    let loc = &outcome.localizer;
    let out = resolve_path(out);
    loc.model.save(&out, json!({ "kind": "epm", "epm": cfg, "n_objects": loc.n_objects, "n_rooms": loc.n_rooms }))?;
    let csv = sibling(&out, ".loss.csv");
    let rows: Vec<Vec<Option<f64>>> = outcome.curve.iter().enumerate().map(|(i, &l)| vec![Some(i as f64), Some(l)]).collect();
    io::write_csv(&csv, &["epoch", "train"], &rows)?;
    let metrics = json!({ "queries": kept.len(), "dropped": drops, "epochs": outcome.curve.len(), "final_train_loss": outcome.curve.last() });
    run.finish(&[out.clone(), crate::numgrad::checkpoint::sidecar_path(&out), csv], metrics)
}

fn load_localizer(path: &Path) -> Result<Localizer, CliError> {
    let (model, extra) = load_model(path)?;
    let bad = |m: String| CliError::Validation(format!("{}: {m}", path.display()));
    if extra["kind"] != "epm" {
        return Err(bad("not a localizer checkpoint".into()));
    }
    let config: LocalizerConfig = serde_json::from_value(extra["epm"].clone()).map_err(|e| bad(e.to_string()))?;
    let dim = |k: &str| extra[k].as_u64().map(|v| v as usize).ok_or_else(|| bad(format!("missing {k}")));
    let (n_objects, n_rooms) = (dim("n_objects")?, dim("n_rooms")?);
    // re-running the constructor checks the stored head shapes
    Ok(Localizer::new(model, config, n_objects, n_rooms)?)
}

fn eval_epm_cmd(run: Run, model: &Path, data: &Path, queries: &Path, out: Option<&Path>) -> Result<Value, CliError> {
    let loc = load_localizer(model)?;
    let ds = io::read_dataset(data)?;
    check_dims(&loc.model, &ds)?;
    let queries = io::read_queries(queries)?;
    check_queries(&queries, &ds)?;
    let (kept, drops) = localizable_queries(&ds, &queries, &loc.config)?;
    let report = with_workers(run.workers, || eval_epm(&loc, &ds, &kept, &IOU_THRESHOLDS))??;
    let mut metrics = serde_json::to_value(&report).expect("report serializes");
    metrics["dropped"] = json!(drops);
    let outputs = match out {
        Some(p) => {
            let p = resolve_path(p);
            write_json(&p, &metrics)?;
            vec![p]
        }
        None => Vec::new(),
    };
    run.finish(&outputs, metrics)
}

#[allow(clippy::too_many_arguments)]
fn viz_cmd(run: Run, mode: VizMode, env: &Path, walks: &Path, index: usize, step: Option<usize>, model: Option<&Path>, k: usize, out: &Path) -> Result<Value, CliError> {
    let envs = io::read_envs(env)?;
    let walks = io::read_walkthroughs(walks)?;
    let walk = walks.get(index).ok_or_else(|| CliError::Usage(format!("--index {index} but the file holds {} walkthroughs", walks.len())))?;
    let env: &EnvironmentSpec = envs
        .iter()
        .find(|e| e.id == walk.env_id)
        .ok_or_else(|| CliError::Validation(format!("environment {:?} not in the environment file", walk.env_id)))?;
    let opts = RenderOptions { obs: run.config.data.obs, memory_k: run.config.eval.memory_k, ..RenderOptions::default() };
    let render = match mode {
        VizMode::Trajectory => render_topdown(env, walk, &opts)?,
        VizMode::Attention => {
            let step = step.ok_or_else(|| CliError::Usage("--mode attention needs --step".into()))?;
            let model = model.ok_or_else(|| CliError::Usage("--mode attention needs --model".into()))?;
            let (model, _) = load_model(model)?;
            render_attention(env, walk, &model, step, k, &opts)?
        }
    };
    let out = resolve_path(out);
    io::write_text(&out, &render.svg)?;
    let attention: Vec<Value> = render.attention.iter().map(|a| json!({ "step": a.step, "weight": a.weight })).collect();
    let metrics = json!({ "width": render.width, "height": render.height, "query_step": render.query_step, "attention": attention });
    run.finish(&[out], metrics)
}

fn validate_cmd(run: Run, data: Option<&Path>, manifests: &[PathBuf]) -> Result<Value, CliError> {
    if data.is_none() && manifests.is_empty() {
        return Err(CliError::Usage("validate needs --data and/or --manifest".into()));
    }
    let mut metrics = json!({});
    if let Some(d) = data {
        let report = io::validate_dataset(&resolve_path(d))?;
        metrics["dataset"] = serde_json::to_value(report).expect("report serializes");
    }
    let mut checked = Vec::new();
    for m in manifests {
        let p = resolve_path(m);
        let man = io::validate_manifest(&p)?;
        checked.push(json!({ "manifest": p.to_string_lossy(), "command": man.command, "files": man.inputs.len() + man.outputs.len() }));
    }
    metrics["manifests"] = json!(checked);
    run.finish(&[], metrics)
}
