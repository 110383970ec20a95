//! Command-line surface. `main.rs` only parses arguments and calls [`run`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dgp::{generate, make_setting, DgpConfig, Setting, SettingOverrides, Split, TaskDataset, TaskSplits};
use crate::error::Error;
use crate::harness::{
    export_latents, fit, rmse, run_hpsearch, run_replications, trials_csv, FitOptions, HyperParams, Method,
    ReplicationPlan, SearchMode, SearchSpace, SweepResult, Tuning, FULL_EPOCHS,
};
use crate::io::{csv_bytes, fmt_f64, load_model, read_dataset_csv, save_model, write_atomic, write_dataset_csv};
use crate::model::MtlModel;
use crate::trainer::TrainReport;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DESK_TRIALS: usize = 8;
pub const FULL_TRIALS: usize = 50;
pub const DESK_SEEDS: usize = 10;
pub const FULL_SEEDS: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "dualmtl", version, about = "Multi-task regression with shared and task-specific encoders")]
pub struct Cli {
    /// Base random seed.
    #[arg(long, global = true, env = "DUALMTL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// TOML run configuration.
    #[arg(long, global = true, env = "DUALMTL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "DUALMTL_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "DUALMTL_JOBS", default_value_t = 0)]
    pub jobs: usize,
    /// Use the full budget: 25000 epochs, 50 search trials, 100 replications.
    #[arg(long, global = true, env = "DUALMTL_FULL_SCALE")]
    pub full_scale: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated study as CSV files plus a manifest.
    Simulate(SimulateArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a saved model.
    Eval(EvalArgs),
    /// Random (or grid) hyperparameter search.
    Hpsearch(HpsearchArgs),
    /// Replicate a setting over many seeds and compare MTL with STL.
    Sweep(SweepArgs),
    /// Write encoder outputs of a saved model.
    ExportLatents(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SettingArgs {
    /// Setting id: 1-6, 4tasks, 5tasks or linear.
    #[arg(long, env = "DUALMTL_SETTING")]
    pub setting: Setting,
    /// Number of shared latent factors.
    #[arg(long)]
    pub dc: Option<usize>,
    /// Task-specific coefficient scale.
    #[arg(long)]
    pub sigma_bar: Option<f64>,
    /// Per-task sample size of each split.
    #[arg(long)]
    pub n: Option<usize>,
}

impl SettingArgs {
    fn overrides(&self, seed: Option<u64>) -> SettingOverrides {
        SettingOverrides {
            d_c: self.dc,
            sigma_bar: self.sigma_bar,
            n: self.n,
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub setting: SettingArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (written by `simulate` or laid out the same way).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "mtl")]
    pub method: Method,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Task a single-task model was trained on.
    #[arg(long)]
    pub task: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "train,val,test")]
    pub splits: Vec<Split>,
}

#[derive(Debug, Args)]
pub struct HpsearchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "mtl")]
    pub method: Method,
    /// Number of trials (default 8, or 50 with --full-scale).
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, default_value = "random")]
    pub mode: SearchMode,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub setting: SettingArgs,
    /// Number of replications; seeds are `seed, seed+1, ...`.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Exit successfully even if some seeds failed.
    #[arg(long, env = "DUALMTL_ALLOW_PARTIAL")]
    pub allow_partial: bool,
    /// Tune each replication by search instead of the fixed configuration.
    #[arg(long)]
    pub search: bool,
    /// Also record train and validation RMSE.
    #[arg(long)]
    pub all_splits: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub task: Option<usize>,
}

/// Contents of `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Model configuration (also used for STL unless `stl_hyperparams` is set).
    #[serde(default)]
    pub hyperparams: Option<HyperParams>,
    #[serde(default)]
    pub stl_hyperparams: Option<HyperParams>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub search: SearchConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub trials: Option<usize>,
    pub mode: SearchMode,
    pub space: Option<SearchSpace>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            hyperparams: None,
            stl_hyperparams: None,
            fit: FitOptions::default(),
            search: SearchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| Error::Schema {
            file: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        config.validate().map_err(|e| Error::Schema {
            file: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(config)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for hp in self.hyperparams.iter().chain(&self.stl_hyperparams) {
            hp.validate()?;
        }
        if !(self.fit.lr_decay > 0.0 && self.fit.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("fit.lr_decay must be in (0, 1], got {}", self.fit.lr_decay)));
        }
        if self.fit.inner_steps == 0 {
            return Err(Error::InvalidArgument("fit.inner_steps must be positive".into()));
        }
        if self.search.trials == Some(0) {
            return Err(Error::InvalidArgument("search.trials must be positive".into()));
        }
        if let Some(space) = &self.search.space {
            space.validate()?;
        }
        Ok(())
    }

    fn mtl(&self, setting: Option<Setting>, full_scale: bool) -> HyperParams {
        let mut hp = self
            .hyperparams
            .clone()
            .unwrap_or_else(|| setting.map_or_else(HyperParams::desk_default, HyperParams::desk_for));
        if full_scale {
            hp.epochs = FULL_EPOCHS;
        }
        hp
    }

    fn stl(&self, setting: Option<Setting>, full_scale: bool) -> HyperParams {
        let mut hp = self
            .stl_hyperparams
            .clone()
            .unwrap_or_else(|| self.mtl(setting, full_scale));
        if full_scale {
            hp.epochs = FULL_EPOCHS;
        }
        hp
    }

    fn hyperparams_for(&self, method: Method, setting: Option<Setting>, full_scale: bool) -> HyperParams {
        match method {
            Method::Mtl => self.mtl(setting, full_scale),
            Method::Stl => self.stl(setting, full_scale),
        }
    }

    fn trials(&self, flag: Option<usize>, full_scale: bool) -> usize {
        flag.or(self.search.trials)
            .unwrap_or(if full_scale { FULL_TRIALS } else { DESK_TRIALS })
    }

    fn space(&self, full_scale: bool) -> SearchSpace {
        self.search.space.clone().unwrap_or_else(|| {
            let mut space = SearchSpace::default();
            if !full_scale {
                space.epochs = crate::harness::DESK_EPOCHS;
            }
            space
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub task: usize,
    pub split: Split,
    pub file: String,
    pub rows: usize,
}

/// `manifest.json` written next to simulated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub setting: Option<Setting>,
    pub seed: u64,
    pub dgp: Option<DgpConfig>,
    pub files: Vec<ManifestFile>,
}

pub fn dataset_file_name(task: usize, split: Split) -> String {
    format!("task_{task}_{split}.csv")
}

/// A dataset directory loaded into memory.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub manifest: Manifest,
    pub tasks: Vec<TaskSplits>,
}

fn discover_files(dir: &Path) -> crate::Result<Vec<ManifestFile>> {
    let mut files = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_prefix("task_").and_then(|s| s.strip_suffix(".csv")) else {
            continue;
        };
        let Some((task, split)) = stem.split_once('_') else {
            continue;
        };
        if let (Ok(task), Ok(split)) = (task.parse(), split.parse()) {
            files.push(ManifestFile {
                task,
                split,
                file: name,
                rows: 0,
            });
        }
    }
    Ok(files)
}

pub fn load_data_dir(dir: &Path) -> crate::Result<DataDir> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Schema {
            file: manifest_path.clone(),
            detail: e.to_string(),
        })?
    } else {
        Manifest {
            schema_version: CONFIG_SCHEMA_VERSION,
            setting: None,
            seed: 0,
            dgp: None,
            files: discover_files(dir)?,
        }
    };
    let mut by_key: BTreeMap<(usize, usize), &ManifestFile> = BTreeMap::new();
    for f in &manifest.files {
        let rank = Split::ALL.iter().position(|&s| s == f.split).unwrap();
        by_key.insert((f.task, rank), f);
    }
    let tasks = by_key.keys().map(|&(t, _)| t).max().map_or(0, |t| t + 1);
    if tasks == 0 {
        return Err(Error::InvalidArgument(format!("no task_<r>_<split>.csv files in {}", dir.display())));
    }
    let mut d = None;
    let mut out = Vec::with_capacity(tasks);
    for task in 0..tasks {
        let mut load = |split: Split| -> crate::Result<TaskDataset> {
            let rank = Split::ALL.iter().position(|&s| s == split).unwrap();
            let entry = by_key.get(&(task, rank)).ok_or_else(|| Error::Schema {
                file: dir.join(dataset_file_name(task, split)),
                detail: "file is missing".into(),
            })?;
            let path = dir.join(&entry.file);
            let (x, y) = read_dataset_csv(&path, d)?;
            d = Some(x.ncols());
            if entry.rows != 0 && entry.rows != y.len() {
                return Err(Error::Schema {
                    file: path,
                    detail: format!("{} rows, manifest says {}", y.len(), entry.rows),
                });
            }
            if y.is_empty() {
                return Err(Error::Schema {
                    file: path,
                    detail: "no data rows".into(),
                });
            }
            Ok(TaskDataset { task, role: split, x, y })
        };
        out.push(TaskSplits {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
        });
    }
    Ok(DataDir { manifest, tasks: out })
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

pub fn write_study(dir: &Path, setting: Option<Setting>, config: &DgpConfig) -> crate::Result<Manifest> {
    let study = generate(config)?;
    let mut files = Vec::new();
    for t in &study.tasks {
        for split in Split::ALL {
            let data = t.get(split);
            let name = dataset_file_name(data.task, split);
            write_dataset_csv(&dir.join(&name), &data.x, &data.y)?;
            files.push(ManifestFile {
                task: data.task,
                split,
                file: name,
                rows: data.len(),
            });
        }
    }
    let manifest = Manifest {
        schema_version: CONFIG_SCHEMA_VERSION,
        setting,
        seed: config.seed,
        dgp: Some(config.clone()),
        files,
    };
    write_atomic(&dir.join(MANIFEST_FILE), &json_bytes(&manifest))?;
    Ok(manifest)
}

fn metrics_header() -> Vec<String> {
    ["setting", "seed", "task", "method", "split", "rmse"].map(String::from).to_vec()
}

fn setting_label(manifest: &Manifest) -> String {
    manifest.setting.map_or_else(|| "custom".to_string(), |s| s.id().to_string())
}

/// RMSE rows for one model file. A single-task model is evaluated on `task`.
pub fn evaluate_model(
    model: &MtlModel,
    data: &DataDir,
    task: Option<usize>,
    splits: &[Split],
) -> crate::Result<Vec<Vec<String>>> {
    let method = if model.shared.is_some() { Method::Mtl } else { Method::Stl };
    let pairs: Vec<(usize, usize)> = match (model.tasks(), task) {
        (_, Some(t)) if model.tasks() == 1 => vec![(0, t)],
        (r, Some(t)) => {
            if t >= r {
                return Err(Error::TaskIndex { index: t, tasks: r });
            }
            vec![(t, t)]
        }
        (r, None) if r == data.tasks.len() => (0..r).map(|t| (t, t)).collect(),
        (r, None) => {
            return Err(Error::InvalidArgument(format!(
                "model has {r} task(s) but the data has {}; pass --task",
                data.tasks.len()
            )))
        }
    };
    let mut rows = Vec::new();
    for (model_task, data_task) in pairs {
        let splits_of = data.tasks.get(data_task).ok_or(Error::TaskIndex {
            index: data_task,
            tasks: data.tasks.len(),
        })?;
        for &split in splits {
            let d = splits_of.get(split);
            if d.x.ncols() != model.input_dim() {
                return Err(Error::shape("model input dimension", model.input_dim(), d.x.ncols()));
            }
            let yhat = model.predict(model_task, d.x.view())?;
            rows.push(vec![
                setting_label(&data.manifest),
                data.manifest.seed.to_string(),
                data_task.to_string(),
                method.to_string(),
                split.to_string(),
                fmt_f64(rmse(yhat.view(), d.y.view())?),
            ]);
        }
    }
    Ok(rows)
}

pub fn report_csv(report: &TrainReport) -> Vec<u8> {
    let header = ["epoch", "rate", "train_mse", "similarity", "orthogonality", "objective", "val_mse"]
        .map(String::from);
    csv_bytes(
        &header,
        report.history.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                fmt_f64(e.rate),
                fmt_f64(e.train.mse),
                fmt_f64(e.train.similarity),
                fmt_f64(e.train.orthogonality),
                fmt_f64(e.train.total),
                fmt_f64(e.val_mse),
            ]
        }),
    )
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    method: Method,
    seed: u64,
    hyperparams: &'a HyperParams,
    fit: &'a FitOptions,
    models: Vec<String>,
    best_epoch: Vec<usize>,
    best_val_mse: Vec<f64>,
    epochs_run: Vec<usize>,
    stopped_early: Vec<bool>,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    match &cli.config {
        Some(path) => Ok(RunConfig::load(path)?),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: PathBuf, bytes: &[u8]) -> anyhow::Result<()> {
    write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> anyhow::Result<ExitCode> {
    let config = make_setting(args.setting.setting, &args.setting.overrides(Some(cli.seed)))?;
    let manifest = write_study(&cli.out, Some(args.setting.setting), &config)?;
    println!(
        "wrote {} dataset files for setting {} to {}",
        manifest.files.len(),
        args.setting.setting,
        cli.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> anyhow::Result<ExitCode> {
    let config = load_config(cli)?;
    let data = load_data_dir(&args.data)?;
    let hp = config.hyperparams_for(args.method, data.manifest.setting, cli.full_scale);
    let fitted = fit(args.method, &data.tasks, &hp, &config.fit, cli.seed)?;

    let mut names = Vec::new();
    match args.method {
        Method::Mtl => {
            names.push("model.bin".to_string());
            save_model(&cli.out.join("model.bin"), &fitted.models[0])?;
            write(cli.out.join("report.csv"), &report_csv(&fitted.reports[0]))?;
        }
        Method::Stl => {
            for (r, (model, report)) in fitted.models.iter().zip(&fitted.reports).enumerate() {
                let name = format!("model_task{r}.bin");
                save_model(&cli.out.join(&name), model)?;
                names.push(name);
                write(cli.out.join(format!("report_task{r}.csv")), &report_csv(report))?;
            }
        }
    }
    let mut rows = Vec::new();
    for (r, name) in names.iter().enumerate() {
        let model = load_model(&cli.out.join(name))?;
        let task = (args.method == Method::Stl).then_some(r);
        rows.extend(evaluate_model(&model, &data, task, &Split::ALL)?);
    }
    write(cli.out.join("metrics.csv"), &csv_bytes(&metrics_header(), rows))?;
    let summary = TrainSummary {
        method: args.method,
        seed: cli.seed,
        hyperparams: &hp,
        fit: &config.fit,
        models: names,
        best_epoch: fitted.reports.iter().map(|r| r.best_epoch).collect(),
        best_val_mse: fitted.reports.iter().map(|r| r.best_val_mse).collect(),
        epochs_run: fitted.reports.iter().map(TrainReport::epochs_run).collect(),
        stopped_early: fitted.reports.iter().map(|r| r.stopped_early).collect(),
    };
    write(cli.out.join("train.json"), &json_bytes(&summary))?;
    println!("trained {} model(s) into {}", summary.models.len(), cli.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> anyhow::Result<ExitCode> {
    let data = load_data_dir(&args.data)?;
    let model = load_model(&args.model)?;
    let rows = evaluate_model(&model, &data, args.task, &args.splits)?;
    let bytes = csv_bytes(&metrics_header(), rows);
    print!("{}", String::from_utf8_lossy(&bytes));
    write(cli.out.join("metrics.csv"), &bytes)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_hpsearch(cli: &Cli, args: &HpsearchArgs) -> anyhow::Result<ExitCode> {
    let config = load_config(cli)?;
    let data = load_data_dir(&args.data)?;
    let trials = config.trials(args.trials, cli.full_scale);
    let outcome = run_hpsearch(
        &data.tasks,
        args.method,
        &config.space(cli.full_scale),
        args.mode,
        trials,
        &config.fit,
        cli.seed,
    )?;
    write(cli.out.join("trials.csv"), &trials_csv(&outcome))?;
    let best = RunConfig {
        hyperparams: Some(outcome.best.clone()),
        ..config
    };
    write(cli.out.join("best.toml"), toml::to_string(&best)?.as_bytes())?;
    println!("best trial {} of {}", outcome.best_index, outcome.trials.len());
    Ok(ExitCode::SUCCESS)
}

pub fn write_sweep(dir: &Path, result: &SweepResult) -> crate::Result<()> {
    write_atomic(&dir.join("metrics.csv"), &result.metrics_csv())?;
    write_atomic(&dir.join("aggregate.csv"), &result.aggregate_csv())?;
    write_atomic(&dir.join("failures.csv"), &result.failures_csv())
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> anyhow::Result<ExitCode> {
    let config = load_config(cli)?;
    let count = args
        .seeds
        .unwrap_or(if cli.full_scale { FULL_SEEDS } else { DESK_SEEDS });
    if count == 0 {
        bail!("--seeds must be at least 1");
    }
    let mut plan = ReplicationPlan::new(args.setting.setting, (0..count as u64).map(|i| cli.seed + i).collect());
    plan.overrides = args.setting.overrides(None);
    // reject bad overrides before any training starts
    make_setting(plan.setting, &plan.overrides)?;
    plan.options = config.fit.clone();
    plan.all_splits = args.all_splits;
    plan.tuning = if args.search || cli.full_scale {
        Tuning::Search {
            space: config.space(cli.full_scale),
            mode: config.search.mode,
            trials: config.trials(None, cli.full_scale),
        }
    } else {
        Tuning::Fixed {
            mtl: config.mtl(Some(plan.setting), false),
            stl: config.stl(Some(plan.setting), false),
        }
    };
    let result = run_replications(&plan)?;
    write_sweep(&cli.out, &result)?;
    print!("{}", String::from_utf8_lossy(&result.aggregate_csv()));
    if !result.failures.is_empty() {
        eprintln!("{} fit(s) failed; see failures.csv", result.failures.len());
        if !args.allow_partial {
            return Ok(ExitCode::from(2));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(cli: &Cli, args: &ExportArgs) -> anyhow::Result<ExitCode> {
    let data = load_data_dir(&args.data)?;
    let model = load_model(&args.model)?;
    let mut datasets: Vec<TaskDataset> = Vec::new();
    for (r, t) in data.tasks.iter().enumerate() {
        if args.task.is_some_and(|want| want != r) {
            continue;
        }
        for split in Split::ALL {
            let mut d = t.get(split).clone();
            if model.tasks() == 1 {
                d.task = 0;
            }
            datasets.push(d);
        }
    }
    if model.tasks() == 1 && data.tasks.len() > 1 && args.task.is_none() {
        bail!("single-task model: pass --task");
    }
    let refs: Vec<&TaskDataset> = datasets.iter().collect();
    let files = export_latents(&model, &refs, &cli.out)?;
    println!("wrote {} latent files to {}", files.len(), cli.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build()?;
    pool.install(|| match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Hpsearch(a) => cmd_hpsearch(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::ExportLatents(a) => cmd_export(cli, a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "schema_version = 1\nbogus = 3\n").unwrap();
        let msg = RunConfig::load(&path).unwrap_err().to_string();
        assert!(msg.contains("run.toml") && msg.contains("bogus"), "{msg}");

        fs::write(&path, "schema_version = 2\n").unwrap();
        assert!(RunConfig::load(&path).is_err());

        fs::write(&path, "schema_version = 1\n[fit]\nlr_decay = 1.5\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = RunConfig {
            hyperparams: Some(HyperParams::desk_default()),
            ..RunConfig::default()
        };
        let text = toml::to_string(&config).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), config);
    }

    #[test]
    fn cli_parses_env_style_flags() {
        let cli = Cli::try_parse_from(["dualmtl", "sweep", "--setting", "linear", "--seeds", "3", "--jobs", "4"]).unwrap();
        assert_eq!(cli.jobs, 4);
        match cli.command {
            Command::Sweep(a) => {
                assert_eq!(a.setting.setting, Setting::Linear);
                assert_eq!(a.seeds, Some(3));
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["dualmtl", "simulate", "--setting", "9"]).is_err());
    }

    #[test]
    fn data_dir_without_manifest_is_discovered() {
        let dir = tempfile::tempdir().unwrap();
        let config = make_setting(Setting::Linear, &SettingOverrides { n: Some(5), ..Default::default() }).unwrap();
        write_study(dir.path(), Some(Setting::Linear), &config).unwrap();
        let with = load_data_dir(dir.path()).unwrap();
        fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        let without = load_data_dir(dir.path()).unwrap();
        assert_eq!(with.tasks.len(), 3);
        assert_eq!(without.tasks.len(), 3);
        assert_eq!(with.tasks[2].test.x, without.tasks[2].test.x);
    }
}
