//! Experiment orchestration: evaluation, the single-task baseline,
//! hyperparameter search and multi-seed replication sweeps.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{generate, make_setting, Setting, SettingOverrides, Split, TaskDataset, TaskSplits};
use crate::error::{Error, Result};
use crate::io::{csv_bytes, fmt_f64, write_atomic};
use crate::model::{Architecture, Batch, EncoderShape, MtlModel, PenaltyWeights};
use crate::nncore::LrSchedule;
use crate::trainer::{norm, train, TrainConfig, TrainReport};

/// RNG stream used for encoder initialization (the trainer shuffles on
/// stream 1 of the same seed).
pub const INIT_STREAM: u64 = 2;

/// Root-mean-square error.
pub fn rmse(yhat: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("rmse of an empty sample".into()));
    }
    if yhat.len() != y.len() {
        return Err(Error::shape("rmse inputs", y.len(), yhat.len()));
    }
    let sse: f64 = yhat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Independent seed for worker `index` of a run seeded with `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index.wrapping_add(1 << 32));
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mtl,
    Stl,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mtl => "mtl",
            Method::Stl => "stl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtl" => Ok(Method::Mtl),
            "stl" => Ok(Method::Stl),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}` (expected mtl or stl)"))),
        }
    }
}

/// One point of the tuning space. The similarity weights apply to every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub specific_depth: usize,
    pub specific_width: usize,
    pub q: usize,
    pub shared_depth: usize,
    pub shared_width: usize,
    pub p: usize,
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub lambda_o: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

/// Default epoch budget for desk-scale runs.
pub const DESK_EPOCHS: usize = 2000;
pub const FULL_EPOCHS: usize = 25_000;

impl HyperParams {
    /// Fixed configuration used when no search is requested. Chosen by
    /// validation loss on seeds disjoint from the acceptance seeds.
    pub fn desk_default() -> Self {
        HyperParams {
            specific_depth: 2,
            specific_width: 32,
            q: 4,
            shared_depth: 2,
            shared_width: 128,
            p: 4,
            lambda_s: 0.1,
            lambda_c: 1000.0,
            lambda_o: 0.001,
            batch_size: 32,
            learning_rate: 0.02,
            epochs: DESK_EPOCHS,
        }
    }

    /// Fixed configuration for the linear study: single affine layers.
    pub fn desk_linear() -> Self {
        HyperParams {
            specific_depth: 1,
            specific_width: 64,
            q: 4,
            shared_depth: 1,
            shared_width: 128,
            p: 8,
            lambda_s: 0.1,
            lambda_c: 0.1,
            lambda_o: 0.001,
            batch_size: 8,
            learning_rate: 0.01,
            epochs: DESK_EPOCHS,
        }
    }

    pub fn desk_for(setting: Setting) -> Self {
        match setting {
            Setting::Linear => Self::desk_linear(),
            _ => Self::desk_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("specific_depth", self.specific_depth),
            ("specific_width", self.specific_width),
            ("q", self.q),
            ("shared_depth", self.shared_depth),
            ("shared_width", self.shared_width),
            ("p", self.p),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_c", self.lambda_c),
            ("lambda_o", self.lambda_o),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn mtl_architecture(&self, input_dim: usize, tasks: usize) -> Architecture {
        Architecture {
            input_dim,
            tasks,
            specific: EncoderShape {
                depth: self.specific_depth,
                width: self.specific_width,
                out_dim: self.q,
            },
            shared: Some(EncoderShape {
                depth: self.shared_depth,
                width: self.shared_width,
                out_dim: self.p,
            }),
        }
    }

    /// Single task, task-specific encoder only.
    pub fn stl_architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            shared: None,
            ..self.mtl_architecture(input_dim, 1)
        }
    }

    pub fn train_config(&self, tasks: usize, options: &FitOptions, seed: u64) -> Result<TrainConfig> {
        let mut config = TrainConfig::new(
            tasks,
            self.epochs,
            self.batch_size,
            LrSchedule::new(self.learning_rate, options.lr_decay)?,
        );
        config.weights = PenaltyWeights::uniform(tasks, self.lambda_s, self.lambda_c, self.lambda_o);
        config.patience = options.patience;
        config.inner_steps = options.inner_steps;
        config.fresh_beta_in_alpha_step = options.fresh_beta_in_alpha_step;
        config.seed = seed;
        Ok(config)
    }

    /// Column names and values for flat tables.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("specific_depth", self.specific_depth.to_string()),
            ("specific_width", self.specific_width.to_string()),
            ("q", self.q.to_string()),
            ("shared_depth", self.shared_depth.to_string()),
            ("shared_width", self.shared_width.to_string()),
            ("p", self.p.to_string()),
            ("lambda_s", fmt_f64(self.lambda_s)),
            ("lambda_c", fmt_f64(self.lambda_c)),
            ("lambda_o", fmt_f64(self.lambda_o)),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", fmt_f64(self.learning_rate)),
            ("epochs", self.epochs.to_string()),
        ]
    }
}

/// Training knobs that are not tuned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub patience: usize,
    pub lr_decay: f64,
    pub inner_steps: usize,
    pub fresh_beta_in_alpha_step: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            patience: 200,
            lr_decay: 0.95,
            inner_steps: 1,
            fresh_beta_in_alpha_step: true,
        }
    }
}

/// Candidate values per hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub latent_dims: Vec<usize>,
    pub lambda_sim: Vec<f64>,
    pub lambda_orth: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            depths: vec![3, 4, 5],
            widths: vec![16, 32, 64, 128],
            latent_dims: vec![8, 16, 32, 64],
            lambda_sim: vec![1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0, 500.0, 1000.0, 5000.0],
            lambda_orth: vec![0.001, 0.01],
            batch_sizes: vec![8, 16, 32],
            learning_rates: vec![1e-4, 1e-3],
            epochs: FULL_EPOCHS,
        }
    }
}

fn pick<T: Copy, R: Rng + ?Sized>(values: &[T], rng: &mut R) -> T {
    *values.choose(rng).expect("validated non-empty grid")
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let lens = [
            ("depths", self.depths.len()),
            ("widths", self.widths.len()),
            ("latent_dims", self.latent_dims.len()),
            ("lambda_sim", self.lambda_sim.len()),
            ("lambda_orth", self.lambda_orth.len()),
            ("batch_sizes", self.batch_sizes.len()),
            ("learning_rates", self.learning_rates.len()),
        ];
        if let Some((name, _)) = lens.iter().find(|(_, n)| *n == 0) {
            return Err(Error::InvalidArgument(format!("search grid `{name}` is empty")));
        }
        self.grid_point(0).validate()
    }

    /// Draws every field independently and uniformly from its grid.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> HyperParams {
        HyperParams {
            specific_depth: pick(&self.depths, rng),
            specific_width: pick(&self.widths, rng),
            q: pick(&self.latent_dims, rng),
            shared_depth: pick(&self.depths, rng),
            shared_width: pick(&self.widths, rng),
            p: pick(&self.latent_dims, rng),
            lambda_s: pick(&self.lambda_sim, rng),
            lambda_c: pick(&self.lambda_sim, rng),
            lambda_o: pick(&self.lambda_orth, rng),
            batch_size: pick(&self.batch_sizes, rng),
            learning_rate: pick(&self.learning_rates, rng),
            epochs: self.epochs,
        }
    }

    fn radices(&self) -> [usize; 11] {
        [
            self.depths.len(),
            self.widths.len(),
            self.latent_dims.len(),
            self.depths.len(),
            self.widths.len(),
            self.latent_dims.len(),
            self.lambda_sim.len(),
            self.lambda_sim.len(),
            self.lambda_orth.len(),
            self.batch_sizes.len(),
            self.learning_rates.len(),
        ]
    }

    /// Number of points in the exhaustive grid (saturating).
    pub fn grid_size(&self) -> usize {
        self.radices().iter().fold(1usize, |acc, &r| acc.saturating_mul(r))
    }

    /// The `index`-th grid point in mixed-radix order (last field fastest).
    /// Indices wrap around the grid size.
    pub fn grid_point(&self, index: usize) -> HyperParams {
        let radices = self.radices();
        let mut digits = [0usize; 11];
        let mut rest = index % self.grid_size().max(1);
        for (digit, &radix) in digits.iter_mut().zip(&radices).rev() {
            *digit = rest % radix.max(1);
            rest /= radix.max(1);
        }
        HyperParams {
            specific_depth: self.depths[digits[0]],
            specific_width: self.widths[digits[1]],
            q: self.latent_dims[digits[2]],
            shared_depth: self.depths[digits[3]],
            shared_width: self.widths[digits[4]],
            p: self.latent_dims[digits[5]],
            lambda_s: self.lambda_sim[digits[6]],
            lambda_c: self.lambda_sim[digits[7]],
            lambda_o: self.lambda_orth[digits[8]],
            batch_size: self.batch_sizes[digits[9]],
            learning_rate: self.learning_rates[digits[10]],
            epochs: self.epochs,
        }
    }

    pub fn contains(&self, hp: &HyperParams) -> bool {
        self.depths.contains(&hp.specific_depth)
            && self.depths.contains(&hp.shared_depth)
            && self.widths.contains(&hp.specific_width)
            && self.widths.contains(&hp.shared_width)
            && self.latent_dims.contains(&hp.q)
            && self.latent_dims.contains(&hp.p)
            && self.lambda_sim.contains(&hp.lambda_s)
            && self.lambda_sim.contains(&hp.lambda_c)
            && self.lambda_orth.contains(&hp.lambda_o)
            && self.batch_sizes.contains(&hp.batch_size)
            && self.learning_rates.contains(&hp.learning_rate)
            && hp.epochs == self.epochs
    }
}

/// A draw from the default search space.
pub fn sample_hyperparams<R: Rng + ?Sized>(rng: &mut R) -> HyperParams {
    SearchSpace::default().sample(rng)
}

/// Trains the joint model on every task's train split, stopping on the
/// validation splits.
pub fn fit_mtl(tasks: &[TaskSplits], hp: &HyperParams, options: &FitOptions, seed: u64) -> Result<(MtlModel, TrainReport)> {
    hp.validate()?;
    let d = input_dim(tasks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let model = MtlModel::init(&hp.mtl_architecture(d, tasks.len()), &mut rng)?;
    let (train_sets, val_sets) = train_val(tasks);
    train(model, &train_sets, &val_sets, &hp.train_config(tasks.len(), options, seed)?)
}

#[derive(Debug, Clone)]
pub struct StlFit {
    pub model: MtlModel,
    pub report: TrainReport,
    pub train_rmse: f64,
    pub test_rmse: f64,
}

/// Fits an independent network on one task: no shared encoder and no
/// penalties, trained by the same routine as the joint model.
pub fn train_stl_baseline(task: &TaskSplits, hp: &HyperParams, options: &FitOptions, seed: u64) -> Result<StlFit> {
    let hp = HyperParams {
        lambda_s: 0.0,
        lambda_c: 0.0,
        lambda_o: 0.0,
        ..hp.clone()
    };
    hp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let model = MtlModel::init(&hp.stl_architecture(task.train.x.ncols()), &mut rng)?;
    let (model, report) = train(
        model,
        &[task.train.to_batch()],
        &[task.val.to_batch()],
        &hp.train_config(1, options, seed)?,
    )?;
    let train_rmse = rmse(model.predict(0, task.train.x.view())?.view(), task.train.y.view())?;
    let test_rmse = rmse(model.predict(0, task.test.x.view())?.view(), task.test.y.view())?;
    Ok(StlFit {
        model,
        report,
        train_rmse,
        test_rmse,
    })
}

/// A fitted method: one joint model, or one single-task model per task.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub method: Method,
    pub models: Vec<MtlModel>,
    pub reports: Vec<TrainReport>,
}

impl Fitted {
    pub fn predict(&self, task: usize, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        match self.method {
            Method::Mtl => self.models[0].predict(task, x),
            Method::Stl => self
                .models
                .get(task)
                .ok_or(Error::TaskIndex {
                    index: task,
                    tasks: self.models.len(),
                })?
                .predict(0, x),
        }
    }

    pub fn rmse_on(&self, data: &TaskDataset) -> Result<f64> {
        rmse(self.predict(data.task, data.x.view())?.view(), data.y.view())
    }

    /// Mean over tasks of the validation MSE.
    pub fn val_mse(&self, tasks: &[TaskSplits]) -> Result<f64> {
        let mut total = 0.0;
        for t in tasks {
            let r = self.rmse_on(&t.val)?;
            total += r * r;
        }
        Ok(total / tasks.len() as f64)
    }
}

/// Seed of the single-task fit for task `r` within a run seeded `seed`.
pub fn stl_task_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, r as u64)
}

pub fn fit(method: Method, tasks: &[TaskSplits], hp: &HyperParams, options: &FitOptions, seed: u64) -> Result<Fitted> {
    match method {
        Method::Mtl => {
            let (model, report) = fit_mtl(tasks, hp, options, seed)?;
            Ok(Fitted {
                method,
                models: vec![model],
                reports: vec![report],
            })
        }
        Method::Stl => {
            input_dim(tasks)?;
            let fits = tasks
                .iter()
                .enumerate()
                .map(|(r, t)| train_stl_baseline(t, hp, options, stl_task_seed(seed, r)))
                .collect::<Result<Vec<_>>>()?;
            let (models, reports) = fits.into_iter().map(|f| (f.model, f.report)).unzip();
            Ok(Fitted {
                method,
                models,
                reports,
            })
        }
    }
}

fn input_dim(tasks: &[TaskSplits]) -> Result<usize> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no tasks supplied".into()))?;
    Ok(first.train.x.ncols())
}

fn train_val(tasks: &[TaskSplits]) -> (Vec<Batch>, Vec<Batch>) {
    tasks
        .iter()
        .map(|t| (t.train.to_batch(), t.val.to_batch()))
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    #[default]
    Random,
    Grid,
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SearchMode::Random),
            "grid" => Ok(SearchMode::Grid),
            other => Err(Error::InvalidArgument(format!("unknown search mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub index: usize,
    pub hyperparams: HyperParams,
    pub seed: u64,
    /// `Err` holds the failure message.
    pub val_mse: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best_index: usize,
    pub best: HyperParams,
    pub trials: Vec<TrialResult>,
}

/// Candidate settings for a search, in trial order.
pub fn search_candidates(space: &SearchSpace, mode: SearchMode, trials: usize, base_seed: u64) -> Vec<HyperParams> {
    match mode {
        SearchMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
            (0..trials).map(|_| space.sample(&mut rng)).collect()
        }
        SearchMode::Grid => (0..trials.min(space.grid_size())).map(|i| space.grid_point(i)).collect(),
    }
}

/// Index of the smallest finite loss; the earliest index wins ties.
pub fn select_best(trials: &[TrialResult]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for t in trials {
        if let Ok(loss) = t.val_mse {
            if loss.is_finite() && best.is_none_or(|(_, b)| loss < b) {
                best = Some((t.index, loss));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Evaluates the given candidates in parallel and returns the one with the
/// smallest validation loss.
pub fn run_candidates(
    tasks: &[TaskSplits],
    method: Method,
    candidates: Vec<HyperParams>,
    options: &FitOptions,
    base_seed: u64,
) -> Result<SearchOutcome> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("hyperparameter search needs at least one trial".into()));
    }
    let mut trials: Vec<TrialResult> = candidates
        .into_par_iter()
        .enumerate()
        .map(|(index, hyperparams)| {
            let seed = derive_seed(base_seed, index as u64);
            let val_mse = fit(method, tasks, &hyperparams, options, seed)
                .and_then(|f| f.val_mse(tasks))
                .map_err(|e| e.to_string());
            TrialResult {
                index,
                hyperparams,
                seed,
                val_mse,
            }
        })
        .collect();
    trials.sort_by_key(|t| t.index);
    match select_best(&trials) {
        Some(best_index) => Ok(SearchOutcome {
            best_index,
            best: trials[best_index].hyperparams.clone(),
            trials,
        }),
        None => Err(Error::AllTrialsFailed(
            trials
                .iter()
                .map(|t| match &t.val_mse {
                    Err(msg) => format!("trial {}: {msg}", t.index),
                    Ok(v) => format!("trial {}: non-finite loss {v}", t.index),
                })
                .collect(),
        )),
    }
}

pub fn run_hpsearch(
    tasks: &[TaskSplits],
    method: Method,
    space: &SearchSpace,
    mode: SearchMode,
    trials: usize,
    options: &FitOptions,
    base_seed: u64,
) -> Result<SearchOutcome> {
    space.validate()?;
    run_candidates(tasks, method, search_candidates(space, mode, trials, base_seed), options, base_seed)
}

pub fn trials_csv(outcome: &SearchOutcome) -> Vec<u8> {
    let mut header = vec!["trial".to_string(), "seed".to_string()];
    header.extend(HyperParams::desk_default().fields().into_iter().map(|(k, _)| k.to_string()));
    header.extend(["val_mse".to_string(), "error".to_string(), "selected".to_string()]);
    let rows = outcome.trials.iter().map(|t| {
        let mut row = vec![t.index.to_string(), t.seed.to_string()];
        row.extend(t.hyperparams.fields().into_iter().map(|(_, v)| v));
        match &t.val_mse {
            Ok(v) => row.extend([fmt_f64(*v), String::new()]),
            Err(e) => row.extend([String::new(), e.clone()]),
        }
        row.push((t.index == outcome.best_index).to_string());
        row
    });
    csv_bytes(&header, rows)
}

/// How each replication picks hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum Tuning {
    Fixed {
        mtl: HyperParams,
        stl: HyperParams,
    },
    Search {
        space: SearchSpace,
        mode: SearchMode,
        trials: usize,
    },
}

impl Default for Tuning {
    fn default() -> Self {
        Tuning::Fixed {
            mtl: HyperParams::desk_default(),
            stl: HyperParams::desk_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationPlan {
    pub setting: Setting,
    pub overrides: SettingOverrides,
    pub seeds: Vec<u64>,
    pub tuning: Tuning,
    pub options: FitOptions,
    /// Also record train and validation RMSE.
    pub all_splits: bool,
}

impl ReplicationPlan {
    pub fn new(setting: Setting, seeds: Vec<u64>) -> Self {
        ReplicationPlan {
            setting,
            overrides: SettingOverrides::default(),
            seeds,
            tuning: Tuning::default(),
            options: FitOptions::default(),
            all_splits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub setting: String,
    pub seed: u64,
    pub task: usize,
    pub method: Method,
    pub split: Split,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub method: Option<Method>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub setting: String,
    pub task: usize,
    pub method: Method,
    pub split: Split,
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub records: Vec<MetricRecord>,
    pub failures: Vec<SeedFailure>,
}

fn split_rank(s: Split) -> usize {
    Split::ALL.iter().position(|&x| x == s).unwrap()
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Mean and SD per (setting, task, method, split), in sorted key order.
pub fn aggregate(records: &[MetricRecord]) -> Vec<AggregateRow> {
    let mut groups: std::collections::BTreeMap<(String, usize, Method, usize), Vec<f64>> = Default::default();
    for r in records {
        groups
            .entry((r.setting.clone(), r.task, r.method, split_rank(r.split)))
            .or_default()
            .push(r.rmse);
    }
    groups
        .into_iter()
        .map(|((setting, task, method, split), values)| {
            let (mean, sd) = mean_sd(&values);
            AggregateRow {
                setting,
                task,
                method,
                split: Split::ALL[split],
                count: values.len(),
                mean,
                sd,
            }
        })
        .collect()
}

impl SweepResult {
    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| {
            (&a.setting, a.seed, a.task, a.method, split_rank(a.split))
                .cmp(&(&b.setting, b.seed, b.task, b.method, split_rank(b.split)))
        });
        self.failures.sort_by_key(|a| (a.seed, a.method));
    }

    pub fn aggregate(&self) -> Vec<AggregateRow> {
        aggregate(&self.records)
    }

    /// Mean test RMSE of `method` over all tasks and seeds.
    pub fn mean_test_rmse(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.method == method && r.split == Split::Test)
            .map(|r| r.rmse)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn metrics_csv(&self) -> Vec<u8> {
        let header = ["setting", "seed", "task", "method", "split", "rmse"].map(String::from);
        csv_bytes(
            &header,
            self.records.iter().map(|r| {
                vec![
                    r.setting.clone(),
                    r.seed.to_string(),
                    r.task.to_string(),
                    r.method.to_string(),
                    r.split.to_string(),
                    fmt_f64(r.rmse),
                ]
            }),
        )
    }

    pub fn aggregate_csv(&self) -> Vec<u8> {
        let header = ["setting", "task", "method", "split", "count", "mean", "sd"].map(String::from);
        csv_bytes(
            &header,
            self.aggregate().into_iter().map(|a| {
                vec![
                    a.setting,
                    a.task.to_string(),
                    a.method.to_string(),
                    a.split.to_string(),
                    a.count.to_string(),
                    fmt_f64(a.mean),
                    fmt_f64(a.sd),
                ]
            }),
        )
    }

    pub fn failures_csv(&self) -> Vec<u8> {
        let header = ["seed", "method", "message"].map(String::from);
        csv_bytes(
            &header,
            self.failures.iter().map(|f| {
                vec![
                    f.seed.to_string(),
                    f.method.map(|m| m.to_string()).unwrap_or_default(),
                    f.message.clone(),
                ]
            }),
        )
    }
}

fn tuned(tasks: &[TaskSplits], method: Method, plan: &ReplicationPlan, seed: u64) -> Result<HyperParams> {
    match &plan.tuning {
        Tuning::Fixed { mtl, stl } => Ok(match method {
            Method::Mtl => mtl.clone(),
            Method::Stl => stl.clone(),
        }),
        Tuning::Search { space, mode, trials } => {
            let search_seed = derive_seed(seed, 100 + method as u64);
            run_hpsearch(tasks, method, space, *mode, *trials, &plan.options, search_seed).map(|o| o.best)
        }
    }
}

fn replicate_one(plan: &ReplicationPlan, setting_id: &str, seed: u64) -> (Vec<MetricRecord>, Vec<SeedFailure>) {
    let overrides = SettingOverrides {
        seed: Some(seed),
        ..plan.overrides
    };
    let study = match make_setting(plan.setting, &overrides).and_then(|c| generate(&c)) {
        Ok(s) => s,
        Err(e) => {
            return (
                Vec::new(),
                vec![SeedFailure {
                    seed,
                    method: None,
                    message: e.to_string(),
                }],
            )
        }
    };
    let splits: &[Split] = if plan.all_splits { &Split::ALL } else { &[Split::Test] };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for method in [Method::Mtl, Method::Stl] {
        let fit_seed = derive_seed(seed, 1);
        let outcome = tuned(&study.tasks, method, plan, seed).and_then(|hp| {
            let fitted = fit(method, &study.tasks, &hp, &plan.options, fit_seed)?;
            let mut rows = Vec::new();
            for t in &study.tasks {
                for &split in splits {
                    rows.push(MetricRecord {
                        setting: setting_id.to_string(),
                        seed,
                        task: t.train.task,
                        method,
                        split,
                        rmse: fitted.rmse_on(t.get(split))?,
                    });
                }
            }
            Ok(rows)
        });
        match outcome {
            Ok(rows) => records.extend(rows),
            Err(e) => failures.push(SeedFailure {
                seed,
                method: Some(method),
                message: e.to_string(),
            }),
        }
    }
    (records, failures)
}

/// Generates one study per seed, fits both methods and records RMSEs.
/// Failures are collected per seed and do not stop the sweep.
pub fn run_replications(plan: &ReplicationPlan) -> Result<SweepResult> {
    if plan.seeds.is_empty() {
        return Err(Error::InvalidArgument("a sweep needs at least one seed".into()));
    }
    if let Tuning::Fixed { mtl, stl } = &plan.tuning {
        mtl.validate()?;
        stl.validate()?;
    }
    let setting_id = plan.setting.id();
    let parts: Vec<_> = plan
        .seeds
        .par_iter()
        .map(|&seed| replicate_one(plan, setting_id, seed))
        .collect();
    let mut result = SweepResult::default();
    for (records, failures) in parts {
        result.records.extend(records);
        result.failures.extend(failures);
    }
    result.sort();
    Ok(result)
}

/// Writes the latent factors of each dataset: `latent_task<r>_<split>_specific.csv`
/// (columns `task,s1..sq`) and, when the model has a shared encoder,
/// `latent_task<r>_<split>_shared.csv` (columns `task,c1..cp`).
pub fn export_latents(model: &MtlModel, datasets: &[&TaskDataset], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for data in datasets {
        let latent = model.encode(data.task, data.x.view())?;
        let parts = [("specific", "s", &latent.s_bar), ("shared", "c", &latent.c_bar)];
        for (kind, prefix, values) in parts {
            if values.ncols() == 0 {
                continue;
            }
            let header: Vec<String> = std::iter::once("task".to_string())
                .chain((1..=values.ncols()).map(|j| format!("{prefix}{j}")))
                .collect();
            let rows = values.rows().into_iter().map(|row| {
                std::iter::once(data.task.to_string())
                    .chain(row.iter().map(|&v| fmt_f64(v)))
                    .collect::<Vec<_>>()
            });
            let path = dir.join(format!("latent_task{}_{}_{kind}.csv", data.task, data.role));
            write_atomic(&path, &csv_bytes(&header, rows))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Relative distance of each head from its center. `None` when the center
/// has zero norm (or the block is empty).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterDistance {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

pub fn relative_center_distances(model: &MtlModel) -> Vec<CenterDistance> {
    let ratio = |head: &Array1<f64>, center: &Array1<f64>| {
        let c = norm(center);
        (c > 0.0).then(|| norm(&(head - center)) / c)
    };
    model
        .heads
        .iter()
        .map(|h| CenterDistance {
            alpha: ratio(&h.alpha, &model.centers.alpha_bar),
            beta: ratio(&h.beta, &model.centers.beta_bar),
        })
        .collect()
}
