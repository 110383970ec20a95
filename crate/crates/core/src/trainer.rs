//! Three-block alternating training.
//!
//! Every mini-batch runs, in order:
//!
//! 1. one Adam step on all encoders against the batch MSE plus the
//!    orthogonality penalty, heads held fixed;
//! 2. the `β` block: a proximal-gradient step on each deviation
//!    `v_r = β_r − β̄` followed by an exact least-squares solve for `β̄`;
//! 3. the `α` block, the mirror image of step 2 on the task-specific
//!    features.
//!
//! The learning rate decays once per epoch and the parameters from the epoch
//! with the lowest validation MSE are returned.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_normal_equations;
use crate::model::{
    mean_squared_residual, objective, Batch, LatentBatch, MtlModel, ObjectiveBreakdown,
    PenaltyWeights,
};
use crate::nncore::{adam_step_net, AdamHyper, AdamState, LrSchedule, NetGrads};

/// RNG stream used for mini-batch shuffling.
pub const SHUFFLE_STREAM: u64 = 1;

/// Proximal operator of `t‖·‖`: `(1 − t/‖v‖)₊ · v`.
pub fn prox_group(v: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "prox threshold must be non-negative, got {t}"
        )));
    }
    if t == 0.0 {
        return Ok(v.to_owned());
    }
    let norm = v.dot(&v).sqrt();
    if norm <= t {
        return Ok(Array1::zeros(v.len()));
    }
    Ok(v.mapv(|x| x * (1.0 - t / norm)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefBlock {
    Alpha,
    Beta,
}

/// Heads of one block rewritten as deviations from their center.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationState {
    pub deviations: Vec<Array1<f64>>,
    pub center: Array1<f64>,
}

impl DeviationState {
    pub fn from_model(model: &MtlModel, block: CoefBlock) -> Self {
        let center = match block {
            CoefBlock::Alpha => model.centers.alpha_bar.clone(),
            CoefBlock::Beta => model.centers.beta_bar.clone(),
        };
        let deviations = model
            .heads
            .iter()
            .map(|h| match block {
                CoefBlock::Alpha => &h.alpha - &center,
                CoefBlock::Beta => &h.beta - &center,
            })
            .collect();
        DeviationState { deviations, center }
    }

    pub fn head(&self, r: usize) -> Array1<f64> {
        &self.deviations[r] + &self.center
    }

    fn write_back(&self, model: &mut MtlModel, block: CoefBlock) {
        for (r, head) in model.heads.iter_mut().enumerate() {
            let value = self.head(r);
            match block {
                CoefBlock::Alpha => head.alpha = value,
                CoefBlock::Beta => head.beta = value,
            }
        }
        match block {
            CoefBlock::Alpha => model.centers.alpha_bar = self.center.clone(),
            CoefBlock::Beta => model.centers.beta_bar = self.center.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// One mini-batch size per task.
    pub batch_sizes: Vec<usize>,
    pub schedule: LrSchedule,
    pub weights: PenaltyWeights,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Proximal step + center solve repetitions per block per mini-batch.
    pub inner_steps: usize,
    pub seed: u64,
    /// Step 3 sees the `β` heads produced by step 2 of the same mini-batch
    /// when true; otherwise the values from before step 2.
    pub fresh_beta_in_alpha_step: bool,
    /// Skips step 1 entirely.
    pub freeze_encoders: bool,
    pub adam: AdamHyper,
}

impl TrainConfig {
    pub fn new(tasks: usize, epochs: usize, batch_size: usize, schedule: LrSchedule) -> Self {
        TrainConfig {
            epochs,
            batch_sizes: vec![batch_size; tasks],
            schedule,
            weights: PenaltyWeights::zeros(tasks),
            patience: 200,
            inner_steps: 1,
            seed: 0,
            fresh_beta_in_alpha_step: true,
            freeze_encoders: false,
            adam: AdamHyper::default(),
        }
    }

    pub fn validate(&self, tasks: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_sizes.len() != tasks {
            return Err(Error::shape("batch sizes", tasks, self.batch_sizes.len()));
        }
        if self.batch_sizes.contains(&0) {
            return Err(Error::InvalidArgument("batch sizes must be at least 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidArgument("inner steps must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.weights.validate(tasks)
    }
}

/// Adam state for every encoder of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOptimizer {
    pub shared: Option<AdamState>,
    pub specifics: Vec<AdamState>,
}

impl EncoderOptimizer {
    pub fn new(model: &MtlModel, hyper: AdamHyper) -> Self {
        EncoderOptimizer {
            shared: model
                .shared
                .as_ref()
                .map(|n| AdamState::with_hyper(n.num_params(), hyper)),
            specifics: model
                .specifics
                .iter()
                .map(|n| AdamState::with_hyper(n.num_params(), hyper))
                .collect(),
        }
    }
}

/// Where in training a step runs; used to label divergence errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepPosition {
    pub epoch: usize,
    pub batch: usize,
}

/// Gradients of `‖S̄ᵀC̄‖_F²` with respect to `S̄` and `C̄`.
pub fn orthogonality_latent_grad(latent: &LatentBatch) -> (Array2<f64>, Array2<f64>) {
    let m = latent.s_bar.t().dot(&latent.c_bar);
    let grad_s = latent.c_bar.dot(&m.t()) * 2.0;
    let grad_c = latent.s_bar.dot(&m) * 2.0;
    (grad_s, grad_c)
}

/// Step 1: one Adam step on every encoder. Returns the batch objective
/// evaluated before the update.
pub fn step1_encoders(
    model: &mut MtlModel,
    batches: &[Batch],
    weights: &PenaltyWeights,
    rate: f64,
    optim: &mut EncoderOptimizer,
    at: StepPosition,
) -> Result<ObjectiveBreakdown> {
    let tasks = model.tasks();
    if batches.len() != tasks {
        return Err(Error::shape("batches per task", tasks, batches.len()));
    }
    weights.validate(tasks)?;
    let diverged = || Error::Diverged {
        epoch: at.epoch,
        batch: at.batch,
    };

    let mut mse = 0.0;
    let mut orth = 0.0;
    let mut shared_grad: Option<NetGrads> = None;
    let mut specific_grads = Vec::with_capacity(tasks);
    for (r, batch) in batches.iter().enumerate() {
        let x = batch.x.view();
        let s_trace = model.specifics[r].forward_traced(x)?;
        let c_trace = model
            .shared
            .as_ref()
            .map(|net| net.forward_traced(x))
            .transpose()?;
        let latent = LatentBatch {
            s_bar: s_trace.output().clone(),
            c_bar: c_trace
                .as_ref()
                .map_or_else(|| Array2::zeros((x.nrows(), 0)), |t| t.output().clone()),
        };
        let yhat = model.predict_from_latent(r, &latent);
        let resid = &yhat - &batch.y;
        mse += mean_squared_residual(&yhat, batch.y.view());
        orth += crate::model::cross_frobenius_sq(&latent);

        // dL/dŷ for the (1/R)(1/B_r) Σ residual² term
        let scale = 2.0 / (tasks as f64 * batch.len().max(1) as f64);
        let dyhat = resid.mapv(|v| v * scale).insert_axis(Axis(1));
        let head = &model.heads[r];
        let mut grad_s = dyhat.dot(&head.alpha.view().insert_axis(Axis(0)));
        let mut grad_c = dyhat.dot(&head.beta.view().insert_axis(Axis(0)));
        if weights.lambda_o > 0.0 && latent.c_bar.ncols() > 0 {
            let (os, oc) = orthogonality_latent_grad(&latent);
            grad_s.scaled_add(weights.lambda_o, &os);
            grad_c.scaled_add(weights.lambda_o, &oc);
        }

        specific_grads.push(model.specifics[r].backward_from(x, &s_trace, grad_s.view())?);
        if let (Some(net), Some(trace)) = (&model.shared, &c_trace) {
            let g = net.backward_from(x, trace, grad_c.view())?;
            match &mut shared_grad {
                Some(acc) => acc.add_assign(&g),
                None => shared_grad = Some(g),
            }
        }
    }
    mse /= tasks as f64;
    let similarity = crate::model::similarity_penalty(&model.heads, &model.centers, weights)?;
    let breakdown = ObjectiveBreakdown::new(mse, similarity, weights.lambda_o * orth);
    if !breakdown.total.is_finite() {
        return Err(diverged());
    }

    let map_div = |e: Error| match e {
        Error::NonFiniteGradient { .. } => diverged(),
        other => other,
    };
    for (r, (net, grad)) in model.specifics.iter_mut().zip(&specific_grads).enumerate() {
        adam_step_net(net, grad, &mut optim.specifics[r], rate, &format!("specific[{r}]"))
            .map_err(map_div)?;
    }
    if let (Some(net), Some(grad), Some(state)) =
        (&mut model.shared, &shared_grad, &mut optim.shared)
    {
        adam_step_net(net, grad, state, rate, "shared").map_err(map_div)?;
    }
    Ok(breakdown)
}

/// Result of one coefficient-block update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockOutcome {
    /// Block objective (fit + group penalty) before the first and after
    /// every inner step.
    pub inner_objectives: Vec<f64>,
    pub jitter_used: bool,
}

struct BlockProblem<'a> {
    /// Features multiplying the block's heads (`Ĉ_r` or `Ŝ_r`).
    features: Vec<&'a Array2<f64>>,
    /// Prediction contribution of the other block, held fixed.
    offsets: Vec<Array1<f64>>,
    targets: Vec<ArrayView1<'a, f64>>,
    lambdas: &'a [f64],
}

impl BlockProblem<'_> {
    fn tasks(&self) -> usize {
        self.features.len()
    }

    fn residual(&self, r: usize, head: &Array1<f64>) -> Array1<f64> {
        &self.offsets[r] + &self.features[r].dot(head) - self.targets[r]
    }

    fn value(&self, state: &DeviationState) -> f64 {
        let tasks = self.tasks() as f64;
        (0..self.tasks())
            .map(|r| {
                let res = self.residual(r, &state.head(r));
                let n = res.len().max(1) as f64;
                res.dot(&res) / (tasks * n)
                    + self.lambdas[r] * state.deviations[r].dot(&state.deviations[r]).sqrt()
            })
            .sum()
    }

    fn prox_step(&self, state: &mut DeviationState, rate: f64) -> Result<()> {
        let tasks = self.tasks() as f64;
        for r in 0..self.tasks() {
            let res = self.residual(r, &state.head(r));
            let n = res.len().max(1) as f64;
            let grad = self.features[r].t().dot(&res) * (2.0 / (tasks * n));
            let stepped = &state.deviations[r] - &(grad * rate);
            state.deviations[r] = prox_group(stepped.view(), rate * self.lambdas[r])?;
        }
        Ok(())
    }

    /// Exact minimizer of the fit term over the center with deviations fixed.
    fn solve_center(&self, state: &mut DeviationState) -> bool {
        let dim = state.center.len();
        let mut gram = Array2::<f64>::zeros((dim, dim));
        let mut rhs = Array1::<f64>::zeros(dim);
        for r in 0..self.tasks() {
            let f = self.features[r];
            let n = f.nrows().max(1) as f64;
            let target = &self.targets[r] - &self.offsets[r] - &f.dot(&state.deviations[r]);
            gram.scaled_add(1.0 / n, &f.t().dot(f));
            rhs.scaled_add(1.0 / n, &f.t().dot(&target));
        }
        let (center, jitter) = solve_normal_equations(&gram, &rhs);
        state.center = center;
        jitter
    }
}

#[allow(clippy::too_many_arguments)]
fn update_block(
    model: &mut MtlModel,
    block: CoefBlock,
    batches: &[Batch],
    latents: &[LatentBatch],
    other_heads: &[Array1<f64>],
    lambdas: &[f64],
    rate: f64,
    inner_steps: usize,
) -> Result<BlockOutcome> {
    let dim = match block {
        CoefBlock::Alpha => model.q(),
        CoefBlock::Beta => model.p(),
    };
    // a zero rate freezes the block, center included
    if dim == 0 || rate == 0.0 {
        return Ok(BlockOutcome::default());
    }
    let problem = BlockProblem {
        features: latents
            .iter()
            .map(|l| match block {
                CoefBlock::Alpha => &l.s_bar,
                CoefBlock::Beta => &l.c_bar,
            })
            .collect(),
        offsets: latents
            .iter()
            .zip(other_heads)
            .map(|(l, h)| match block {
                CoefBlock::Alpha => l.c_bar.dot(h),
                CoefBlock::Beta => l.s_bar.dot(h),
            })
            .collect(),
        targets: batches.iter().map(|b| b.y.view()).collect(),
        lambdas,
    };
    let mut state = DeviationState::from_model(model, block);
    let mut outcome = BlockOutcome {
        inner_objectives: vec![problem.value(&state)],
        jitter_used: false,
    };
    for _ in 0..inner_steps {
        problem.prox_step(&mut state, rate)?;
        outcome.jitter_used |= problem.solve_center(&mut state);
        outcome.inner_objectives.push(problem.value(&state));
    }
    state.write_back(model, block);
    Ok(outcome)
}

fn encode_all(model: &MtlModel, batches: &[Batch]) -> Result<Vec<LatentBatch>> {
    batches
        .iter()
        .enumerate()
        .map(|(r, b)| model.encode(r, b.x.view()))
        .collect()
}

fn check_batches(model: &MtlModel, batches: &[Batch], weights: &PenaltyWeights) -> Result<()> {
    if batches.len() != model.tasks() {
        return Err(Error::shape("batches per task", model.tasks(), batches.len()));
    }
    weights.validate(model.tasks())
}

/// Step 2: update `{β_r}` and `β̄` with encoders and `α` fixed.
pub fn step2_beta(
    model: &mut MtlModel,
    batches: &[Batch],
    weights: &PenaltyWeights,
    rate: f64,
    inner_steps: usize,
) -> Result<BlockOutcome> {
    check_batches(model, batches, weights)?;
    let latents = encode_all(model, batches)?;
    let alphas: Vec<_> = model.heads.iter().map(|h| h.alpha.clone()).collect();
    update_block(
        model,
        CoefBlock::Beta,
        batches,
        &latents,
        &alphas,
        &weights.lambda_c,
        rate,
        inner_steps.max(1),
    )
}

/// Step 3: update `{α_r}` and `ᾱ` with encoders and `β` fixed.
pub fn step3_alpha(
    model: &mut MtlModel,
    batches: &[Batch],
    weights: &PenaltyWeights,
    rate: f64,
    inner_steps: usize,
) -> Result<BlockOutcome> {
    check_batches(model, batches, weights)?;
    let latents = encode_all(model, batches)?;
    let betas: Vec<_> = model.heads.iter().map(|h| h.beta.clone()).collect();
    update_block(
        model,
        CoefBlock::Alpha,
        batches,
        &latents,
        &betas,
        &weights.lambda_s,
        rate,
        inner_steps.max(1),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rate: f64,
    /// Mean over the epoch's mini-batches of the pre-step objective.
    pub train: ObjectiveBreakdown,
    pub val_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    /// `‖α_r − ᾱ‖` per task for the returned model.
    pub alpha_deviation: Vec<f64>,
    /// `‖β_r − β̄‖` per task for the returned model.
    pub beta_deviation: Vec<f64>,
    /// `‖S̄_rᵀ C̄_r‖_F` on each task's full training set.
    pub orthogonality_full: Vec<f64>,
    pub max_encoder_param: f64,
    pub max_head_norm: f64,
    /// Number of center solves that needed ridge jitter.
    pub jitter_solves: usize,
    pub elapsed_secs: f64,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

// wall-clock time is the only non-reproducible field
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.history == other.history
            && self.best_epoch == other.best_epoch
            && self.best_val_mse.to_bits() == other.best_val_mse.to_bits()
            && self.stopped_early == other.stopped_early
            && self.alpha_deviation == other.alpha_deviation
            && self.beta_deviation == other.beta_deviation
            && self.orthogonality_full == other.orthogonality_full
            && self.max_encoder_param.to_bits() == other.max_encoder_param.to_bits()
            && self.max_head_norm.to_bits() == other.max_head_norm.to_bits()
            && self.jitter_solves == other.jitter_solves
    }
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        self.order.shuffle(rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos >= self.order.len() {
            self.reshuffle(rng);
        }
        let end = (self.pos + size).min(self.order.len());
        let start = self.pos;
        self.pos = end;
        &self.order[start..end]
    }
}

fn gather(data: &Batch, rows: &[usize]) -> Batch {
    Batch {
        x: data.x.select(Axis(0), rows),
        y: data.y.select(Axis(0), rows),
    }
}

/// Unpenalized validation loss: `(1/R) Σ_r MSE_r`.
pub fn validation_mse(model: &MtlModel, sets: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for (r, set) in sets.iter().enumerate() {
        total += model.mse(r, set.x.view(), set.y.view())?;
    }
    Ok(total / sets.len() as f64)
}

fn validate_data(model: &MtlModel, train: &[Batch], val: &[Batch]) -> Result<()> {
    let tasks = model.tasks();
    if train.len() != tasks || val.len() != tasks {
        return Err(Error::shape(
            "datasets per task",
            tasks,
            format!("train {} / val {}", train.len(), val.len()),
        ));
    }
    let d = model.input_dim();
    for set in train.iter().chain(val) {
        if set.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if set.x.ncols() != d {
            return Err(Error::shape("dataset columns", d, set.x.ncols()));
        }
        if set.x.nrows() != set.y.len() {
            return Err(Error::shape("dataset rows", set.x.nrows(), set.y.len()));
        }
    }
    Ok(())
}

/// Runs the full alternating algorithm and returns the parameters from the
/// best validation epoch.
pub fn train(
    mut model: MtlModel,
    train_sets: &[Batch],
    val_sets: &[Batch],
    config: &TrainConfig,
) -> Result<(MtlModel, TrainReport)> {
    let started = Instant::now();
    model.validate()?;
    let tasks = model.tasks();
    config.validate(tasks)?;
    validate_data(&model, train_sets, val_sets)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut cursors: Vec<Cursor> = train_sets
        .iter()
        .map(|s| Cursor {
            order: (0..s.len()).collect(),
            pos: 0,
        })
        .collect();
    let sizes: Vec<usize> = config
        .batch_sizes
        .iter()
        .zip(train_sets)
        .map(|(&b, s)| b.min(s.len()))
        .collect();
    let batches_per_epoch = sizes
        .iter()
        .zip(train_sets)
        .map(|(&b, s)| s.len().div_ceil(b))
        .max()
        .unwrap_or(1);

    let mut optim = EncoderOptimizer::new(&model, config.adam);
    let weights = &config.weights;
    let mut history = Vec::with_capacity(config.epochs.min(4096));
    let mut best: Option<(usize, f64, MtlModel)> = None;
    let mut jitter_solves = 0usize;
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        let rate = config.schedule.rate_at(epoch);
        for c in &mut cursors {
            c.reshuffle(&mut rng);
        }
        let mut sum = ObjectiveBreakdown::default();
        for batch_idx in 0..batches_per_epoch {
            let at = StepPosition {
                epoch,
                batch: batch_idx,
            };
            let batches: Vec<Batch> = cursors
                .iter_mut()
                .zip(train_sets)
                .zip(&sizes)
                .map(|((c, data), &b)| gather(data, c.next(b, &mut rng)))
                .collect();

            let pre = if config.freeze_encoders {
                objective(&model, &batches, weights)?
            } else {
                step1_encoders(&mut model, &batches, weights, rate, &mut optim, at)?
            };
            if !pre.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            sum.mse += pre.mse;
            sum.similarity += pre.similarity;
            sum.orthogonality += pre.orthogonality;

            let latents = encode_all(&model, &batches)?;
            let alphas: Vec<_> = model.heads.iter().map(|h| h.alpha.clone()).collect();
            let stale_betas: Vec<_> = model.heads.iter().map(|h| h.beta.clone()).collect();
            let out2 = update_block(
                &mut model,
                CoefBlock::Beta,
                &batches,
                &latents,
                &alphas,
                &weights.lambda_c,
                rate,
                config.inner_steps,
            )?;
            let betas: Vec<_> = if config.fresh_beta_in_alpha_step {
                model.heads.iter().map(|h| h.beta.clone()).collect()
            } else {
                stale_betas
            };
            let out3 = update_block(
                &mut model,
                CoefBlock::Alpha,
                &batches,
                &latents,
                &betas,
                &weights.lambda_s,
                rate,
                config.inner_steps,
            )?;
            jitter_solves += out2.jitter_used as usize + out3.jitter_used as usize;
            let heads_finite = model
                .heads
                .iter()
                .all(|h| h.alpha.iter().chain(h.beta.iter()).all(|v| v.is_finite()));
            if !heads_finite {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
        }
        let n = batches_per_epoch as f64;
        let train_obj = ObjectiveBreakdown::new(sum.mse / n, sum.similarity / n, sum.orthogonality / n);
        let val_mse = validation_mse(&model, val_sets)?;
        if !val_mse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: batches_per_epoch,
            });
        }
        history.push(EpochRecord {
            epoch,
            rate,
            train: train_obj,
            val_mse,
        });

        let improved = best.as_ref().is_none_or(|(_, v, _)| val_mse < *v);
        if improved {
            best = Some((epoch, val_mse, model.clone()));
        } else if let Some((best_epoch, _, _)) = &best {
            if epoch - best_epoch > config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_mse, best_model) = best.expect("at least one epoch ran");
    let xs: Vec<_> = train_sets.iter().map(|s| s.x.view()).collect();
    let report = TrainReport {
        history,
        best_epoch,
        best_val_mse,
        stopped_early,
        alpha_deviation: best_model
            .heads
            .iter()
            .map(|h| norm(&(&h.alpha - &best_model.centers.alpha_bar)))
            .collect(),
        beta_deviation: best_model
            .heads
            .iter()
            .map(|h| norm(&(&h.beta - &best_model.centers.beta_bar)))
            .collect(),
        orthogonality_full: best_model.orthogonality_norms(&xs)?,
        max_encoder_param: best_model.max_encoder_param(),
        max_head_norm: best_model
            .heads
            .iter()
            .map(|h| (h.alpha.dot(&h.alpha) + h.beta.dot(&h.beta)).sqrt())
            .fold(0.0, f64::max),
        jitter_solves,
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best_model, report))
}

pub(crate) fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, EncoderShape};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_model(seed: u64, tasks: usize, with_shared: bool) -> MtlModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture {
            input_dim: 3,
            tasks,
            specific: EncoderShape { depth: 2, width: 5, out_dim: 2 },
            shared: with_shared.then_some(EncoderShape { depth: 2, width: 4, out_dim: 3 }),
        };
        MtlModel::init(&arch, &mut rng).unwrap()
    }

    fn toy_batches(seed: u64, tasks: usize, n: usize) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..tasks)
            .map(|_| {
                let x = Array2::from_shape_simple_fn((n, 3), || rng.gen_range(-1.5..1.5));
                let y = x.map_axis(Axis(1), |row| row[0] * row[0] - 0.5 * row[1] + 0.3 * row[2]);
                Batch::new(x, y).unwrap()
            })
            .collect()
    }

    fn randomize_heads(model: &mut MtlModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for h in &mut model.heads {
            h.alpha.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
            h.beta.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        }
    }

    #[test]
    fn prox_examples() {
        let v = array![3.0, 4.0];
        assert_eq!(prox_group(v.view(), 0.0).unwrap(), v);
        assert_eq!(prox_group(v.view(), 5.0).unwrap(), array![0.0, 0.0]);
        let p = prox_group(v.view(), 2.5).unwrap();
        assert!((p[0] - 1.5).abs() < 1e-15 && (p[1] - 2.0).abs() < 1e-15);
        assert!(prox_group(v.view(), -1.0).is_err());
        assert_eq!(prox_group(array![0.0, 0.0].view(), 1.0).unwrap(), array![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn prox_is_nonexpansive(
            u in proptest::collection::vec(-10.0..10.0f64, 4),
            v in proptest::collection::vec(-10.0..10.0f64, 4),
            t in 0.0..15.0f64,
        ) {
            let (u, v) = (Array1::from(u), Array1::from(v));
            let pu = prox_group(u.view(), t).unwrap();
            let pv = prox_group(v.view(), t).unwrap();
            prop_assert!(norm(&(&pu - &pv)) <= norm(&(&u - &v)) + 1e-12);
        }

        #[test]
        fn prox_norm_identity(v in proptest::collection::vec(-10.0..10.0f64, 1..8), t in 0.0..20.0f64) {
            let v = Array1::from(v);
            let p = prox_group(v.view(), t).unwrap();
            prop_assert!((norm(&p) - (norm(&v) - t).max(0.0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn step1_stationary_at_zero_residual() {
        let mut model = toy_model(1, 2, true);
        randomize_heads(&mut model, 2);
        let mut batches = toy_batches(3, 2, 6);
        for (r, b) in batches.iter_mut().enumerate() {
            b.y = model.predict(r, b.x.view()).unwrap();
        }
        let before = model.clone();
        let mut optim = EncoderOptimizer::new(&model, AdamHyper::default());
        let w = PenaltyWeights::uniform(2, 1.0, 1.0, 0.0);
        step1_encoders(&mut model, &batches, &w, 0.01, &mut optim, StepPosition::default()).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn orthogonality_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let latent = LatentBatch {
            s_bar: Array2::from_shape_simple_fn((2, 3), || rng.gen_range(-1.0..1.0)),
            c_bar: Array2::from_shape_simple_fn((2, 2), || rng.gen_range(-1.0..1.0)),
        };
        let f = |l: &LatentBatch| crate::model::cross_frobenius_sq(l);
        let (gs, gc) = orthogonality_latent_grad(&latent);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let (mut p, mut m) = (latent.clone(), latent.clone());
                p.s_bar[[i, j]] += h;
                m.s_bar[[i, j]] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - gs[[i, j]]).abs() < 1e-7, "{fd} vs {}", gs[[i, j]]);
            }
            for j in 0..2 {
                let (mut p, mut m) = (latent.clone(), latent.clone());
                p.c_bar[[i, j]] += h;
                m.c_bar[[i, j]] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - gc[[i, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn step1_descends_for_small_rate() {
        let mut model = toy_model(5, 2, true);
        randomize_heads(&mut model, 6);
        let batches = toy_batches(7, 2, 8);
        let w = PenaltyWeights::uniform(2, 0.1, 0.1, 0.05);
        let before = objective(&model, &batches, &w).unwrap().total;
        let mut optim = EncoderOptimizer::new(&model, AdamHyper::default());
        let pre = step1_encoders(&mut model, &batches, &w, 1e-6, &mut optim, StepPosition::default()).unwrap();
        assert_eq!(pre.total, before);
        let after = objective(&model, &batches, &w).unwrap().total;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn step2_noop_without_penalty_and_gradient() {
        let mut model = toy_model(8, 1, true);
        randomize_heads(&mut model, 9);
        let mut batches = toy_batches(10, 1, 12);
        batches[0].y = model.predict(0, batches[0].x.view()).unwrap();
        // center solve reproduces β̄ when the fit is already perfect
        let before = model.clone();
        step2_beta(&mut model, &batches, &PenaltyWeights::zeros(1), 0.1, 1).unwrap();
        for (a, b) in model.heads[0].beta.iter().zip(&before.heads[0].beta) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn step2_large_penalty_collapses_to_center() {
        let mut model = toy_model(11, 3, true);
        randomize_heads(&mut model, 12);
        let batches = toy_batches(13, 3, 10);
        let w = PenaltyWeights::uniform(3, 1e6, 1e6, 0.0);
        for _ in 0..3 {
            step2_beta(&mut model, &batches, &w, 0.01, 1).unwrap();
            step3_alpha(&mut model, &batches, &w, 0.01, 1).unwrap();
        }
        for h in &model.heads {
            assert_eq!(norm(&(&h.beta - &model.centers.beta_bar)), 0.0);
            assert_eq!(norm(&(&h.alpha - &model.centers.alpha_bar)), 0.0);
        }
    }

    /// Least squares via SVD of the design matrix, independent of the
    /// normal-equation path.
    fn ols(x: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
        let xm = crate::linalg::to_dmatrix(x);
        let ym = nalgebra::DVector::from_iterator(y.len(), y.iter().copied());
        let sol = xm.svd(true, true).solve(&ym, 1e-12).unwrap();
        Array1::from_iter(sol.iter().copied())
    }

    #[test]
    fn step2_center_matches_closed_form_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Array2::from_shape_simple_fn((30, 3), || rng.gen_range(-2.0..2.0));
        let y = x.map_axis(Axis(1), |r| 1.5 * r[0] - r[1] + 0.25 * r[2]) + 0.3;
        let y = y + Array1::from_shape_simple_fn(30, || rng.gen_range(-0.1..0.1));
        let mut model = MtlModel::from_encoders(Some(ident3()), vec![ident3()]).unwrap();
        let batches = vec![Batch::new(x.clone(), y.clone()).unwrap()];
        step2_beta(&mut model, &batches, &PenaltyWeights::zeros(1), 0.05, 1).unwrap();
        let expect = ols(&x, &y);
        for (a, b) in model.heads[0].beta.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-8);
        }
        // mirrored roles
        let mut model = MtlModel::from_encoders(Some(ident3()), vec![ident3()]).unwrap();
        step3_alpha(&mut model, &batches, &PenaltyWeights::zeros(1), 0.05, 1).unwrap();
        for (a, b) in model.heads[0].alpha.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    fn ident3() -> crate::nncore::DenseNet {
        crate::nncore::DenseNet::identity(3)
    }

    #[test]
    fn reconstruction_holds_after_block_updates() {
        let mut model = toy_model(30, 2, true);
        randomize_heads(&mut model, 31);
        let batches = toy_batches(32, 2, 9);
        let w = PenaltyWeights::uniform(2, 0.3, 0.2, 0.0);
        step2_beta(&mut model, &batches, &w, 0.05, 3).unwrap();
        step3_alpha(&mut model, &batches, &w, 0.05, 3).unwrap();
        let beta_state = DeviationState::from_model(&model, CoefBlock::Beta);
        for (r, h) in model.heads.iter().enumerate() {
            let diff = &h.beta - &model.centers.beta_bar - &beta_state.deviations[r];
            assert!(diff.iter().all(|v| v.abs() <= 1e-12));
        }
    }

    #[test]
    fn block_objective_monotone_full_batch() {
        let mut model = toy_model(40, 3, true);
        randomize_heads(&mut model, 41);
        let batches = toy_batches(42, 3, 15);
        let w = PenaltyWeights::uniform(3, 0.05, 0.05, 0.0);
        let out = step2_beta(&mut model, &batches, &w, 1e-3, 25).unwrap();
        for pair in out.inner_objectives.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{pair:?}");
        }
        let out = step3_alpha(&mut model, &batches, &w, 1e-3, 25).unwrap();
        for pair in out.inner_objectives.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{pair:?}");
        }
    }

    fn splits(seed: u64, tasks: usize) -> (Vec<Batch>, Vec<Batch>) {
        (toy_batches(seed, tasks, 20), toy_batches(seed + 100, tasks, 10))
    }

    #[test]
    fn zero_rate_single_epoch_is_noop() {
        let model = toy_model(50, 2, true);
        let (tr, va) = splits(51, 2);
        let cfg = TrainConfig::new(2, 1, 4, LrSchedule::new(0.0, 0.95).unwrap());
        let (out, report) = train(model.clone(), &tr, &va, &cfg).unwrap();
        assert_eq!(out, model);
        assert_eq!(report.epochs_run(), 1);
        assert_eq!(report.best_epoch, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let model = toy_model(60, 2, true);
        let (tr, va) = splits(61, 2);
        let mut cfg = TrainConfig::new(2, 15, 6, LrSchedule::new(1e-3, 0.95).unwrap());
        cfg.weights = PenaltyWeights::uniform(2, 0.1, 0.1, 0.01);
        cfg.seed = 3;
        let a = train(model.clone(), &tr, &va, &cfg).unwrap();
        let b = train(model, &tr, &va, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(a.1.best_epoch < a.1.epochs_run());
    }

    #[test]
    fn penalty_free_single_task_objective_is_plain_mse() {
        let model = toy_model(70, 1, true);
        let (tr, va) = splits(71, 1);
        let mut cfg = TrainConfig::new(1, 5, 20, LrSchedule::new(1e-3, 1.0).unwrap());
        cfg.patience = 100;
        let (_, report) = train(model, &tr, &va, &cfg).unwrap();
        for rec in &report.history {
            assert_eq!(rec.train.total, rec.train.mse);
            assert_eq!(rec.train.similarity + rec.train.orthogonality, 0.0);
        }
    }

    #[test]
    fn stale_beta_oscillates_on_identity_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let x = Array2::from_shape_simple_fn((25, 3), || rng.gen_range(-2.0..2.0));
        let y = x.map_axis(Axis(1), |r| r[0] - 2.0 * r[1] + 0.5 * r[2]);
        let set = vec![Batch::new(x.clone(), y.clone()).unwrap()];
        let model = MtlModel::from_encoders(Some(ident3()), vec![ident3()]).unwrap();
        let mut cfg = TrainConfig::new(1, 20, 25, LrSchedule::new(0.01, 1.0).unwrap());
        cfg.freeze_encoders = true;
        cfg.fresh_beta_in_alpha_step = false;
        let (_, stale) = train(model.clone(), &set, &set, &cfg).unwrap();
        cfg.fresh_beta_in_alpha_step = true;
        let (_, fresh) = train(model, &set, &set, &cfg).unwrap();
        assert!(fresh.best_val_mse < 1e-20);
        // both blocks fit the full residual at once, so the sum overshoots
        assert!(stale.history.iter().all(|h| h.val_mse > 1e-3));
    }

    #[test]
    fn early_stopping_respects_patience() {
        let model = toy_model(90, 1, true);
        let (tr, va) = splits(91, 1);
        let mut cfg = TrainConfig::new(1, 500, 5, LrSchedule::new(1e-3, 0.5).unwrap());
        cfg.patience = 3;
        let (_, report) = train(model, &tr, &va, &cfg).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.epochs_run(), report.best_epoch + 5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = toy_model(95, 2, true);
        let (tr, va) = splits(96, 2);
        let cfg = TrainConfig::new(2, 0, 4, LrSchedule::new(1e-3, 0.95).unwrap());
        assert!(matches!(train(model.clone(), &tr, &va, &cfg), Err(Error::InvalidArgument(_))));
        let cfg = TrainConfig::new(2, 1, 4, LrSchedule::new(1e-3, 0.95).unwrap());
        let empty = Batch::new(Array2::zeros((0, 3)), Array1::zeros(0)).unwrap();
        let bad = vec![tr[0].clone(), empty];
        assert!(matches!(train(model, &bad, &va, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let mut model = toy_model(97, 1, true);
        model.heads[0].alpha.fill(1e300);
        let (tr, va) = splits(98, 1);
        let cfg = TrainConfig::new(1, 3, 4, LrSchedule::new(1e-3, 0.95).unwrap());
        match train(model, &tr, &va, &cfg) {
            Err(Error::Diverged { epoch: 0, batch: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
