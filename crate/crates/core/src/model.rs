//! The dual-encoder regression model and the terms of its penalized
//! training objective.
//!
//! Task `r` predicts `ŷ = α_rᵀ S_r(x) + β_rᵀ C(x)`, where `S_r` is a
//! task-specific encoder and `C` is shared by every task. The heads
//! `(α_r, β_r)` are pulled toward common centers `(ᾱ, β̄)` by unsquared
//! Euclidean-norm penalties, and `‖S̄_rᵀ C̄_r‖_F²` discourages the two latent
//! blocks from encoding the same information.
//!
//! A model without a shared encoder (`shared == None`) has `p = 0`: its
//! `β` heads and `β̄` are empty and every shared latent matrix has zero
//! columns. This is the single-task baseline.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::DenseNet;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
}

impl TaskHead {
    pub fn zeros(q: usize, p: usize) -> Self {
        TaskHead {
            alpha: Array1::zeros(q),
            beta: Array1::zeros(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centers {
    pub alpha_bar: Array1<f64>,
    pub beta_bar: Array1<f64>,
}

impl Centers {
    pub fn zeros(q: usize, p: usize) -> Self {
        Centers {
            alpha_bar: Array1::zeros(q),
            beta_bar: Array1::zeros(p),
        }
    }
}

/// Depth, hidden width and output size of one encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub depth: usize,
    pub width: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub tasks: usize,
    pub specific: EncoderShape,
    /// `None` removes the shared path entirely.
    pub shared: Option<EncoderShape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlModel {
    pub shared: Option<DenseNet>,
    pub specifics: Vec<DenseNet>,
    pub heads: Vec<TaskHead>,
    pub centers: Centers,
}

/// Latent factors of one batch: rows of `S_r(x)` and `C(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub s_bar: Array2<f64>,
    pub c_bar: Array2<f64>,
}

/// Rows of one task used for a loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl Batch {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::shape("batch rows", x.nrows(), y.len()));
        }
        Ok(Batch { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub lambda_s: Vec<f64>,
    pub lambda_c: Vec<f64>,
    pub lambda_o: f64,
}

impl PenaltyWeights {
    /// Same `λ^s` and `λ^c` for all `tasks`.
    pub fn uniform(tasks: usize, lambda_s: f64, lambda_c: f64, lambda_o: f64) -> Self {
        PenaltyWeights {
            lambda_s: vec![lambda_s; tasks],
            lambda_c: vec![lambda_c; tasks],
            lambda_o,
        }
    }

    pub fn zeros(tasks: usize) -> Self {
        Self::uniform(tasks, 0.0, 0.0, 0.0)
    }

    pub fn tasks(&self) -> usize {
        self.lambda_s.len()
    }

    pub fn validate(&self, tasks: usize) -> Result<()> {
        if self.lambda_s.len() != tasks || self.lambda_c.len() != tasks {
            return Err(Error::shape(
                "penalty weights",
                tasks,
                format!("{} / {}", self.lambda_s.len(), self.lambda_c.len()),
            ));
        }
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !self.lambda_s.iter().chain(&self.lambda_c).all(|&v| ok(v)) || !ok(self.lambda_o) {
            return Err(Error::InvalidArgument(
                "penalty weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Training-objective value split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    /// `(1/R) Σ_r` per-task mean squared error.
    pub mse: f64,
    pub similarity: f64,
    pub orthogonality: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    pub fn new(mse: f64, similarity: f64, orthogonality: f64) -> Self {
        ObjectiveBreakdown {
            mse,
            similarity,
            orthogonality,
            total: mse + similarity + orthogonality,
        }
    }
}

impl MtlModel {
    /// Fresh model: He-initialized encoders (shared first, then each
    /// task-specific encoder in task order), zero heads and centers.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.tasks == 0 {
            return Err(Error::InvalidArgument("at least one task is required".into()));
        }
        let shared = arch
            .shared
            .map(|s| DenseNet::init(arch.input_dim, s.depth, s.width, s.out_dim, rng))
            .transpose()?;
        let specifics = (0..arch.tasks)
            .map(|_| {
                DenseNet::init(
                    arch.input_dim,
                    arch.specific.depth,
                    arch.specific.width,
                    arch.specific.out_dim,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let q = arch.specific.out_dim;
        let p = arch.shared.map_or(0, |s| s.out_dim);
        Ok(MtlModel {
            shared,
            specifics,
            heads: vec![TaskHead::zeros(q, p); arch.tasks],
            centers: Centers::zeros(q, p),
        })
    }

    /// Assembles a model from parts, zero heads and centers.
    pub fn from_encoders(shared: Option<DenseNet>, specifics: Vec<DenseNet>) -> Result<Self> {
        let q = specifics.first().map_or(0, DenseNet::out_dim);
        let p = shared.as_ref().map_or(0, DenseNet::out_dim);
        let tasks = specifics.len();
        let model = MtlModel {
            shared,
            specifics,
            heads: vec![TaskHead::zeros(q, p); tasks],
            centers: Centers::zeros(q, p),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn tasks(&self) -> usize {
        self.specifics.len()
    }

    pub fn input_dim(&self) -> usize {
        self.specifics[0].in_dim()
    }

    /// Task-specific latent dimension.
    pub fn q(&self) -> usize {
        self.specifics[0].out_dim()
    }

    /// Shared latent dimension, 0 without a shared encoder.
    pub fn p(&self) -> usize {
        self.shared.as_ref().map_or(0, DenseNet::out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let tasks = self.specifics.len();
        if tasks == 0 {
            return Err(Error::InvalidArgument("model has no tasks".into()));
        }
        if self.heads.len() != tasks {
            return Err(Error::shape("model heads", tasks, self.heads.len()));
        }
        let d = self.specifics[0].in_dim();
        let q = self.q();
        let p = self.p();
        let first_dims = self.specifics[0].dims();
        for net in &self.specifics {
            if net.dims() != first_dims {
                return Err(Error::shape(
                    "task-specific encoder architecture",
                    format!("{first_dims:?}"),
                    format!("{:?}", net.dims()),
                ));
            }
        }
        if let Some(shared) = &self.shared {
            if shared.in_dim() != d {
                return Err(Error::shape("shared encoder input", d, shared.in_dim()));
            }
        }
        for head in &self.heads {
            if head.alpha.len() != q || head.beta.len() != p {
                return Err(Error::shape(
                    "task head",
                    format!("({q}, {p})"),
                    format!("({}, {})", head.alpha.len(), head.beta.len()),
                ));
            }
        }
        if self.centers.alpha_bar.len() != q || self.centers.beta_bar.len() != p {
            return Err(Error::shape(
                "centers",
                format!("({q}, {p})"),
                format!(
                    "({}, {})",
                    self.centers.alpha_bar.len(),
                    self.centers.beta_bar.len()
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_task(&self, r: usize) -> Result<()> {
        if r >= self.tasks() {
            return Err(Error::TaskIndex {
                index: r,
                tasks: self.tasks(),
            });
        }
        Ok(())
    }

    /// Latent factors `S_r(X)` and `C(X)`.
    pub fn encode(&self, r: usize, x: ArrayView2<f64>) -> Result<LatentBatch> {
        self.check_task(r)?;
        let s_bar = self.specifics[r].forward(x)?;
        let c_bar = match &self.shared {
            Some(net) => net.forward(x)?,
            None => Array2::zeros((x.nrows(), 0)),
        };
        Ok(LatentBatch { s_bar, c_bar })
    }

    pub fn predict(&self, r: usize, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let latent = self.encode(r, x)?;
        Ok(self.predict_from_latent(r, &latent))
    }

    /// Applies task `r`'s head to precomputed latent factors.
    pub fn predict_from_latent(&self, r: usize, latent: &LatentBatch) -> Array1<f64> {
        let head = &self.heads[r];
        latent.s_bar.dot(&head.alpha) + latent.c_bar.dot(&head.beta)
    }

    /// Unpenalized mean squared error of task `r` on `(x, y)`.
    pub fn mse(&self, r: usize, x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<f64> {
        mse_term(self, r, x, y)
    }

    /// `‖S̄_rᵀ C̄_r‖_F` for each task evaluated on the given inputs.
    pub fn orthogonality_norms(&self, xs: &[ArrayView2<f64>]) -> Result<Vec<f64>> {
        xs.iter()
            .enumerate()
            .map(|(r, x)| {
                let latent = self.encode(r, *x)?;
                Ok(cross_frobenius_sq(&latent).sqrt())
            })
            .collect()
    }

    /// Largest absolute parameter over every encoder.
    pub fn max_encoder_param(&self) -> f64 {
        self.specifics
            .iter()
            .chain(self.shared.iter())
            .map(DenseNet::max_abs_param)
            .fold(0.0, f64::max)
    }
}

pub fn predict(model: &MtlModel, r: usize, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    model.predict(r, x)
}

pub fn mse_term(model: &MtlModel, r: usize, x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if x.nrows() != y.len() {
        return Err(Error::shape("response length", x.nrows(), y.len()));
    }
    let yhat = model.predict(r, x)?;
    Ok(mean_squared_residual(&yhat, y))
}

pub(crate) fn mean_squared_residual(yhat: &Array1<f64>, y: ArrayView1<f64>) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let ss: f64 = yhat.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum();
    ss / y.len() as f64
}

/// `Σ_r (λ^s_r ‖α_r − ᾱ‖ + λ^c_r ‖β_r − β̄‖)` with unsquared norms.
pub fn similarity_penalty(
    heads: &[TaskHead],
    centers: &Centers,
    weights: &PenaltyWeights,
) -> Result<f64> {
    weights.validate(heads.len())?;
    let mut total = 0.0;
    for (r, head) in heads.iter().enumerate() {
        if head.alpha.len() != centers.alpha_bar.len() || head.beta.len() != centers.beta_bar.len() {
            return Err(Error::shape(
                "head vs center",
                format!("({}, {})", centers.alpha_bar.len(), centers.beta_bar.len()),
                format!("({}, {})", head.alpha.len(), head.beta.len()),
            ));
        }
        total += weights.lambda_s[r] * dist(&head.alpha, &centers.alpha_bar)
            + weights.lambda_c[r] * dist(&head.beta, &centers.beta_bar);
    }
    Ok(total)
}

fn dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn cross_frobenius_sq(latent: &LatentBatch) -> f64 {
    let m = latent.s_bar.t().dot(&latent.c_bar);
    m.iter().map(|v| v * v).sum()
}

/// `Σ_r λ^o ‖S̄_rᵀ C̄_r‖_F²` over the supplied latent batches.
pub fn orthogonality_penalty(latents: &[LatentBatch], lambda_o: f64) -> Result<f64> {
    let mut total = 0.0;
    for latent in latents {
        if latent.s_bar.nrows() != latent.c_bar.nrows() {
            return Err(Error::shape(
                "latent batch rows",
                latent.s_bar.nrows(),
                latent.c_bar.nrows(),
            ));
        }
        total += cross_frobenius_sq(latent);
    }
    Ok(lambda_o * total)
}

/// Penalized objective on one batch per task.
pub fn objective(
    model: &MtlModel,
    batches: &[Batch],
    weights: &PenaltyWeights,
) -> Result<ObjectiveBreakdown> {
    if batches.len() != model.tasks() {
        return Err(Error::shape("batches per task", model.tasks(), batches.len()));
    }
    let mut mse = 0.0;
    let mut latents = Vec::with_capacity(batches.len());
    for (r, batch) in batches.iter().enumerate() {
        let latent = model.encode(r, batch.x.view())?;
        let yhat = model.predict_from_latent(r, &latent);
        mse += mean_squared_residual(&yhat, batch.y.view());
        latents.push(latent);
    }
    mse /= model.tasks() as f64;
    let similarity = similarity_penalty(&model.heads, &model.centers, weights)?;
    let orthogonality = orthogonality_penalty(&latents, weights.lambda_o)?;
    Ok(ObjectiveBreakdown::new(mse, similarity, orthogonality))
}
