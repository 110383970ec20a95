//! Synthetic latent-factor studies.
//!
//! For every task `r`:
//!
//! ```text
//! F_r = F · V_r
//! X_r = F_r · B + E_r
//! y_r = (F_r ⊙ F_r)(γ_c + γ_r) / d + ε_r     (or F_r(γ_c + γ_r)/d when linear)
//! ```
//!
//! `F` has iid standard-normal entries and `max_r 3n_r` rows; task `r` uses
//! its first `3n_r` rows. The first `d_c` columns of every `V_r` come from
//! one shared SVD draw, the remaining `d − d_c` from a per-task draw. `B` is
//! the orthogonal factor of a QR decomposition and is common to all tasks.
//! Rows are split in order into equal train/validation/test thirds.
//!
//! # Random streams
//!
//! Every random block is drawn from its own ChaCha8 stream seeded with
//! `config.seed`, so adding tasks never perturbs earlier draws:
//!
//! | block | stream |
//! |-------|--------|
//! | `F` | 1 |
//! | shared `V` columns | 2 |
//! | `B` | 3 |
//! | `γ_c` | 4 |
//! | task `V` columns | `1000 + r` |
//! | `E_r` | `2000 + r` |
//! | `γ_r` | `3000 + r` |
//! | `ε_r` | `4000 + r` |

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{from_dmatrix, to_dmatrix};
use crate::model::Batch;

pub const STREAM_F: u64 = 1;
pub const STREAM_V_SHARED: u64 = 2;
pub const STREAM_B: u64 = 3;
pub const STREAM_GAMMA_C: u64 = 4;
pub const STREAM_V_TASK: u64 = 1000;
pub const STREAM_E: u64 = 2000;
pub const STREAM_GAMMA_R: u64 = 3000;
pub const STREAM_EPS: u64 = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub tasks: usize,
    /// Rows per split for each task; `3·n_r` rows are generated.
    pub n: Vec<usize>,
    pub d: usize,
    pub d_c: usize,
    pub sigma_e: f64,
    pub sigma_c: f64,
    pub sigma_r: Vec<f64>,
    pub linear: bool,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            tasks: 2,
            n: vec![200; 2],
            d: 20,
            d_c: 10,
            sigma_e: 0.05,
            sigma_c: 10.0,
            sigma_r: vec![1.0; 2],
            linear: false,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::InvalidArgument("at least one task is required".into()));
        }
        if self.n.len() != self.tasks || self.sigma_r.len() != self.tasks {
            return Err(Error::InvalidArgument(format!(
                "n and sigma_r need one entry per task ({}), got {} and {}",
                self.tasks,
                self.n.len(),
                self.sigma_r.len()
            )));
        }
        if self.d == 0 {
            return Err(Error::InvalidArgument("latent dimension d must be positive".into()));
        }
        if self.d_c > self.d {
            return Err(Error::InvalidArgument(format!(
                "shared columns d_c = {} exceed d = {}",
                self.d_c, self.d
            )));
        }
        if self.n.contains(&0) {
            return Err(Error::InvalidArgument("every task needs n_r ≥ 1".into()));
        }
        let ok = |s: f64| s >= 0.0 && s.is_finite();
        if !ok(self.sigma_e) || !ok(self.sigma_c) || !self.sigma_r.iter().all(|&s| ok(s)) {
            return Err(Error::InvalidArgument(
                "standard deviations must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: usize,
    pub role: Split,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn to_batch(&self) -> Batch {
        Batch {
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }
}

/// The three splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub val: TaskDataset,
    pub test: TaskDataset,
}

impl TaskSplits {
    pub fn get(&self, split: Split) -> &TaskDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Realized random factors, kept for diagnostics and oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFactors {
    pub f: Array2<f64>,
    pub v: Vec<Array2<f64>>,
    pub b: Array2<f64>,
    pub gamma_c: Array1<f64>,
    pub gamma_r: Vec<Array1<f64>>,
    pub noise_x: Vec<Array2<f64>>,
    pub noise_y: Vec<Array1<f64>>,
}

impl StudyFactors {
    /// `F_r = F[..3n_r] · V_r`.
    pub fn latent(&self, r: usize, rows: usize) -> Array2<f64> {
        self.f.slice(s![..rows, ..]).dot(&self.v[r])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStudy {
    pub config: DgpConfig,
    pub tasks: Vec<TaskSplits>,
    pub factors: StudyFactors,
}

impl GeneratedStudy {
    pub fn split(&self, split: Split) -> Vec<&TaskDataset> {
        self.tasks.iter().map(|t| t.get(split)).collect()
    }

    pub fn batches(&self, split: Split) -> Vec<Batch> {
        self.tasks.iter().map(|t| t.get(split).to_batch()).collect()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

fn gaussian_vec(len: usize, std: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Leading `k` right-singular vectors (as columns) of a `d × d` Gaussian draw.
fn svd_v_columns(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = to_dmatrix(&gaussian(d, d, 1.0, rng));
    let svd = g.svd(false, true);
    let v = svd.v_t.expect("requested V").transpose();
    from_dmatrix(&v).slice(s![.., ..k]).to_owned()
}

fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g: DMatrix<f64> = to_dmatrix(&gaussian(d, d, 1.0, rng));
    from_dmatrix(&g.qr().q())
}

/// Response from latent factors: `(F_r ⊙ F_r)γ/d + ε` or `F_r γ/d + ε`.
pub fn response(latent: &Array2<f64>, gamma: &Array1<f64>, noise: &Array1<f64>, linear: bool) -> Array1<f64> {
    let d = latent.ncols() as f64;
    let signal = if linear {
        latent.dot(gamma)
    } else {
        latent.mapv(|v| v * v).dot(gamma)
    };
    signal / d + noise
}

pub fn generate(config: &DgpConfig) -> Result<GeneratedStudy> {
    config.validate()?;
    let DgpConfig { d, d_c, seed, .. } = *config;
    let rows_max = config.n.iter().map(|n| 3 * n).max().unwrap_or(0);

    let f = gaussian(rows_max, d, 1.0, &mut stream_rng(seed, STREAM_F));
    let shared_cols = svd_v_columns(d, d_c, &mut stream_rng(seed, STREAM_V_SHARED));
    let b = orthogonal(d, &mut stream_rng(seed, STREAM_B));
    let gamma_c = gaussian_vec(d, config.sigma_c, &mut stream_rng(seed, STREAM_GAMMA_C));

    let mut factors = StudyFactors {
        f,
        v: Vec::with_capacity(config.tasks),
        b,
        gamma_c,
        gamma_r: Vec::with_capacity(config.tasks),
        noise_x: Vec::with_capacity(config.tasks),
        noise_y: Vec::with_capacity(config.tasks),
    };
    let mut tasks = Vec::with_capacity(config.tasks);
    for r in 0..config.tasks {
        let r64 = r as u64;
        let rows = 3 * config.n[r];
        let own = svd_v_columns(d, d - d_c, &mut stream_rng(seed, STREAM_V_TASK + r64));
        let v = ndarray::concatenate(Axis(1), &[shared_cols.view(), own.view()])
            .expect("column blocks share d rows");
        factors.v.push(v);

        let noise_x = gaussian(rows, d, config.sigma_e, &mut stream_rng(seed, STREAM_E + r64));
        let gamma_r = gaussian_vec(d, config.sigma_r[r], &mut stream_rng(seed, STREAM_GAMMA_R + r64));
        let noise_y = gaussian_vec(rows, config.sigma_e, &mut stream_rng(seed, STREAM_EPS + r64));

        let latent = factors.latent(r, rows);
        let x = latent.dot(&factors.b) + &noise_x;
        let gamma = &factors.gamma_c + &gamma_r;
        let y = response(&latent, &gamma, &noise_y, config.linear);

        let n = config.n[r];
        let part = |k: usize, role: Split| TaskDataset {
            task: r,
            role,
            x: x.slice(s![k * n..(k + 1) * n, ..]).to_owned(),
            y: y.slice(s![k * n..(k + 1) * n]).to_owned(),
        };
        tasks.push(TaskSplits {
            train: part(0, Split::Train),
            val: part(1, Split::Val),
            test: part(2, Split::Test),
        });
        factors.gamma_r.push(gamma_r);
        factors.noise_x.push(noise_x);
        factors.noise_y.push(noise_y);
    }
    Ok(GeneratedStudy {
        config: config.clone(),
        tasks,
        factors,
    })
}

/// Named simulation designs. Serialized by their id (`"1"`, `"linear"`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    /// Distribution heterogeneity only.
    S1,
    /// Posterior heterogeneity only.
    S2,
    /// Both kinds of heterogeneity.
    S3,
    /// Three tasks, equal sample sizes.
    S4,
    /// Three tasks, unbalanced sample sizes.
    S5,
    /// Three tasks, one with stronger posterior heterogeneity.
    S6,
    FourTasks,
    FiveTasks,
    Linear,
}

impl Setting {
    pub const ALL: [Setting; 9] = [
        Setting::S1,
        Setting::S2,
        Setting::S3,
        Setting::S4,
        Setting::S5,
        Setting::S6,
        Setting::FourTasks,
        Setting::FiveTasks,
        Setting::Linear,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Setting::S1 => "1",
            Setting::S2 => "2",
            Setting::S3 => "3",
            Setting::S4 => "4",
            Setting::S5 => "5",
            Setting::S6 => "6",
            Setting::FourTasks => "4tasks",
            Setting::FiveTasks => "5tasks",
            Setting::Linear => "linear",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|setting| setting.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown setting `{s}`")))
    }
}

impl Serialize for Setting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for Setting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Knobs each setting varies. `None` keeps the setting's default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingOverrides {
    pub d_c: Option<usize>,
    pub sigma_bar: Option<f64>,
    /// Per-task sample size (Setting 4 sweeps 200/400/600).
    pub n: Option<usize>,
    pub seed: Option<u64>,
}

/// Resolves a named setting to a generator configuration.
pub fn make_setting(setting: Setting, overrides: &SettingOverrides) -> Result<DgpConfig> {
    let base = DgpConfig::default();
    let sigma_bar = overrides.sigma_bar.unwrap_or(1.0);
    let n = overrides.n.unwrap_or(200);
    let with_tasks = |tasks: usize| DgpConfig {
        tasks,
        n: vec![n; tasks],
        sigma_r: vec![sigma_bar; tasks],
        ..base.clone()
    };
    let mut config = match setting {
        Setting::S1 => DgpConfig {
            d_c: overrides.d_c.unwrap_or(10),
            sigma_r: vec![0.0; 2],
            ..with_tasks(2)
        },
        Setting::S2 => DgpConfig {
            d_c: base.d,
            ..with_tasks(2)
        },
        Setting::S3 => DgpConfig {
            d_c: 10,
            ..with_tasks(2)
        },
        Setting::S4 => with_tasks(3),
        Setting::S5 => DgpConfig {
            n: vec![n, n, 2 * n],
            ..with_tasks(3)
        },
        Setting::S6 => DgpConfig {
            sigma_r: vec![sigma_bar, sigma_bar, 5.0],
            ..with_tasks(3)
        },
        Setting::FourTasks => with_tasks(4),
        Setting::FiveTasks => with_tasks(5),
        Setting::Linear => DgpConfig {
            tasks: 3,
            n: vec![overrides.n.unwrap_or(50); 3],
            d: 40,
            d_c: overrides.d_c.unwrap_or(20),
            sigma_r: vec![sigma_bar; 3],
            linear: true,
            ..base.clone()
        },
    };
    // d_c is fixed by the design in settings 2 and 3
    if matches!(setting, Setting::S4 | Setting::S5 | Setting::S6 | Setting::FourTasks | Setting::FiveTasks) {
        if let Some(d_c) = overrides.d_c {
            config.d_c = d_c;
        }
    }
    if matches!(setting, Setting::S1) && overrides.sigma_bar.is_some() {
        return Err(Error::InvalidArgument(
            "setting 1 fixes sigma_bar = 0".into(),
        ));
    }
    if matches!(setting, Setting::S2 | Setting::S3) && overrides.d_c.is_some() {
        return Err(Error::InvalidArgument(format!(
            "setting {setting} fixes d_c"
        )));
    }
    config.seed = overrides.seed.unwrap_or(0);
    config.validate()?;
    Ok(config)
}
