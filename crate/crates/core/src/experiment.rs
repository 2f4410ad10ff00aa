//! Multi-seed experiment runner: source-only, target self-training,
//! self-training on all unlabeled data, and gradual self-training.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::distributions::{DomainSequence, LabeledPoint};
use crate::error::{Error, Result};
use crate::models::{predict, LinearModel, MarginLossKind, Regularization};
use crate::optimize::{self, LogisticOptions, SolverConfig, TrainSet};
use crate::selftrain::{self, LabelMode, SelfTrainConfig, StepSolver};
use crate::shiftgen::{self, GaussianDriftSpec, MixingSpec, RotationSpec};
use crate::{par, rng};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    GaussianDrift(GaussianDriftSpec),
    Mixing(MixingSpec),
    Rotation(RotationSpec),
    /// A directory written by `gen` (see [`shiftgen::write_sequence_dir`]).
    Import {
        path: PathBuf,
    },
}

impl DatasetSpec {
    pub fn generate(&self) -> Result<DomainSequence> {
        match self {
            DatasetSpec::GaussianDrift(s) => shiftgen::gen_gaussian_drift(s),
            DatasetSpec::Mixing(s) => shiftgen::gen_mixing_from_spec(s),
            DatasetSpec::Rotation(s) => shiftgen::gen_rotation_from_spec(s),
            DatasetSpec::Import { path } => shiftgen::read_sequence_dir(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    TargetSt,
    AllSt,
    GradualSt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::TargetSt => "target_st",
            Method::AllSt => "all_st",
            Method::GradualSt => "gradual_st",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub loss: MarginLossKind,
    pub regularization: Regularization,
    /// Regularization of the supervised source fit; defaults to `regularization`.
    pub source_regularization: Option<Regularization>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            loss: MarginLossKind::Logistic,
            regularization: Regularization::Penalty { lambda: 0.02 },
            source_regularization: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfTrainSettings {
    pub confidence_filter: f64,
    /// Points per gradual step; `None` uses the sequence's own domains.
    pub window: Option<usize>,
    pub epochs: usize,
    /// Epochs of the supervised source fit; defaults to `epochs`.
    pub source_epochs: Option<usize>,
    pub label_mode: LabelMode,
    pub solver: StepSolver,
    /// Rounds for target and all self-training; defaults to the number of
    /// gradual steps.
    pub rounds: Option<usize>,
}

impl Default for SelfTrainSettings {
    fn default() -> Self {
        Self {
            confidence_filter: 0.1,
            window: Some(500),
            epochs: 100,
            source_epochs: None,
            label_mode: LabelMode::Hard,
            solver: StepSolver::MiniBatch(LogisticOptions::default()),
            rounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub method: Method,
    #[serde(default)]
    pub selftrain: SelfTrainSettings,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.selftrain.rounds == Some(0) {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.selftrain.source_epochs == Some(0) {
            return Err(Error::Config("source_epochs must be at least 1".into()));
        }
        self.st_config(0).validate()
    }

    fn st_config(&self, seed: u64) -> SelfTrainConfig {
        let s = &self.selftrain;
        SelfTrainConfig {
            loss: self.model.loss,
            regularization: self.model.regularization,
            confidence_filter: s.confidence_filter,
            window: s.window,
            epochs: s.epochs,
            label_mode: s.label_mode,
            solver: s.solver.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Target accuracy in percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub method: Method,
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    /// Half-width of the 90% Student-t interval; `None` for fewer than two seeds.
    pub ci90_half_width: Option<f64>,
    pub ci_method: String,
    pub config: ExperimentConfig,
    /// Kept out of the serialized report so reports are byte-reproducible.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn csv_summary(&self) -> String {
        let mut s = String::from("method,seed,accuracy\n");
        for r in &self.per_seed {
            s.push_str(&format!("{},{},{}\n", self.method.name(), r.seed, r.accuracy));
        }
        s
    }
}

/// Mean and 90% Student-t half-width with `n - 1` degrees of freedom.
pub fn mean_ci90(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof").inverse_cdf(0.95);
    (mean, Some(t * (var / n as f64).sqrt()))
}

fn train_source(cfg: &ExperimentConfig, points: &[LabeledPoint], seed: u64) -> Result<LinearModel> {
    let xs: Vec<Vec<f64>> = points.iter().map(|p| p.x.clone()).collect();
    let ys: Vec<_> = points.iter().map(|p| p.y).collect();
    let reg = cfg.model.source_regularization.unwrap_or(cfg.model.regularization);
    let epochs = cfg.selftrain.source_epochs.unwrap_or(cfg.selftrain.epochs);
    let step_seed = rng::derive(seed, u64::MAX);
    match (&cfg.selftrain.solver, reg) {
        (StepSolver::MiniBatch(opts), reg) => {
            let lambda = match reg {
                Regularization::Penalty { lambda } => lambda,
                _ => 0.0,
            };
            let opts = LogisticOptions { seed: step_seed, ..*opts };
            optimize::penalized_logistic(&TrainSet::hard(&xs, &ys)?, lambda, epochs, &opts, None)
        }
        (solver, Regularization::Constraint { r }) => {
            let data = crate::distributions::empirical_distribution(points)?;
            match solver {
                StepSolver::Exact { grid, bias_range } => {
                    optimize::erm_exact_1d2d(cfg.model.loss, &data, r, *grid, *bias_range, None)
                }
                StepSolver::Descent(sc) => {
                    let sc = SolverConfig { seed: step_seed, ..sc.clone() };
                    optimize::erm_constrained(cfg.model.loss, &data, r, &sc, None)
                }
                StepSolver::MiniBatch(_) => unreachable!(),
            }
        }
        _ => Err(Error::Config("norm-constrained solvers need a constraint regularization".into())),
    }
}

fn accuracy(model: &LinearModel, eval: &[LabeledPoint]) -> Result<f64> {
    let mut hits = 0usize;
    for p in eval {
        hits += (predict(model, &p.x)? == p.y) as usize;
    }
    Ok(100.0 * hits as f64 / eval.len() as f64)
}

/// Number of gradual steps the sequence gives under `window`.
fn gradual_steps(seq: &DomainSequence, window: Option<usize>) -> Result<usize> {
    match window {
        Some(w) => {
            let n = seq.n_intermediate();
            if w == 0 || !n.is_multiple_of(w) {
                return Err(Error::Config(format!("window {w} does not divide {n} intermediate points")));
            }
            Ok(n / w)
        }
        None => Ok(seq.intermediate_unlabeled.len()),
    }
}

/// Trains the source model and applies `method` for one seed on `seq`.
pub fn run_method(cfg: &ExperimentConfig, seq: &DomainSequence, seed: u64) -> Result<f64> {
    if seq.target_eval.is_empty() {
        return Err(Error::Data { line: None, message: "no target evaluation points".into() });
    }
    let source = train_source(cfg, &seq.source_labeled, seed)?;
    let st = cfg.st_config(seed);
    let rounds = match cfg.selftrain.rounds {
        Some(r) => r,
        None => gradual_steps(seq, cfg.selftrain.window)?,
    };
    let model = match cfg.method {
        Method::SourceOnly => source,
        Method::TargetSt => selftrain::repeated_target_self_train(&source, &seq.target_unlabeled, rounds, &st)?,
        Method::AllSt => selftrain::pooled_self_train(&source, &seq.flat_intermediate(), rounds, &st)?,
        Method::GradualSt => selftrain::gradual_self_train(&source, seq, &st)?.0,
    };
    accuracy(&model, &seq.target_eval)
}

fn seeds_parallel(cfg: &ExperimentConfig, seq: &DomainSequence) -> Result<Vec<SeedResult>> {
    let accs = par::map(&cfg.seeds, |&s| run_method(cfg, seq, s));
    cfg.seeds.iter().zip(accs).map(|(&seed, a)| Ok(SeedResult { seed, accuracy: a? })).collect()
}

fn report(cfg: &ExperimentConfig, per_seed: Vec<SeedResult>, started: Instant) -> ExperimentReport {
    let accs: Vec<f64> = per_seed.iter().map(|r| r.accuracy).collect();
    let (mean, ci) = mean_ci90(&accs);
    ExperimentReport {
        version: VERSION.into(),
        method: cfg.method,
        per_seed,
        mean,
        ci90_half_width: ci,
        ci_method: "student_t_90".into(),
        config: cfg.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    }
}

/// The dataset is generated once from its own seed; each run seed drives
/// training randomness.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    let seq = cfg.dataset.generate()?;
    gradual_steps(&seq, cfg.selftrain.window)?;
    let per_seed = seeds_parallel(cfg, &seq)?;
    Ok(report(cfg, per_seed, started))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoFilter,
    WindowOverride,
    NoReg,
    SoftLabels,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_filter" => Ok(Ablation::NoFilter),
            "window_override" => Ok(Ablation::WindowOverride),
            "no_reg" => Ok(Ablation::NoReg),
            "soft_labels" => Ok(Ablation::SoftLabels),
            _ => Err(Error::Argument(format!("unknown ablation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    /// Ablated minus base accuracy.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub base: ExperimentReport,
    pub ablated: ExperimentReport,
    pub deltas: Vec<SeedDelta>,
    pub mean_delta: f64,
}

/// Base and ablated configurations.
///
/// `no_reg` follows the controlled protocol: both arms start from the same
/// unregularized source model and differ only in self-training.
/// `window_override` halves the window.
pub fn ablation_arms(base: &ExperimentConfig, ablation: Ablation) -> Result<(ExperimentConfig, ExperimentConfig)> {
    let mut b = base.clone();
    let mut a = base.clone();
    match ablation {
        Ablation::NoFilter => a.selftrain.confidence_filter = 0.0,
        Ablation::WindowOverride => {
            let w = base.selftrain.window.ok_or_else(|| Error::Config("window_override needs a window".into()))?;
            if w < 2 {
                return Err(Error::Config("window too small to halve".into()));
            }
            a.selftrain.window = Some(w / 2);
            if b.selftrain.rounds.is_none() && b.method != Method::GradualSt {
                // Keep the baseline's round count tied to its own window.
                a.selftrain.rounds = None;
            }
        }
        Ablation::NoReg => {
            if !matches!(base.model.regularization, Regularization::Penalty { .. }) {
                return Err(Error::Config("no_reg applies to penalized models".into()));
            }
            b.model.source_regularization = Some(Regularization::None);
            a.model.source_regularization = Some(Regularization::None);
            a.model.regularization = Regularization::Penalty { lambda: 0.0 };
        }
        Ablation::SoftLabels => {
            if base.model.loss != MarginLossKind::Logistic {
                return Err(Error::Config("soft labels need the logistic loss".into()));
            }
            a.selftrain.label_mode = LabelMode::Soft;
        }
    }
    a.validate()?;
    b.validate()?;
    Ok((b, a))
}

pub fn run_ablation(base: &ExperimentConfig, ablation: Ablation) -> Result<AblationReport> {
    let (bcfg, acfg) = ablation_arms(base, ablation)?;
    let started = Instant::now();
    let seq = bcfg.dataset.generate()?;
    gradual_steps(&seq, bcfg.selftrain.window)?;
    gradual_steps(&seq, acfg.selftrain.window)?;
    let base_seeds = seeds_parallel(&bcfg, &seq)?;
    let base_report = report(&bcfg, base_seeds, started);
    let started = Instant::now();
    let abl_seeds = seeds_parallel(&acfg, &seq)?;
    let abl_report = report(&acfg, abl_seeds, started);
    let deltas: Vec<SeedDelta> = base_report
        .per_seed
        .iter()
        .zip(&abl_report.per_seed)
        .map(|(b, a)| SeedDelta { seed: b.seed, delta: a.accuracy - b.accuracy })
        .collect();
    let mean_delta = deltas.iter().map(|d| d.delta).sum::<f64>() / deltas.len() as f64;
    Ok(AblationReport { ablation, base: base_report, ablated: abl_report, deltas, mean_delta })
}

/// Reference Gaussian drift benchmark: the default recipe with class means
/// drawn from `N(0, I/d)` on dataset seed 12.
pub fn gaussian_reference_spec() -> GaussianDriftSpec {
    let d = GaussianDriftSpec::default().d;
    GaussianDriftSpec { mean_scale: 1.0 / (d as f64).sqrt(), seed: 12, ..Default::default() }
}

/// The reference Gaussian benchmark with the given method and seeds.
pub fn gaussian_default(method: Method, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::GaussianDrift(gaussian_reference_spec()),
        model: ModelSpec::default(),
        method,
        selftrain: SelfTrainSettings::default(),
        seeds,
    }
}

/// Mixing sequence with well-separated endpoints, one gradual step per
/// mixture domain, otherwise as [`gaussian_default`].
pub fn mixing_default(method: Method, seeds: Vec<u64>) -> ExperimentConfig {
    let mut cfg = gaussian_default(method, seeds);
    cfg.dataset = DatasetSpec::Mixing(MixingSpec::default());
    cfg.selftrain.window = None;
    cfg
}

/// 60 degrees over 12 domains; ramp loss with `||w|| <= 1`, no filtering.
pub fn rotation_default(method: Method, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Rotation(RotationSpec::default()),
        model: ModelSpec {
            loss: MarginLossKind::Ramp,
            regularization: Regularization::Constraint { r: 1.0 },
            source_regularization: None,
        },
        method,
        selftrain: SelfTrainSettings {
            confidence_filter: 0.0,
            window: None,
            solver: StepSolver::Descent(SolverConfig::default()),
            ..Default::default()
        },
        seeds,
    }
}
