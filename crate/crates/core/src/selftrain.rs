//! Pseudolabeling and the self-training operators: a single step, repeated
//! steps on the target, steps on a pooled set, and gradual self-training over
//! a sequence of windows.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::distributions::{DiscreteDistribution, DomainSequence, Label, LabeledPoint, WeightedCloud};
use crate::error::{arg, Error, Result};
use crate::models::{self, sigmoid, LinearModel, MarginLossKind, Regularization};
use crate::optimize::{self, LogisticOptions, SolverConfig, TrainSet};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Hard,
    Soft,
}

/// How each step minimizes its training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSolver {
    /// Global minimizer for d <= 2 (see [`optimize::erm_exact_1d2d`]).
    Exact { grid: usize, bias_range: (f64, f64) },
    /// [`optimize::erm_constrained`].
    Descent(SolverConfig),
    /// Mini-batch logistic regression for `epochs` epochs.
    MiniBatch(LogisticOptions),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub loss: MarginLossKind,
    pub regularization: Regularization,
    /// Fraction of least-confident pseudolabels dropped each step.
    pub confidence_filter: f64,
    /// Points per step when windowing a flat pool; `None` uses the
    /// sequence's own domains.
    pub window: Option<usize>,
    pub epochs: usize,
    pub label_mode: LabelMode,
    pub solver: StepSolver,
    pub seed: u64,
}

impl SelfTrainConfig {
    /// Ramp loss, `||w|| <= r`, exact solver, no filtering.
    pub fn exact_ramp(r: f64) -> Self {
        Self {
            loss: MarginLossKind::Ramp,
            regularization: Regularization::Constraint { r },
            confidence_filter: 0.0,
            window: None,
            epochs: 1,
            label_mode: LabelMode::Hard,
            solver: StepSolver::Exact { grid: 720, bias_range: (-12.0, 12.0) },
            seed: 0,
        }
    }

    /// Penalized logistic regression trained with mini-batches.
    pub fn logistic(lambda: f64, epochs: usize, alpha: f64, window: Option<usize>, seed: u64) -> Self {
        Self {
            loss: MarginLossKind::Logistic,
            regularization: Regularization::Penalty { lambda },
            confidence_filter: alpha,
            window,
            epochs,
            label_mode: LabelMode::Hard,
            solver: StepSolver::MiniBatch(LogisticOptions::default()),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.confidence_filter) {
            return Err(Error::Config(format!("confidence filter must lie in [0, 1), got {}", self.confidence_filter)));
        }
        if self.window == Some(0) {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        match (&self.solver, self.regularization) {
            (StepSolver::Exact { .. } | StepSolver::Descent(_), Regularization::Constraint { .. }) => {}
            (StepSolver::MiniBatch(_), _) if self.loss == MarginLossKind::Logistic => {
                if matches!(self.regularization, Regularization::Constraint { .. }) {
                    return Err(Error::Config("mini-batch training takes a penalty, not a constraint".into()));
                }
            }
            (StepSolver::MiniBatch(_), _) => {
                return Err(Error::Config("mini-batch training is only defined for the logistic loss".into()))
            }
            _ => return Err(Error::Config("norm-constrained solvers need a constraint regularization".into())),
        }
        if self.label_mode == LabelMode::Soft && !matches!(self.solver, StepSolver::MiniBatch(_)) {
            return Err(Error::Config("soft labels are trained with the mini-batch logistic solver".into()));
        }
        Ok(())
    }
}

/// A point with its pseudolabel and the teacher's confidence `|score|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pseudolabeled {
    pub x: Vec<f64>,
    pub label: Label,
    pub confidence: f64,
}

pub fn pseudolabel(model: &LinearModel, xs: &[Vec<f64>]) -> Result<Vec<Pseudolabeled>> {
    xs.iter()
        .map(|x| {
            let s = models::score(model, x)?;
            Ok(Pseudolabeled { x: x.clone(), label: Label::from_score(s), confidence: s.abs() })
        })
        .collect()
}

/// Indices surviving the filter, in original order. Drops the `floor(alpha n)`
/// lowest confidences; among equal confidences the earlier entries go first.
fn kept_indices(conf: &[f64], alpha: f64) -> Vec<usize> {
    let n = conf.len();
    let drop = (alpha * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
    let mut keep = vec![true; n];
    for &i in &order[..drop.min(n)] {
        keep[i] = false;
    }
    (0..n).filter(|&i| keep[i]).collect()
}

pub fn filter_low_confidence(labeled: &[Pseudolabeled], alpha: f64) -> Vec<Pseudolabeled> {
    let conf: Vec<f64> = labeled.iter().map(|p| p.confidence).collect();
    kept_indices(&conf, alpha).into_iter().map(|i| labeled[i].clone()).collect()
}

/// One record per self-training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub objective: f64,
    pub n_filtered: usize,
    pub agreement: Option<f64>,
    pub model_ref: String,
    #[serde(skip)]
    pub model: Option<LinearModel>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct STTrace {
    pub steps: Vec<StepRecord>,
}

impl STTrace {
    fn push(&mut self, rec: StepRecord) {
        debug_assert!(self.steps.last().is_none_or(|l| l.t < rec.t));
        self.steps.push(rec);
    }

    /// One JSON object per line: `{t, objective, n_filtered, agreement, model_ref}`.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn final_model(&self) -> Option<&LinearModel> {
        self.steps.last().and_then(|s| s.model.as_ref())
    }
}

/// Self-training on a weighted point set: pseudolabel, filter, retrain.
/// `truth` (aligned with `cloud.points`) only feeds the agreement diagnostic.
pub fn self_train_weighted(
    model: &LinearModel,
    cloud: &WeightedCloud,
    cfg: &SelfTrainConfig,
    t: usize,
    truth: Option<&[Label]>,
) -> Result<(LinearModel, StepRecord)> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::Step("no unlabeled examples".into()));
    }
    let labeled = pseudolabel(model, &cloud.points)?;
    let agreement = truth.map(|ys| {
        let hits = labeled.iter().zip(ys).filter(|(p, y)| p.label == **y).count();
        hits as f64 / labeled.len() as f64
    });
    let conf: Vec<f64> = labeled.iter().map(|p| p.confidence).collect();
    let keep = kept_indices(&conf, cfg.confidence_filter);
    if keep.is_empty() {
        return Err(Error::Step("every example was filtered out".into()));
    }
    let n_filtered = labeled.len() - keep.len();
    let step_seed = rng::derive(cfg.seed, t as u64);

    let (next, objective) = match (&cfg.solver, cfg.label_mode) {
        (StepSolver::MiniBatch(opts), mode) => {
            let xs: Vec<Vec<f64>> = keep.iter().map(|&i| labeled[i].x.clone()).collect();
            let targets: Vec<f64> = keep
                .iter()
                .map(|&i| match mode {
                    LabelMode::Hard => (labeled[i].label == Label::Pos) as u8 as f64,
                    LabelMode::Soft => sigmoid(model.score_unchecked(&labeled[i].x)),
                })
                .collect();
            let ts = TrainSet::soft(&xs, targets)?;
            let lambda = match cfg.regularization {
                Regularization::Penalty { lambda } => lambda,
                _ => 0.0,
            };
            let opts = LogisticOptions { seed: step_seed, ..*opts };
            let m = optimize::penalized_logistic(&ts, lambda, cfg.epochs, &opts, Some(model))?;
            let obj = optimize::logistic_objective(&ts, &m, lambda);
            (m, obj)
        }
        (solver, _) => {
            let r = cfg.regularization.norm_budget().expect("validated");
            let pairs =
                keep.iter().map(|&i| (LabeledPoint::new(labeled[i].x.clone(), labeled[i].label), cloud.masses[i]));
            let data = DiscreteDistribution::normalized(pairs)?;
            let m = match solver {
                StepSolver::Exact { grid, bias_range } => {
                    optimize::erm_exact_1d2d(cfg.loss, &data, r, *grid, *bias_range, Some(model))?
                }
                StepSolver::Descent(sc) => {
                    let sc = SolverConfig { seed: step_seed, ..sc.clone() };
                    optimize::erm_constrained(cfg.loss, &data, r, &sc, Some(model))?
                }
                StepSolver::MiniBatch(_) => unreachable!(),
            };
            let obj = models::population_loss(cfg.loss, &m, &data)?;
            (m, obj)
        }
    };
    let rec = StepRecord {
        t,
        objective,
        n_filtered,
        agreement,
        model_ref: format!("step-{t:04}"),
        model: Some(next.clone()),
    };
    Ok((next, rec))
}

/// One self-training step on an unlabeled sample (uniform weights).
pub fn self_train_step(model: &LinearModel, xs: &[Vec<f64>], cfg: &SelfTrainConfig) -> Result<LinearModel> {
    Ok(step_on_sample(model, xs, cfg, 0, None)?.0)
}

fn step_on_sample(
    model: &LinearModel,
    xs: &[Vec<f64>],
    cfg: &SelfTrainConfig,
    t: usize,
    truth: Option<&[Label]>,
) -> Result<(LinearModel, StepRecord)> {
    if xs.is_empty() {
        return Err(Error::Step("no unlabeled examples".into()));
    }
    // Keep one entry per sample point so filtering counts examples, not atoms.
    let w = 1.0 / xs.len() as f64;
    let cloud = WeightedCloud { points: xs.to_vec(), masses: vec![w; xs.len()] };
    self_train_weighted(model, &cloud, cfg, t, truth)
}

/// Applies a step on each window (or each domain) in temporal order.
pub fn gradual_self_train(
    model: &LinearModel,
    sequence: &DomainSequence,
    cfg: &SelfTrainConfig,
) -> Result<(LinearModel, STTrace)> {
    cfg.validate()?;
    let truth_flat: Option<Vec<Label>> =
        sequence.intermediate_truth.as_ref().map(|t| t.iter().flatten().copied().collect());
    let (windows, truths): (Vec<Vec<Vec<f64>>>, Vec<Option<Vec<Label>>>) = match cfg.window {
        Some(w) => {
            let flat = sequence.flat_intermediate();
            if !flat.len().is_multiple_of(w) {
                return Err(Error::Config(format!("window {w} does not divide {} intermediate points", flat.len())));
            }
            let wins: Vec<Vec<Vec<f64>>> = flat.chunks(w).map(<[Vec<f64>]>::to_vec).collect();
            let tr = match &truth_flat {
                Some(t) => t.chunks(w).map(|c| Some(c.to_vec())).collect(),
                None => vec![None; wins.len()],
            };
            (wins, tr)
        }
        None => {
            let wins = sequence.intermediate_unlabeled.clone();
            let tr = match &sequence.intermediate_truth {
                Some(t) => t.iter().map(|c| Some(c.clone())).collect(),
                None => vec![None; wins.len()],
            };
            (wins, tr)
        }
    };
    let mut cur = model.clone();
    let mut trace = STTrace::default();
    for (t, (xs, truth)) in windows.iter().zip(&truths).enumerate() {
        let (next, rec) = step_on_sample(&cur, xs, cfg, t + 1, truth.as_deref())?;
        trace.push(rec);
        cur = next;
    }
    Ok((cur, trace))
}

/// Gradual self-training over explicit weighted domains (no windowing).
pub fn gradual_self_train_weighted(
    model: &LinearModel,
    domains: &[WeightedCloud],
    cfg: &SelfTrainConfig,
) -> Result<(LinearModel, STTrace)> {
    let mut cur = model.clone();
    let mut trace = STTrace::default();
    for (t, d) in domains.iter().enumerate() {
        let (next, rec) = self_train_weighted(&cur, d, cfg, t + 1, None)?;
        trace.push(rec);
        cur = next;
    }
    Ok((cur, trace))
}

/// `rounds` steps on the same pool; pseudolabels and the confidence filter
/// are recomputed every round.
pub fn repeated_target_self_train(
    model: &LinearModel,
    target_xs: &[Vec<f64>],
    rounds: usize,
    cfg: &SelfTrainConfig,
) -> Result<LinearModel> {
    Ok(repeated_traced(model, target_xs, rounds, cfg)?.0)
}

pub fn repeated_traced(
    model: &LinearModel,
    xs: &[Vec<f64>],
    rounds: usize,
    cfg: &SelfTrainConfig,
) -> Result<(LinearModel, STTrace)> {
    if rounds == 0 {
        return arg("rounds must be at least 1");
    }
    let mut cur = model.clone();
    let mut trace = STTrace::default();
    for t in 1..=rounds {
        let (next, rec) = step_on_sample(&cur, xs, cfg, t, None)?;
        trace.push(rec);
        cur = next;
    }
    Ok((cur, trace))
}

/// Repeated steps on a weighted pool, for discrete distributions.
pub fn repeated_weighted(
    model: &LinearModel,
    cloud: &WeightedCloud,
    rounds: usize,
    cfg: &SelfTrainConfig,
) -> Result<(LinearModel, STTrace)> {
    if rounds == 0 {
        return arg("rounds must be at least 1");
    }
    let mut cur = model.clone();
    let mut trace = STTrace::default();
    for t in 1..=rounds {
        let (next, rec) = self_train_weighted(&cur, cloud, cfg, t, None)?;
        trace.push(rec);
        cur = next;
    }
    Ok((cur, trace))
}

/// Repeated self-training on the union of all unlabeled pools.
pub fn pooled_self_train(
    model: &LinearModel,
    all_unlabeled: &[Vec<f64>],
    rounds: usize,
    cfg: &SelfTrainConfig,
) -> Result<LinearModel> {
    repeated_target_self_train(model, all_unlabeled, rounds, cfg)
}
