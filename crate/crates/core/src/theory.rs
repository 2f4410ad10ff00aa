//! Executable checks of the margin-theory counterexamples and bounds and of
//! Gaussian recovery under gradual mean shift.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::distributions::{
    second_moment_bound, DiscreteDistribution, GaussianMixtureDomain, Label, LabeledPoint, WeightedCloud,
};
use crate::error::{arg, Error, Result};
use crate::models::{
    norm, population_loss, pseudolabeled_loss, soft_label_loss, unlabeled_loss, zero_one_error, LinearModel,
    MarginLossKind,
};
use crate::optimize::{self, erm_exact_1d2d, minimize_unlabeled_gaussian, w_star, SolverConfig, TrustRegion};
use crate::selftrain::{self, SelfTrainConfig};
use crate::shiftgen::{gen_counterexample, Claim, Counterexample, CounterexampleSpec, Relation};
use crate::wasserstein::{gradual_shift_gate, rho_conditional};
use crate::{par, rng};

const EXACT_TOL: f64 = 1e-6;
const GRID: usize = 720;
const BIAS: (f64, f64) = (-12.0, 12.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub claim_id: String,
    pub parameters: Value,
    pub measured: BTreeMap<String, f64>,
    pub claimed: Vec<Claim>,
    pub pass: bool,
    pub status: Status,
    pub tolerance: f64,
    pub diagnostics: Vec<String>,
}

/// Accumulates measured values against claims.
struct Checker {
    measured: BTreeMap<String, f64>,
    claimed: Vec<Claim>,
    tol: f64,
    ok: bool,
    diagnostics: Vec<String>,
}

impl Checker {
    fn new(tol: f64) -> Self {
        Self { measured: BTreeMap::new(), claimed: Vec::new(), tol, ok: true, diagnostics: Vec::new() }
    }

    fn check(&mut self, name: &str, relation: Relation, value: f64, measured: f64) {
        let c = Claim { name: name.into(), relation, value };
        if !c.holds(measured, self.tol) {
            self.ok = false;
            self.diagnostics.push(format!("{name}: measured {measured} vs {relation:?} {value}"));
        }
        self.measured.insert(name.into(), measured);
        self.claimed.push(c);
    }

    fn note(&mut self, name: &str, value: f64) {
        self.measured.insert(name.into(), value);
    }

    fn diag(&mut self, s: impl Into<String>) {
        self.diagnostics.push(s.into());
    }
}

/// Runs `body`; solver and step failures become an inconclusive result,
/// other errors are returned.
fn conclude(
    claim_id: &str,
    parameters: Value,
    tol: f64,
    body: impl FnOnce(&mut Checker) -> Result<()>,
) -> Result<VerificationResult> {
    let mut ck = Checker::new(tol);
    let status = match body(&mut ck) {
        Ok(()) if ck.ok => Status::Pass,
        Ok(()) => Status::Fail,
        Err(e @ (Error::Solver { .. } | Error::Step(_) | Error::Precision { .. })) => {
            ck.diag(e.to_string());
            Status::Inconclusive
        }
        Err(e) => return Err(e),
    };
    Ok(VerificationResult {
        claim_id: claim_id.into(),
        parameters,
        measured: ck.measured,
        claimed: ck.claimed,
        pass: status == Status::Pass,
        status,
        tolerance: tol,
        diagnostics: ck.diagnostics,
    })
}

fn exact_cfg(kind: MarginLossKind, r: f64) -> SelfTrainConfig {
    SelfTrainConfig { loss: kind, ..SelfTrainConfig::exact_ramp(r) }
}

fn describe(m: &LinearModel) -> String {
    format!("w={:?} b={}", m.w, m.b)
}

/// Flips the label of the first atom of the last domain.
fn sabotage(ce: &mut Counterexample) {
    if let Some(d) = ce.domains.last_mut() {
        let flipped = d.atoms().iter().enumerate().map(|(i, a)| {
            let y = if i == 0 { a.point.y.flip() } else { a.point.y };
            (LabeledPoint::new(a.point.x.clone(), y), a.mass)
        });
        *d = DiscreteDistribution::new(flipped.collect::<Vec<_>>()).expect("same masses");
    }
}

fn build(spec: CounterexampleSpec, sabotaged: bool) -> Result<Counterexample> {
    let mut ce = gen_counterexample(&spec)?;
    if sabotaged {
        sabotage(&mut ce);
    }
    Ok(ce)
}

pub fn verify_baselines_fail() -> Result<VerificationResult> {
    baselines_fail(1.0, false)
}

/// Same check under norm budget `r`; the gradual-shift gate is applied
/// first and a violation is returned as an error.
pub fn verify_baselines_fail_with_budget(r: f64) -> Result<VerificationResult> {
    baselines_fail(r, false)
}

fn baselines_fail(r: f64, sabotaged: bool) -> Result<VerificationResult> {
    let ce = build(CounterexampleSpec::BaselinesFail, sabotaged)?;
    let rho = ce.expected.rho[0];
    gradual_shift_gate(&ce.domains, r, rho + 1e-9)?;
    conclude("baselines_fail", json!({ "R": r }), EXACT_TOL, |ck| {
        let ramp = MarginLossKind::Ramp;
        let th0 = LinearModel { norm_budget: Some(r), ..ce.theta0.clone() };
        let (p0, p2) = (&ce.domains[0], &ce.domains[2]);
        ck.check("source_loss", Relation::Eq, 0.0, population_loss(ramp, &th0, p0)?);
        ck.check("target_loss", Relation::Eq, 1.0, population_loss(ramp, &th0, p2)?);
        let (st, _) = selftrain::self_train_weighted(&th0, &p2.marginal(), &exact_cfg(ramp, r), 1, None)?;
        ck.diag(format!("direct self-training on target gives {}", describe(&st)));
        ck.check("direct_st_loss", Relation::Eq, 1.0, population_loss(ramp, &st, p2)?);
        let witness =
            ce.domains.iter().map(|d| population_loss(ramp, &ce.expected.witness, d)).collect::<Result<Vec<_>>>()?;
        ck.check("witness_loss", Relation::Eq, 0.0, witness.into_iter().fold(0.0, f64::max));
        Ok(())
    })
}

pub fn verify_exponential_growth(alpha0: f64, t: usize) -> Result<VerificationResult> {
    exponential_growth(alpha0, t, false)
}

fn exponential_growth(alpha0: f64, t: usize, sabotaged: bool) -> Result<VerificationResult> {
    let ce = build(CounterexampleSpec::Exponential { alpha0, t }, sabotaged)?;
    let id = format!("exponential_growth[alpha0={alpha0},T={t}]");
    let rhos = gradual_shift_gate(&ce.domains, ce.r, ce.expected.rho[0] + 1e-9)?;
    conclude(&id, json!({ "alpha0": alpha0, "T": t }), EXACT_TOL, |ck| {
        let ramp = MarginLossKind::Ramp;
        ck.note("max_rho", rhos.iter().copied().fold(0.0, f64::max));
        let clouds: Vec<WeightedCloud> = ce.domains[1..].iter().map(|d| d.marginal()).collect();
        let (last, trace) = selftrain::gradual_self_train_weighted(&ce.theta0, &clouds, &exact_cfg(ramp, ce.r))?;
        for s in &trace.steps {
            if let Some(m) = &s.model {
                ck.diag(format!("step {}: {}", s.t, describe(m)));
            }
        }
        for c in &ce.expected.claims {
            let measured = match c.name.as_str() {
                "source_loss" => population_loss(ramp, &ce.theta0, &ce.domains[0])?,
                "final_loss" => population_loss(ramp, &last, ce.domains.last().expect("nonempty"))?,
                "witness_loss" => ce
                    .domains
                    .iter()
                    .map(|d| population_loss(ramp, &ce.expected.witness, d))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(0.0, f64::max),
                _ => continue,
            };
            ck.check(&c.name, c.relation, c.value, measured);
        }
        Ok(())
    })
}

/// Rescales `theta` so every point of `xs` has margin at least one against
/// its own pseudolabel, without changing any prediction.
pub fn verify_no_regularization_fixed_point(theta: &LinearModel, xs: &[Vec<f64>]) -> Result<VerificationResult> {
    if xs.is_empty() {
        return arg("need at least one point");
    }
    let scores = xs.iter().map(|x| crate::models::score(theta, x)).collect::<Result<Vec<_>>>()?;
    let min_abs = scores.iter().map(|s| s.abs()).fold(f64::INFINITY, f64::min);
    if !(min_abs > 0.0) {
        return arg("a point lies on the decision boundary");
    }
    let alpha = 1.0 / min_abs;
    let params = json!({ "w": theta.w, "b": theta.b, "n": xs.len() });
    conclude("no_regularization_fixed_point", params, 1e-12, |ck| {
        ck.note("alpha", alpha);
        let scaled = theta.scaled(alpha);
        let dist =
            DiscreteDistribution::normalized(xs.iter().map(|x| (LabeledPoint::new(x.clone(), Label::Pos), 1.0)))?;
        for (name, kind) in [("ramp", MarginLossKind::Ramp), ("hinge", MarginLossKind::Hinge)] {
            ck.check(
                &format!("scaled_{name}_pseudolabel_loss"),
                Relation::Eq,
                0.0,
                pseudolabeled_loss(kind, &scaled, theta, &dist)?,
            );
        }
        // Probes: the points themselves plus a seeded Gaussian cloud at their scale.
        let spread = xs.iter().map(|x| norm(x)).fold(1.0, f64::max);
        let mut rg = rng::seeded(0);
        let mut probes = xs.to_vec();
        probes.extend(
            (0..1000)
                .map(|_| (0..theta.dim()).map(|_| spread * rg.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>()),
        );
        let changed = probes
            .iter()
            .filter(|x| Label::from_score(scaled.score_unchecked(x)) != Label::from_score(theta.score_unchecked(x)))
            .count();
        ck.check("changed_predictions", Relation::Eq, 0.0, changed as f64);
        Ok(())
    })
}

/// Probes the soft-label objective `theta' -> L(theta, theta')` around
/// `theta'= theta`: no probe may do better and the finite-difference
/// gradient at `theta` must vanish. Finite probing cannot certify the
/// universal claim; stationarity is the strongest finite certificate here.
pub fn verify_soft_label_fixed_point(
    theta: &LinearModel,
    dist: &DiscreteDistribution,
    n_probes: usize,
    seed: u64,
) -> Result<VerificationResult> {
    if n_probes < 100 {
        return arg("n_probes must be at least 100");
    }
    let params = json!({ "w": theta.w, "b": theta.b, "n_probes": n_probes, "seed": seed });
    conclude("soft_label_fixed_point", params, 1e-6, |ck| {
        let at = soft_label_loss(theta, theta, dist)?;
        ck.note("loss_at_theta", at);
        let d = theta.dim();
        let probes: Vec<LinearModel> = (0..n_probes)
            .map(|k| {
                if k == 0 {
                    return theta.clone();
                }
                let mut rg = rng::stream(seed, k as u64);
                let scale = 10f64.powf(rg.random_range(-3.0..0.5));
                let w = theta.w.iter().map(|v| v + scale * rg.sample::<f64, _>(StandardNormal)).collect();
                LinearModel::unbounded(w, theta.b + scale * rg.sample::<f64, _>(StandardNormal))
            })
            .collect();
        let losses = par::map(&probes, |p| soft_label_loss(theta, p, dist));
        let mut worst_gap = f64::INFINITY;
        for l in losses {
            worst_gap = worst_gap.min(l? - at);
        }
        ck.check("min_probe_gap", Relation::Ge, 0.0, worst_gap);
        let h = 1e-6;
        let mut g2 = 0.0;
        for j in 0..=d {
            let bump = |s: f64| {
                let mut m = LinearModel::unbounded(theta.w.clone(), theta.b);
                if j < d {
                    m.w[j] += s;
                } else {
                    m.b += s;
                }
                soft_label_loss(theta, &m, dist)
            };
            let g = (bump(h)? - bump(-h)?) / (2.0 * h);
            g2 += g * g;
        }
        ck.check("gradient_norm", Relation::Le, 1e-6, g2.sqrt());
        Ok(())
    })
}

pub fn verify_hinge_failure(alpha: f64) -> Result<VerificationResult> {
    hinge_failure(alpha, false)
}

fn hinge_failure(alpha: f64, sabotaged: bool) -> Result<VerificationResult> {
    let ce = build(CounterexampleSpec::HingeBad { alpha }, sabotaged)?;
    let rhos = gradual_shift_gate(&ce.domains, ce.r, 2.0 / 3.0 + 1e-9)?;
    conclude(&format!("hinge_failure[alpha={alpha}]"), json!({ "alpha": alpha }), EXACT_TOL, |ck| {
        let hinge = MarginLossKind::Hinge;
        ck.note("max_rho", rhos.iter().copied().fold(0.0, f64::max));
        let clouds: Vec<WeightedCloud> = ce.domains[1..].iter().map(|d| d.marginal()).collect();
        let (last, trace) = selftrain::gradual_self_train_weighted(&ce.theta0, &clouds, &exact_cfg(hinge, ce.r))?;
        for s in &trace.steps {
            if let Some(m) = &s.model {
                ck.diag(format!("step {}: {}", s.t, describe(m)));
            }
        }
        let src = population_loss(hinge, &ce.theta0, &ce.domains[0])?;
        for c in &ce.expected.claims {
            let measured = match c.name.as_str() {
                "source_hinge" | "source_hinge_vs_alpha" => src,
                "final_error" => zero_one_error(&last, &ce.domains[2])?,
                "witness_hinge" => ce
                    .domains
                    .iter()
                    .map(|d| population_loss(hinge, &ce.expected.witness, d))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(0.0, f64::max),
                _ => continue,
            };
            ck.check(&c.name, c.relation, c.value, measured);
        }
        Ok(())
    })
}

/// `T` exact ramp self-training rounds on a fixed distribution. Without
/// `theta0` the exact minimizer is used and must reach `alpha0`.
pub fn verify_no_shift_linear_bound(
    alpha0: f64,
    t: usize,
    dist: &DiscreteDistribution,
    theta0: Option<&LinearModel>,
) -> Result<VerificationResult> {
    let params = json!({ "alpha0": alpha0, "T": t });
    let ramp = MarginLossKind::Ramp;
    let theta0 = match theta0 {
        Some(m) => m.clone(),
        None => erm_exact_1d2d(ramp, dist, 1.0, GRID, BIAS, None)?,
    };
    let start = population_loss(ramp, &theta0, dist)?;
    if start > alpha0 + EXACT_TOL {
        return conclude("no_shift_linear_bound", params, EXACT_TOL, |ck| {
            ck.diag(format!("no start model reaches alpha0: best loss {start}"));
            Err(Error::Solver { message: "no qualifying start".into(), w: theta0.w.clone(), b: theta0.b })
        });
    }
    conclude(&format!("no_shift_linear_bound[T={t}]"), params, EXACT_TOL, |ck| {
        ck.note("start_loss", start);
        let cloud = dist.marginal();
        let cfg = exact_cfg(ramp, 1.0);
        let mut cur = theta0.clone();
        let mut u_prev = unlabeled_loss(ramp, &cur, dist)?;
        let mut max_rise: f64 = 0.0;
        for round in 1..=t {
            cur = selftrain::self_train_weighted(&cur, &cloud, &cfg, round, None)?.0;
            let u = unlabeled_loss(ramp, &cur, dist)?;
            max_rise = max_rise.max(u - u_prev);
            u_prev = u;
            ck.diag(format!("round {round}: {}", describe(&cur)));
        }
        let fin = population_loss(ramp, &cur, dist)?;
        ck.check("final_loss", Relation::Le, alpha0 * (t as f64 + 1.0), fin);
        ck.check("unlabeled_loss_rise", Relation::Le, 0.0, max_rise);
        Ok(())
    })
}

/// The hypotheses of the one-step bound, with `rho`, `alpha_star` and `b`
/// computed from `p`, `q` and `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckInstance {
    pub p: DiscreteDistribution,
    pub q: DiscreteDistribution,
    pub theta: LinearModel,
    pub r: f64,
    pub rho: f64,
    pub alpha_star: f64,
    pub b: f64,
    pub n: usize,
    pub delta: f64,
}

impl BoundCheckInstance {
    pub fn new(
        p: DiscreteDistribution,
        q: DiscreteDistribution,
        theta: LinearModel,
        r: f64,
        n: usize,
        delta: f64,
    ) -> Result<Self> {
        if p.dim() > 2 {
            return Err(Error::UnsupportedDimension(p.dim()));
        }
        if !(delta > 0.0 && delta < 1.0) || n == 0 {
            return arg("need 0 < delta < 1 and n >= 1");
        }
        if theta.w_norm() > r + 1e-12 {
            return arg("theta lies outside the norm ball");
        }
        let rho = rho_conditional(&p, &q, true)?;
        if !(rho * r < 1.0) {
            return Err(Error::AssumptionViolation(format!("rho = {rho} is not below 1/R = {}", 1.0 / r)));
        }
        let star = erm_exact_1d2d(MarginLossKind::Ramp, &q, r, GRID, BIAS, None)?;
        let alpha_star = population_loss(MarginLossKind::Ramp, &star, &q)?;
        let b = second_moment_bound(&p).max(second_moment_bound(&q)).sqrt();
        Ok(Self { p, q, theta, r, rho, alpha_star, b, n, delta })
    }

    pub fn beta(&self) -> f64 {
        2.0 / (1.0 - self.rho * self.r)
    }

    pub fn sample_term(&self, log_arg: f64) -> f64 {
        (4.0 * self.b * self.r + (2.0 * log_arg.ln()).sqrt()) / (self.n as f64).sqrt()
    }
}

struct BoundTrial {
    lhs: f64,
    rhs: f64,
    rhs_factor1: f64,
}

fn bound_trial(inst: &BoundCheckInstance, seed: u64) -> Result<BoundTrial> {
    let ramp = MarginLossKind::Ramp;
    let sample = inst.q.sample(inst.n, seed);
    let w = 1.0 / inst.n as f64;
    let cloud = WeightedCloud::from_pairs(sample.into_iter().map(|p| (p.x, w)));
    let theta = LinearModel { norm_budget: Some(inst.r), ..inst.theta.clone() };
    let (next, _) = selftrain::self_train_weighted(&theta, &cloud, &exact_cfg(ramp, inst.r), 1, None)?;
    let lhs = population_loss(ramp, &next, &inst.q)?;
    let src = population_loss(ramp, &inst.theta, &inst.p)?;
    let rest = inst.alpha_star + inst.sample_term(2.0 / inst.delta);
    Ok(BoundTrial { lhs, rhs: inst.beta() * src + rest, rhs_factor1: inst.beta() / 2.0 * src + rest })
}

/// One-step bound `L(theta', Q) <= beta L(theta, P) + alpha* + sample term`
/// over `trials` independent samples. The single-factor variant is
/// recorded alongside.
pub fn check_theorem_bound(inst: &BoundCheckInstance, trials: usize, seed: u64) -> Result<VerificationResult> {
    check_bound_batch("theorem_bound", std::slice::from_ref(inst), trials, seed)
}

/// One bound check per instance and trial, pooled into a single result.
pub fn check_bound_batch(
    claim_id: &str,
    instances: &[BoundCheckInstance],
    trials: usize,
    seed: u64,
) -> Result<VerificationResult> {
    if trials == 0 {
        return arg("trials must be at least 1");
    }
    let jobs: Vec<(usize, usize)> = (0..instances.len()).flat_map(|i| (0..trials).map(move |k| (i, k))).collect();
    let outcomes = par::map(&jobs, |&(i, k)| bound_trial(&instances[i], rng::derive(seed, (i * trials + k) as u64)));
    let params = json!({ "instances": instances.len(), "trials": trials, "seed": seed });
    conclude(claim_id, params, 1e-12, |ck| {
        let mut slack = Vec::new();
        let (mut held, mut held1, mut failed_solves) = (0usize, 0usize, 0usize);
        for o in outcomes {
            match o {
                Ok(t) => {
                    held += (t.lhs <= t.rhs + 1e-12) as usize;
                    held1 += (t.lhs <= t.rhs_factor1 + 1e-12) as usize;
                    slack.push(t.rhs - t.lhs);
                }
                Err(Error::Solver { .. } | Error::Step(_)) => failed_solves += 1,
                Err(e) => return Err(e),
            }
        }
        let total = jobs.len();
        if failed_solves * 10 > total {
            return Err(Error::Solver {
                message: format!("{failed_solves} of {total} trials had no conclusive solve"),
                w: vec![],
                b: 0.0,
            });
        }
        slack.sort_by(f64::total_cmp);
        if let (Some(lo), Some(hi)) = (slack.first(), slack.last()) {
            ck.note("slack_min", *lo);
            ck.note("slack_median", slack[slack.len() / 2]);
            ck.note("slack_max", *hi);
        }
        ck.note("held_single_factor", held1 as f64);
        ck.note("inconclusive_trials", failed_solves as f64);
        ck.check("trials_violating", Relation::Eq, 0.0, (slack.len() - held) as f64);
        Ok(())
    })
}

/// Random labeled atoms in `[-2, 2]^2`, labeled by a noisy vertical split,
/// with small-integer relative masses (exact rationals for the transport).
fn random_planar(rg: &mut rng::Rng, n_atoms: usize) -> DiscreteDistribution {
    loop {
        let cut = rg.random_range(-0.5..0.5);
        let atoms: Vec<(LabeledPoint, f64)> = (0..n_atoms)
            .map(|_| {
                let x = vec![rg.random_range(-2.0..2.0), rg.random_range(-2.0..2.0)];
                let mut y = Label::from_score(x[0] - cut);
                if rg.random::<f64>() < 0.15 {
                    y = y.flip();
                }
                (LabeledPoint::new(x, y), rg.random_range(1..=4) as f64)
            })
            .collect();
        let both = [Label::Pos, Label::Neg].iter().all(|c| atoms.iter().any(|(p, _)| p.y == *c));
        if let (true, Ok(d)) = (both, DiscreteDistribution::normalized(atoms.clone())) {
            if d.len() == n_atoms {
                return d;
            }
        }
    }
}

/// Moves each atom by at most `max_move`, keeping labels and masses.
fn shifted(d: &DiscreteDistribution, max_move: f64, rg: &mut rng::Rng) -> DiscreteDistribution {
    let atoms: Vec<(LabeledPoint, f64)> = d
        .atoms()
        .iter()
        .map(|a| {
            let ang = rg.random_range(0.0..std::f64::consts::TAU);
            let len = rg.random_range(0.0..max_move);
            let x = vec![a.point.x[0] + len * ang.cos(), a.point.x[1] + len * ang.sin()];
            (LabeledPoint::new(x, a.point.y), a.mass)
        })
        .collect();
    DiscreteDistribution::new(atoms).expect("masses unchanged")
}

/// Random gradual pairs in the plane with `rho <= max_move`, R = 1, and
/// `theta` the exact source minimizer.
pub fn random_bound_instances(count: usize, max_move: f64, n: usize, seed: u64) -> Result<Vec<BoundCheckInstance>> {
    let made = par::map_range(count, |i| {
        let mut rg = rng::stream(seed, i as u64);
        let k = rg.random_range(4..=7);
        let p = random_planar(&mut rg, k);
        let q = shifted(&p, max_move, &mut rg);
        let theta = erm_exact_1d2d(MarginLossKind::Ramp, &p, 1.0, GRID, BIAS, None)?;
        BoundCheckInstance::new(p, q, theta, 1.0, n, 0.1)
    });
    made.into_iter().collect()
}

/// Gradual self-training over `t` random shifts; the final loss is compared
/// with `beta^(T+1) (alpha0 + sample term)` where `alpha0` also bounds every
/// domain's best achievable loss.
pub fn verify_corollary_chain(t: usize, max_move: f64, n: usize, seed: u64) -> Result<VerificationResult> {
    if t == 0 {
        return arg("T must be at least 1");
    }
    let ramp = MarginLossKind::Ramp;
    let mut rg = rng::stream(seed, 0);
    let mut domains = vec![random_planar(&mut rg, 6)];
    for _ in 0..t {
        let next = shifted(domains.last().expect("nonempty"), max_move, &mut rg);
        domains.push(next);
    }
    let delta = 0.1;
    let params = json!({ "T": t, "max_move": max_move, "n": n, "delta": delta, "seed": seed });
    conclude(&format!("corollary_chain[T={t}]"), params, 1e-12, |ck| {
        let rhos = gradual_shift_gate(&domains, 1.0, max_move + 1e-9)?;
        let rho = rhos.iter().copied().fold(0.0, f64::max);
        let theta0 = erm_exact_1d2d(ramp, &domains[0], 1.0, GRID, BIAS, None)?;
        let mut alpha0 = population_loss(ramp, &theta0, &domains[0])?;
        for d in &domains[1..] {
            let s = erm_exact_1d2d(ramp, d, 1.0, GRID, BIAS, None)?;
            alpha0 = alpha0.max(population_loss(ramp, &s, d)?);
        }
        let w = 1.0 / n as f64;
        let clouds: Vec<WeightedCloud> = domains[1..]
            .iter()
            .enumerate()
            .map(|(i, d)| {
                WeightedCloud::from_pairs(d.sample(n, rng::derive(seed, i as u64 + 1)).into_iter().map(|p| (p.x, w)))
            })
            .collect();
        let (last, _) = selftrain::gradual_self_train_weighted(&theta0, &clouds, &exact_cfg(ramp, 1.0))?;
        let b = domains.iter().map(second_moment_bound).fold(0.0, f64::max).sqrt();
        let beta = 2.0 / (1.0 - rho);
        let term = (4.0 * b + (2.0 * (2.0 * t as f64 / delta).ln()).sqrt()) / (n as f64).sqrt();
        ck.note("rho", rho);
        ck.note("alpha0", alpha0);
        ck.check(
            "final_loss",
            Relation::Le,
            beta.powi(t as i32 + 1) * (alpha0 + term),
            population_loss(ramp, &last, domains.last().expect("nonempty"))?,
        );
        Ok(())
    })
}

/// `Err(theta, Q) <= L_r(theta, P) / (1 - rho R)` on random pairs and random
/// `theta` in the unit ball.
pub fn verify_margin_to_error_lemma(count: usize, seed: u64) -> Result<VerificationResult> {
    let params = json!({ "count": count, "seed": seed });
    conclude("lemma_margin_to_error", params, 1e-12, |ck| {
        let gaps = par::map_range(count, |i| -> Result<f64> {
            let mut rg = rng::stream(seed, i as u64);
            let k = rg.random_range(3..=7);
            let p = random_planar(&mut rg, k);
            let q = shifted(&p, rg.random_range(0.05..0.9), &mut rg);
            let rho = rho_conditional(&p, &q, true)?;
            let ang = rg.random_range(0.0..std::f64::consts::TAU);
            let s = rg.random_range(0.0..1.0);
            let theta = LinearModel::new(vec![s * ang.cos(), s * ang.sin()], rg.random_range(-1.0..1.0), Some(1.0))?;
            Ok(population_loss(MarginLossKind::Ramp, &theta, &p)? / (1.0 - rho) - zero_one_error(&theta, &q)?)
        });
        let mut worst = f64::INFINITY;
        for g in gaps {
            worst = worst.min(g?);
        }
        ck.check("min_slack", Relation::Ge, 0.0, worst);
        Ok(())
    })
}

/// Relabeling mass `beta` moves the ramp loss by at most `beta`.
pub fn verify_pseudolabel_disagreement_lemma(count: usize, seed: u64) -> Result<VerificationResult> {
    let params = json!({ "count": count, "seed": seed });
    conclude("lemma_pseudolabel_disagreement", params, 1e-12, |ck| {
        let gaps = par::map_range(count, |i| -> Result<f64> {
            let mut rg = rng::stream(seed, i as u64);
            let k = rg.random_range(2..=10);
            let p = random_planar(&mut rg, k);
            let flips: Vec<bool> = (0..p.len()).map(|_| rg.random::<f64>() < 0.3).collect();
            let beta: f64 = p.atoms().iter().zip(&flips).filter(|(_, f)| **f).map(|(a, _)| a.mass).sum();
            let relabeled = DiscreteDistribution::new(
                p.atoms()
                    .iter()
                    .zip(&flips)
                    .map(|(a, f)| {
                        let y = if *f { a.point.y.flip() } else { a.point.y };
                        (LabeledPoint::new(a.point.x.clone(), y), a.mass)
                    })
                    .collect::<Vec<_>>(),
            )?;
            let theta = LinearModel::unbounded(
                vec![rg.sample(StandardNormal), rg.sample(StandardNormal)],
                rg.sample(StandardNormal),
            );
            let ramp = MarginLossKind::Ramp;
            Ok(beta - (population_loss(ramp, &theta, &relabeled)? - population_loss(ramp, &theta, &p)?).abs())
        });
        let mut worst = f64::INFINITY;
        for g in gaps {
            worst = worst.min(g?);
        }
        ck.check("min_slack", Relation::Ge, 0.0, worst);
        Ok(())
    })
}

/// Parameters of the Gaussian recovery check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianRecovery {
    pub d: usize,
    pub b_sep: f64,
    pub shifts: Vec<Vec<f64>>,
    pub sigma: f64,
    pub mc_samples: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl GaussianRecovery {
    /// Shifts of length `step` orthogonal to the current mean in the first
    /// two coordinates, starting from `mu_0 = b_sep e_1`.
    pub fn rotating(d: usize, b_sep: f64, n_shifts: usize, step: f64, sigma: f64, seed: u64) -> Self {
        let mut mu = vec![0.0; d];
        mu[0] = b_sep;
        let mut shifts = Vec::new();
        for _ in 0..n_shifts {
            let n = (mu[0] * mu[0] + mu[1] * mu[1]).sqrt();
            let mut delta = vec![0.0; d];
            delta[0] = -step * mu[1] / n;
            delta[1] = step * mu[0] / n;
            mu.iter_mut().zip(&delta).for_each(|(m, v)| *m += v);
            shifts.push(delta);
        }
        Self { d, b_sep, shifts, sigma, mc_samples: 200_000, tolerance: 0.05, seed }
    }
}

pub fn verify_gaussian_recovery(spec: &GaussianRecovery) -> Result<VerificationResult> {
    let GaussianRecovery { d, b_sep, ref shifts, sigma, mc_samples, tolerance, seed } = *spec;
    if d == 0 || !(b_sep > 0.0) || !(sigma > 0.0) {
        return arg("need d >= 1, B > 0 and sigma > 0");
    }
    let mut mus = vec![{
        let mut m = vec![0.0; d];
        m[0] = b_sep;
        m
    }];
    for (t, s) in shifts.iter().enumerate() {
        if s.len() != d {
            return Err(Error::Dimension { expected: d, got: s.len() });
        }
        if norm(s) > b_sep / 4.0 + 1e-12 {
            return arg(format!("shift {t} has norm {} above B/4", norm(s)));
        }
        let next: Vec<f64> = mus[t].iter().zip(s).map(|(a, b)| a + b).collect();
        if norm(&next) < b_sep - 1e-12 {
            return arg(format!("mean {} has norm below B", t + 1));
        }
        mus.push(next);
    }
    let id = format!("gaussian_recovery[shifts={}]", shifts.len());
    let params = serde_json::to_value(spec)?;
    conclude(&id, params, tolerance, |ck| {
        let stars = mus.iter().map(|m| w_star(m)).collect::<Result<Vec<_>>>()?;
        let mut lip: f64 = 0.0;
        for t in 0..shifts.len() {
            let moved: Vec<f64> = stars[t + 1].iter().zip(&stars[t]).map(|(a, b)| a - b).collect();
            lip = lip.max(norm(&moved) - norm(&shifts[t]) / b_sep);
        }
        ck.check("lipschitz_excess", Relation::Le, 0.0, lip);

        let mut rg = rng::stream(seed, 0);
        let dir: Vec<f64> = (0..d).map(|_| rg.sample::<f64, _>(StandardNormal)).collect();
        let dn = norm(&dir);
        let mut w: Vec<f64> = stars[0].iter().zip(&dir).map(|(s, v)| s + 0.2 * v / dn).collect();
        optimize::project_ball(&mut w, 1.0);
        ck.note("initial_deviation", dist(&w, &stars[0]));
        for t in 0..shifts.len() {
            let domain = GaussianMixtureDomain::isotropic_symmetric(mus[t + 1].clone(), sigma)?;
            let cfg = SolverConfig { seed: rng::derive(seed, t as u64 + 1), ..SolverConfig::default() };
            let sol = minimize_unlabeled_gaussian(
                MarginLossKind::Ramp,
                &domain,
                1.0,
                &TrustRegion::new(w.clone(), 0.5)?,
                mc_samples,
                &cfg,
            )?;
            ck.diag(format!("step {}: deviation {:.4}", t + 1, dist(&sol.w, &stars[t + 1])));
            w = sol.w;
        }
        ck.check("final_deviation", Relation::Le, 0.0, dist(&w, stars.last().expect("nonempty")));
        Ok(())
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Margin,
    Gaussian,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "margin" => Ok(Suite::Margin),
            "gaussian" => Ok(Suite::Gaussian),
            "all" => Ok(Suite::All),
            _ => arg(format!("unknown suite {s:?}")),
        }
    }
}

type Check = Box<dyn Fn(bool) -> Result<VerificationResult> + Send + Sync>;

fn soft_label_instance(zero: bool) -> (LinearModel, DiscreteDistribution) {
    let mut rg = rng::seeded(11);
    let dist = random_planar(&mut rg, 10);
    let theta = if zero {
        LinearModel::zeros(2, None)
    } else {
        LinearModel::unbounded(vec![rg.sample(StandardNormal), rg.sample(StandardNormal)], rg.sample(StandardNormal))
    };
    (theta, dist)
}

fn registry(which: Suite) -> Vec<(String, Check)> {
    let mut out: Vec<(String, Check)> = Vec::new();
    let margin = matches!(which, Suite::Margin | Suite::All);
    let gaussian = matches!(which, Suite::Gaussian | Suite::All);
    if margin {
        out.push(("baselines_fail".into(), Box::new(|s| baselines_fail(1.0, s))));
        for (a, t) in [(0.2, 1), (0.2, 2), (0.2, 3), (0.1, 3), (0.25, 10)] {
            out.push((format!("exponential_growth[alpha0={a},T={t}]"), Box::new(move |s| exponential_growth(a, t, s))));
        }
        for a in [0.3, 3.0] {
            out.push((format!("hinge_failure[alpha={a}]"), Box::new(move |s| hinge_failure(a, s))));
        }
        out.push((
            "no_regularization_fixed_point".into(),
            Box::new(|_| {
                let theta = LinearModel::unbounded(vec![1.0, 0.0], 0.0);
                verify_no_regularization_fixed_point(&theta, &[vec![2.0, 0.0], vec![-3.0, 0.0]])
            }),
        ));
        for zero in [false, true] {
            let id = if zero { "soft_label_fixed_point[theta=0]" } else { "soft_label_fixed_point" };
            out.push((
                id.into(),
                Box::new(move |_| {
                    let (theta, dist) = soft_label_instance(zero);
                    let mut r = verify_soft_label_fixed_point(&theta, &dist, 500, 5)?;
                    r.claim_id = id.into();
                    Ok(r)
                }),
            ));
        }
        for t in 0..=5 {
            out.push((
                format!("no_shift_linear_bound[T={t}]"),
                Box::new(move |s| {
                    let mut ce =
                        gen_counterexample(&CounterexampleSpec::NoShiftDoubling { alpha0: 0.2, epsilon: 0.06 })?;
                    if s {
                        sabotage(&mut ce);
                    }
                    let mut r = verify_no_shift_linear_bound(0.2, t, &ce.domains[0], Some(&ce.theta0))?;
                    if t == 1 {
                        let fin = r.measured["final_loss"];
                        let c = Claim { name: "doubled_loss".into(), relation: Relation::Ge, value: 0.34 };
                        if !c.holds(fin, r.tolerance) {
                            r.pass = false;
                            r.status = Status::Fail;
                        }
                        r.claimed.push(c);
                    }
                    Ok(r)
                }),
            ));
        }
        out.push((
            "theorem_bound[baselines]".into(),
            Box::new(|s| {
                let ce = build(CounterexampleSpec::BaselinesFail, s)?;
                let inst = BoundCheckInstance::new(
                    ce.domains[0].clone(),
                    ce.domains[1].clone(),
                    ce.theta0.clone(),
                    1.0,
                    1000,
                    0.1,
                )?;
                let mut r = check_theorem_bound(&inst, 10, 1)?;
                r.claim_id = "theorem_bound[baselines]".into();
                Ok(r)
            }),
        ));
        out.push((
            "theorem_bound[random_pairs]".into(),
            Box::new(|_| {
                let inst = random_bound_instances(100, 0.5, 1000, 21)?;
                check_bound_batch("theorem_bound[random_pairs]", &inst, 1, 22)
            }),
        ));
        out.push(("corollary_chain[T=3]".into(), Box::new(|_| verify_corollary_chain(3, 0.2, 1000, 31))));
        out.push(("lemma_margin_to_error".into(), Box::new(|_| verify_margin_to_error_lemma(300, 41))));
        out.push((
            "lemma_pseudolabel_disagreement".into(),
            Box::new(|_| verify_pseudolabel_disagreement_lemma(300, 51)),
        ));
    }
    if gaussian {
        out.push((
            "gaussian_recovery[shifts=5]".into(),
            Box::new(|_| verify_gaussian_recovery(&GaussianRecovery::rotating(2, 2.0, 5, 0.5, 0.4, 61))),
        ));
        out.push((
            "gaussian_recovery[zero_shifts]".into(),
            Box::new(|_| verify_gaussian_recovery(&GaussianRecovery::rotating(2, 2.0, 5, 0.0, 0.4, 62))),
        ));
    }
    out
}

/// Claim ids in `which`, in report order.
pub fn suite_claims(which: Suite) -> Vec<String> {
    let mut ids: Vec<String> = registry(which).into_iter().map(|(id, _)| id).collect();
    ids.sort();
    ids
}

pub fn run_suite(which: Suite) -> Vec<VerificationResult> {
    run_suite_with(which, None)
}

/// Runs the battery in parallel; the claim named by `sabotaged` is run on a
/// construction with one label flipped. Errors become failed results.
pub fn run_suite_with(which: Suite, sabotaged: Option<&str>) -> Vec<VerificationResult> {
    let reg = registry(which);
    let mut results = par::map(&reg, |(id, check)| {
        let s = sabotaged == Some(id.as_str());
        match check(s) {
            Ok(mut r) => {
                r.claim_id = id.clone();
                r
            }
            Err(e) => VerificationResult {
                claim_id: id.clone(),
                parameters: Value::Null,
                measured: BTreeMap::new(),
                claimed: vec![],
                pass: false,
                status: Status::Fail,
                tolerance: 0.0,
                diagnostics: vec![e.to_string()],
            },
        }
    });
    results.sort_by(|a, b| a.claim_id.cmp(&b.claim_id));
    results
}

/// Worst status: any failure beats inconclusive, which beats pass.
pub fn overall(results: &[VerificationResult]) -> Status {
    if results.iter().any(|r| r.status == Status::Fail) {
        Status::Fail
    } else if results.iter().any(|r| r.status == Status::Inconclusive) {
        Status::Inconclusive
    } else {
        Status::Pass
    }
}

pub fn render_table(results: &[VerificationResult]) -> String {
    let width = results.iter().map(|r| r.claim_id.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  status\n", "claim");
    for r in results {
        let status = match r.status {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Inconclusive => "inconclusive",
        };
        let _ = writeln!(s, "{:<width$}  {status}", r.claim_id);
    }
    s
}
