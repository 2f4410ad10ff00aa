//! Empirical risk minimization over linear models.
//!
//! Three families of solvers live here:
//! * norm-constrained ERM (`erm_constrained`): accelerated projected descent
//!   for the convex losses, and a concave-convex procedure for the ramp loss;
//! * an exact solver for one- and two-dimensional inputs (`erm_exact_1d2d`)
//!   that the verification harness uses as ground truth;
//! * the penalized logistic regression used by the experiments, and the
//!   trust-region minimizer of the unlabeled Gaussian objective.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::distributions::{DiscreteDistribution, GaussianMixtureDomain, Label};
use crate::error::{arg, Error, Result};
use crate::models::{dot, norm, sigmoid, softplus, LinearModel, MarginLossKind};
use crate::par;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepDecay {
    Constant,
    InvSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub step_size: f64,
    pub decay: StepDecay,
    pub restarts: usize,
    pub tolerance: f64,
    pub grid_resolution: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 4000,
            step_size: 0.1,
            decay: StepDecay::InvSqrt,
            restarts: 4,
            tolerance: 1e-9,
            grid_resolution: 720,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return arg("max_iters must be at least 1");
        }
        if !(self.tolerance > 0.0) {
            return arg("tolerance must be positive");
        }
        if self.restarts == 0 {
            return arg("restarts must be at least 1");
        }
        Ok(())
    }

    fn step(&self, k: usize) -> f64 {
        match self.decay {
            StepDecay::Constant => self.step_size,
            StepDecay::InvSqrt => self.step_size / ((k + 1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl TrustRegion {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return arg(format!("trust radius must be positive, got {radius}"));
        }
        Ok(Self { center, radius })
    }
}

/// Radial projection onto `{||w|| <= r}`.
pub fn project_ball(w: &mut [f64], r: f64) {
    let n = norm(w);
    if n > r {
        let s = r / n;
        w.iter_mut().for_each(|v| *v *= s);
    }
}

fn project_ball_at(w: &mut [f64], center: &[f64], r: f64) {
    let mut diff: Vec<f64> = w.iter().zip(center).map(|(a, c)| a - c).collect();
    project_ball(&mut diff, r);
    for ((wi, ci), di) in w.iter_mut().zip(center).zip(diff) {
        *wi = ci + di;
    }
}

/// Alternating projections onto `{||w|| <= r} ∩ {||w - c|| <= rho}`.
pub fn project_intersection(w: &mut [f64], r: f64, trust: &TrustRegion) {
    for _ in 0..100 {
        project_ball(w, r);
        project_ball_at(w, &trust.center, trust.radius);
        let in_ball = norm(w) <= r * (1.0 + 1e-10) + 1e-12;
        let in_trust = dist(w, &trust.center) <= trust.radius * (1.0 + 1e-10) + 1e-12;
        if in_ball && in_trust {
            return;
        }
    }
    // Final pass keeps the trust constraint exact; the ball is then met up to
    // the residual of the alternating scheme.
    project_ball(w, r);
    project_ball_at(w, &trust.center, trust.radius);
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Flattened view of a labeled discrete distribution.
struct Samples {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    masses: Vec<f64>,
    dim: usize,
}

impl Samples {
    fn from_dist(d: &DiscreteDistribution) -> Self {
        Self {
            xs: d.atoms().iter().map(|a| a.point.x.clone()).collect(),
            ys: d.atoms().iter().map(|a| a.point.y.value()).collect(),
            masses: d.atoms().iter().map(|a| a.mass).collect(),
            dim: d.dim(),
        }
    }

    fn margin(&self, i: usize, w: &[f64], b: f64) -> f64 {
        self.ys[i] * (dot(w, &self.xs[i]) + b)
    }

    fn objective(&self, kind: MarginLossKind, w: &[f64], b: f64) -> f64 {
        (0..self.xs.len()).map(|i| self.masses[i] * kind.eval(self.margin(i, w, b))).sum()
    }

    fn curvature(&self) -> f64 {
        self.xs.iter().zip(&self.masses).map(|(x, m)| m * (dot(x, x) + 1.0)).sum::<f64>().max(1e-12)
    }
}

/// Objective value of `(w, b)` under `kind` on `data`.
pub fn erm_objective(kind: MarginLossKind, data: &DiscreteDistribution, model: &LinearModel) -> Result<f64> {
    crate::models::population_loss(kind, model, data)
}

/// Convex surrogate `sum_i m_i [phi(margin_i) + s_i margin_i]` where phi is the
/// hinge or logistic function. `s_i` carries the linearized concave part of
/// the ramp loss inside the concave-convex procedure.
struct Surrogate<'a> {
    data: &'a Samples,
    kind: MarginLossKind,
    lin: Vec<f64>,
}

impl Surrogate<'_> {
    fn value(&self, w: &[f64], b: f64) -> f64 {
        (0..self.data.xs.len())
            .map(|i| {
                let m = self.data.margin(i, w, b);
                self.data.masses[i] * (self.kind.eval(m) + self.lin[i] * m)
            })
            .sum()
    }

    /// Value and gradient of the Huber-smoothed surrogate (smoothing `mu`
    /// only affects the hinge).
    fn smoothed_grad(&self, w: &[f64], b: f64, mu: f64, gw: &mut [f64]) -> (f64, f64) {
        gw.iter_mut().for_each(|v| *v = 0.0);
        let mut gb = 0.0;
        let mut val = 0.0;
        for i in 0..self.data.xs.len() {
            let m = self.data.margin(i, w, b);
            let (f, df) = match self.kind {
                MarginLossKind::Hinge => {
                    if m >= 1.0 {
                        (0.0, 0.0)
                    } else if m > 1.0 - mu {
                        let t = 1.0 - m;
                        (t * t / (2.0 * mu), -t / mu)
                    } else {
                        (1.0 - m - mu / 2.0, -1.0)
                    }
                }
                MarginLossKind::Logistic => (softplus(-m), -sigmoid(-m)),
                MarginLossKind::Ramp => unreachable!("ramp is handled by CCCP"),
            };
            let c = self.data.masses[i] * (df + self.lin[i]) * self.data.ys[i];
            val += self.data.masses[i] * (f + self.lin[i] * m);
            for (g, x) in gw.iter_mut().zip(&self.data.xs[i]) {
                *g += c * x;
            }
            gb += c;
        }
        (val, gb)
    }
}

/// Accelerated projected gradient with adaptive restart on the smoothed
/// surrogate, with continuation in the hinge smoothing. Returns the iterate
/// with the best unsmoothed value seen.
fn convex_descent(sur: &Surrogate, r: f64, start: (&[f64], f64), cfg: &SolverConfig) -> Result<(Vec<f64>, f64)> {
    let d = sur.data.dim;
    let curv = sur.data.curvature();
    let mut best_w = start.0.to_vec();
    project_ball(&mut best_w, r);
    let mut best_b = start.1;
    let mut best_val = sur.value(&best_w, best_b);

    let mus: &[f64] = match sur.kind {
        MarginLossKind::Hinge => &[1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7],
        _ => &[1.0],
    };
    let mut x_w = best_w.clone();
    let mut x_b = best_b;
    let mut gw = vec![0.0; d];
    for &mu in mus {
        let lip = match sur.kind {
            MarginLossKind::Hinge => curv / mu,
            _ => curv / 4.0,
        };
        let step = 1.0 / lip;
        let mut y_w = x_w.clone();
        let mut y_b = x_b;
        let mut t = 1.0f64;
        for _ in 0..cfg.max_iters {
            let (fy, gb) = sur.smoothed_grad(&y_w, y_b, mu, &mut gw);
            if !fy.is_finite() {
                return Err(Error::Solver { message: "non-finite objective".into(), w: y_w, b: y_b });
            }
            let mut nw: Vec<f64> = y_w.iter().zip(&gw).map(|(v, g)| v - step * g).collect();
            project_ball(&mut nw, r);
            let nb = y_b - step * gb;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            // Gradient-based restart: momentum points uphill.
            let uphill: f64 =
                gw.iter().zip(nw.iter().zip(&x_w)).map(|(g, (a, o))| g * (a - o)).sum::<f64>() + gb * (nb - x_b);
            let moved = nw.iter().zip(&x_w).map(|(a, o)| (a - o).abs()).fold((nb - x_b).abs(), f64::max);
            if uphill > 0.0 {
                t = 1.0;
                y_w = x_w.clone();
                y_b = x_b;
                continue;
            }
            let beta = (t - 1.0) / t_next;
            y_w = nw.iter().zip(&x_w).map(|(a, o)| a + beta * (a - o)).collect();
            y_b = nb + beta * (nb - x_b);
            x_w = nw;
            x_b = nb;
            t = t_next;
            if moved < cfg.tolerance * 1e-3 {
                break;
            }
        }
        let v = sur.value(&x_w, x_b);
        if v < best_val {
            best_val = v;
            best_w = x_w.clone();
            best_b = x_b;
        }
    }
    Ok((best_w, best_b))
}

/// Concave-convex procedure for the ramp loss, `r(m) = h(m) - max(-m, 0)`.
/// Returns the final iterate and the objective after every outer iteration
/// (non-increasing).
fn cccp(data: &Samples, r: f64, start: (&[f64], f64), cfg: &SolverConfig) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let mut w = start.0.to_vec();
    project_ball(&mut w, r);
    let mut b = start.1;
    let mut cur = data.objective(MarginLossKind::Ramp, &w, b);
    let mut history = vec![cur];
    for _ in 0..50 {
        let lin: Vec<f64> = (0..data.xs.len()).map(|i| if data.margin(i, &w, b) < 0.0 { 1.0 } else { 0.0 }).collect();
        let sur = Surrogate { data, kind: MarginLossKind::Hinge, lin };
        let (nw, nb) = convex_descent(&sur, r, (&w, b), cfg)?;
        let next = data.objective(MarginLossKind::Ramp, &nw, nb);
        if !next.is_finite() {
            return Err(Error::Solver { message: "non-finite ramp objective".into(), w: nw, b: nb });
        }
        if next < cur - cfg.tolerance {
            w = nw;
            b = nb;
            cur = next;
            history.push(cur);
        } else {
            break;
        }
    }
    Ok((w, b, history))
}

fn random_feasible(d: usize, r: f64, bias_scale: f64, rng: &mut rng::Rng) -> (Vec<f64>, f64) {
    let mut w: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let n = norm(&w).max(1e-300);
    let rad = r * rng.random::<f64>().powf(1.0 / d as f64);
    w.iter_mut().for_each(|v| *v *= rad / n);
    let b = rng.random_range(-bias_scale..=bias_scale);
    (w, b)
}

/// Picks the lowest objective; near-ties go to the candidate closest to `anchor`.
fn pick_best(cands: Vec<(Vec<f64>, f64, f64)>, anchor: Option<&(Vec<f64>, f64)>, tol: f64) -> (Vec<f64>, f64, f64) {
    let min = cands.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let key = |c: &(Vec<f64>, f64, f64)| match anchor {
        Some((aw, ab)) => (dist(&c.0, aw), (c.1 - ab).abs()),
        None => (norm(&c.0), c.1.abs()),
    };
    cands
        .into_iter()
        .filter(|c| c.2 <= min + tol)
        .min_by(|a, b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal))
        .expect("at least one candidate")
}

/// Norm-constrained ERM: minimizes the mean margin loss on `data` over
/// `||w|| <= r`. The result is never worse than `warm_start`.
pub fn erm_constrained(
    kind: MarginLossKind,
    data: &DiscreteDistribution,
    r: f64,
    cfg: &SolverConfig,
    warm_start: Option<&LinearModel>,
) -> Result<LinearModel> {
    Ok(erm_constrained_traced(kind, data, r, cfg, warm_start)?.0)
}

/// As [`erm_constrained`], also returning the CCCP objective history of the
/// winning start (a single entry for the convex losses).
pub fn erm_constrained_traced(
    kind: MarginLossKind,
    data: &DiscreteDistribution,
    r: f64,
    cfg: &SolverConfig,
    warm_start: Option<&LinearModel>,
) -> Result<(LinearModel, Vec<f64>)> {
    cfg.validate()?;
    if !(r > 0.0) {
        return arg(format!("norm budget must be positive, got {r}"));
    }
    let s = Samples::from_dist(data);
    let d = s.dim;
    if let Some(ws) = warm_start {
        if ws.dim() != d {
            return Err(Error::Dimension { expected: d, got: ws.dim() });
        }
    }
    let anchor = warm_start.map(|m| {
        let mut w = m.w.clone();
        project_ball(&mut w, r);
        (w, m.b)
    });
    let start0 = anchor.clone().unwrap_or((vec![0.0; d], 0.0));
    let scale = s.xs.iter().map(|x| norm(x)).fold(1.0, f64::max);
    let mut starts = vec![start0.clone()];
    if kind == MarginLossKind::Ramp {
        let mut rg = rng::stream(cfg.seed, 0xC0CC);
        starts.extend((0..cfg.restarts).map(|_| random_feasible(d, r, scale * r, &mut rg)));
    }
    let runs = par::map(&starts, |(w0, b0)| -> Result<(Vec<f64>, f64, f64, Vec<f64>)> {
        match kind {
            MarginLossKind::Ramp => {
                let (w, b, hist) = cccp(&s, r, (w0, *b0), cfg)?;
                let v = *hist.last().unwrap();
                Ok((w, b, v, hist))
            }
            _ => {
                let sur = Surrogate { data: &s, kind, lin: vec![0.0; s.xs.len()] };
                let (w, b) = convex_descent(&sur, r, (w0, *b0), cfg)?;
                let v = s.objective(kind, &w, b);
                Ok((w, b, v, vec![v]))
            }
        }
    });
    let mut cands = Vec::new();
    let mut hists = Vec::new();
    for run in runs {
        let (w, b, v, h) = run?;
        hists.push((w.clone(), b, h));
        cands.push((w, b, v));
    }
    let start_val = s.objective(kind, &start0.0, start0.1);
    cands.push((start0.0.clone(), start0.1, start_val));
    let (w, b, _) = pick_best(cands, anchor.as_ref(), cfg.tolerance);
    let hist = hists
        .into_iter()
        .find(|(hw, hb, _)| *hw == w && *hb == b)
        .map(|(_, _, h)| h)
        .unwrap_or_else(|| vec![start_val]);
    Ok((LinearModel { w, b, norm_budget: Some(r) }, hist))
}

/// Exact piecewise-linear minimization over a box in `(s, b)` for a fixed
/// unit direction `u`: the optimum of a piecewise-linear function over a
/// polygon lies on a vertex of the arrangement of its breakpoint lines.
fn exact_along_direction(
    kind: MarginLossKind,
    proj: &[f64],
    ys: &[f64],
    masses: &[f64],
    r: f64,
    bias: (f64, f64),
    extra: &[(f64, f64)],
) -> Vec<(f64, f64, f64)> {
    let value = |s: f64, b: f64| -> f64 {
        proj.iter().zip(ys).zip(masses).map(|((p, y), m)| m * kind.eval(y * (s * p + b))).sum()
    };
    match kind {
        MarginLossKind::Ramp | MarginLossKind::Hinge => {
            // Lines a*s + c*b = e.
            let mut lines: Vec<(f64, f64, f64)> = Vec::new();
            let levels: &[f64] = if kind == MarginLossKind::Ramp { &[0.0, 1.0] } else { &[1.0] };
            for (p, y) in proj.iter().zip(ys) {
                for &lv in levels {
                    // y (s p + b) = lv  ->  p s + b = lv / y
                    lines.push((*p, 1.0, lv * y));
                }
            }
            lines.push((1.0, 0.0, 0.0));
            lines.push((1.0, 0.0, r));
            lines.push((0.0, 1.0, bias.0));
            lines.push((0.0, 1.0, bias.1));
            let eps = 1e-12;
            let mut out = Vec::new();
            for i in 0..lines.len() {
                for j in i + 1..lines.len() {
                    let (a1, c1, e1) = lines[i];
                    let (a2, c2, e2) = lines[j];
                    let det = a1 * c2 - a2 * c1;
                    if det.abs() < 1e-14 {
                        continue;
                    }
                    let s = (e1 * c2 - e2 * c1) / det;
                    let b = (a1 * e2 - a2 * e1) / det;
                    if s < -eps || s > r + eps || b < bias.0 - eps || b > bias.1 + eps {
                        continue;
                    }
                    let s = s.clamp(0.0, r);
                    let b = b.clamp(bias.0, bias.1);
                    out.push((s, b, value(s, b)));
                }
            }
            for &(s, b) in extra {
                if (0.0..=r).contains(&s) && (bias.0..=bias.1).contains(&b) {
                    out.push((s, b, value(s, b)));
                }
            }
            out
        }
        MarginLossKind::Logistic => {
            // Convex in (s, b): nested golden-section searches.
            let inner = |s: f64| -> (f64, f64) {
                let b = golden(|b| value(s, b), bias.0, bias.1, 100);
                (b, value(s, b))
            };
            let s = golden(|s| inner(s).1, 0.0, r, 100);
            let (b, v) = inner(s);
            vec![(s, b, v)]
        }
    }
}

fn golden(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (lo + hi);
    [(lo, f(lo)), (mid, f(mid)), (hi, f(hi))].into_iter().min_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap().0
}

/// Global minimizer for inputs of dimension one or two.
///
/// In 1-D both directions `w = +-s` are searched exactly. In 2-D the
/// direction ranges over `grid` equally spaced angles plus the angles where
/// the order of projected atoms changes, the axes and the warm start; each
/// direction is solved exactly in `(s, b)`, and the best angle is refined by
/// golden-section search. Ties go to the candidate nearest `warm_start`.
pub fn erm_exact_1d2d(
    kind: MarginLossKind,
    data: &DiscreteDistribution,
    r: f64,
    grid: usize,
    bias_range: (f64, f64),
    warm_start: Option<&LinearModel>,
) -> Result<LinearModel> {
    let d = data.dim();
    if d > 2 || d == 0 {
        return Err(Error::UnsupportedDimension(d));
    }
    if data.len() > 64 {
        return arg(format!("exact solver supports at most 64 atoms, got {}", data.len()));
    }
    if !(r > 0.0) || !(bias_range.0 < bias_range.1) {
        return arg("exact solver needs r > 0 and a nonempty bias range");
    }
    let s = Samples::from_dist(data);
    let anchor = warm_start.map(|m| (m.w.clone(), m.b));
    let solve_dir = |u: &[f64]| -> Vec<(Vec<f64>, f64, f64)> {
        let proj: Vec<f64> = s.xs.iter().map(|x| dot(u, x)).collect();
        let mut extra = Vec::new();
        if let Some((aw, ab)) = &anchor {
            let along = dot(aw, u);
            if along >= 0.0 && dist(aw, &u.iter().map(|v| v * along).collect::<Vec<_>>()) < 1e-12 {
                extra.push((along, *ab));
            }
        }
        exact_along_direction(kind, &proj, &s.ys, &s.masses, r, bias_range, &extra)
            .into_iter()
            .map(|(sc, b, v)| (u.iter().map(|x| x * sc).collect(), b, v))
            .collect()
    };

    let tol = 1e-12;
    let cands: Vec<(Vec<f64>, f64, f64)> = if d == 1 {
        let mut c = solve_dir(&[1.0]);
        c.extend(solve_dir(&[-1.0]));
        c
    } else {
        let mut angles: Vec<f64> =
            (0..grid.max(4)).map(|k| 2.0 * std::f64::consts::PI * k as f64 / grid.max(4) as f64).collect();
        let mut special = vec![0.0, 0.5 * std::f64::consts::PI];
        for i in 0..s.xs.len() {
            special.push(s.xs[i][1].atan2(s.xs[i][0]));
            for j in i + 1..s.xs.len() {
                let dx = s.xs[i][0] - s.xs[j][0];
                let dy = s.xs[i][1] - s.xs[j][1];
                let a = dy.atan2(dx);
                special.push(a);
                special.push(a + 0.5 * std::f64::consts::PI);
            }
        }
        if let Some((aw, _)) = &anchor {
            if norm(aw) > 0.0 {
                special.push(aw[1].atan2(aw[0]));
            }
        }
        for a in special {
            angles.push(a);
            angles.push(a + std::f64::consts::PI);
        }
        let per_angle = par::map(&angles, |&a| solve_dir(&[a.cos(), a.sin()]));
        let mut all: Vec<_> = per_angle.into_iter().flatten().collect();
        // Refine around the best grid angle.
        let step = 2.0 * std::f64::consts::PI / grid.max(4) as f64;
        let best_val = |a: f64| solve_dir(&[a.cos(), a.sin()]).into_iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
        let (bw, _, _) = pick_best(all.clone(), anchor.as_ref(), tol);
        if norm(&bw) > 0.0 {
            let a0 = bw[1].atan2(bw[0]);
            let a = golden(best_val, a0 - step, a0 + step, 60);
            all.extend(solve_dir(&[a.cos(), a.sin()]));
        }
        all
    };
    let mut cands = cands;
    if let Some((aw, ab)) = &anchor {
        if norm(aw) <= r * (1.0 + 1e-12) && (bias_range.0..=bias_range.1).contains(ab) {
            cands.push((aw.clone(), *ab, s.objective(kind, aw, *ab)));
        }
    }
    let (w, b, _) = pick_best(cands, anchor.as_ref(), tol);
    Ok(LinearModel { w, b, norm_budget: Some(r) })
}

/// Dense row-major training set with per-row targets `P(y = +1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub d: usize,
    pub rows: Vec<f64>,
    pub targets: Vec<f64>,
}

impl TrainSet {
    pub fn hard(xs: &[Vec<f64>], ys: &[Label]) -> Result<Self> {
        let targets = ys.iter().map(|y| if *y == Label::Pos { 1.0 } else { 0.0 }).collect();
        Self::soft(xs, targets)
    }

    pub fn soft(xs: &[Vec<f64>], targets: Vec<f64>) -> Result<Self> {
        if xs.is_empty() {
            return arg("training set is empty");
        }
        if xs.len() != targets.len() {
            return arg("targets and inputs differ in length");
        }
        let d = xs[0].len();
        let mut rows = Vec::with_capacity(xs.len() * d);
        for x in xs {
            if x.len() != d {
                return Err(Error::Dimension { expected: d, got: x.len() });
            }
            rows.extend_from_slice(x);
        }
        Ok(Self { d, rows, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 32, seed: 0 }
    }
}

/// Mean cross-entropy plus `lambda ||w||^2`.
pub fn logistic_objective(data: &TrainSet, model: &LinearModel, lambda: f64) -> f64 {
    let n = data.len();
    let sum = par::chunked_sum(n, 512, |i| {
        let z = dot(&model.w, data.row(i)) + model.b;
        let p = data.targets[i];
        // -[p log s(z) + (1-p) log(1 - s(z))] = softplus(z) - p z
        softplus(z) - p * z
    });
    sum / n as f64 + lambda * dot(&model.w, &model.w)
}

/// Mini-batch Adam on mean cross-entropy plus `lambda ||w||^2`, starting at
/// `warm_start` (or zero). Batches follow a seeded shuffle per epoch.
pub fn penalized_logistic(
    data: &TrainSet,
    lambda: f64,
    epochs: usize,
    opts: &LogisticOptions,
    warm_start: Option<&LinearModel>,
) -> Result<LinearModel> {
    if !(lambda >= 0.0) {
        return arg("lambda must be non-negative");
    }
    if epochs == 0 {
        return arg("epochs must be at least 1");
    }
    if data.is_empty() {
        return arg("training set is empty");
    }
    let d = data.d;
    let n = data.len();
    let mut w = warm_start.map(|m| m.w.clone()).unwrap_or_else(|| vec![0.0; d]);
    let mut b = warm_start.map(|m| m.b).unwrap_or(0.0);
    if w.len() != d {
        return Err(Error::Dimension { expected: d, got: w.len() });
    }
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-7);
    let mut m_w = vec![0.0; d];
    let mut v_w = vec![0.0; d];
    let (mut m_b, mut v_b) = (0.0, 0.0);
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rg = rng::stream(opts.seed, 0x10_6157);
    let bs = opts.batch_size.max(1);
    let mut gw = vec![0.0; d];
    for _ in 0..epochs {
        shuffle(&mut order, &mut rg);
        for batch in order.chunks(bs) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for &i in batch {
                let x = data.row(i);
                let z = dot(&w, x) + b;
                let c = sigmoid(z) - data.targets[i];
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += c * xi;
                }
                gb += c;
            }
            let inv = 1.0 / batch.len() as f64;
            step += 1;
            let bc1 = 1.0 - f64::powi(beta1, step);
            let bc2 = 1.0 - f64::powi(beta2, step);
            let lr = opts.learning_rate * bc2.sqrt() / bc1;
            for j in 0..d {
                let g = gw[j] * inv + 2.0 * lambda * w[j];
                m_w[j] = beta1 * m_w[j] + (1.0 - beta1) * g;
                v_w[j] = beta2 * v_w[j] + (1.0 - beta2) * g * g;
                w[j] -= lr * m_w[j] / (v_w[j].sqrt() + eps);
            }
            let g = gb * inv;
            m_b = beta1 * m_b + (1.0 - beta1) * g;
            v_b = beta2 * v_b + (1.0 - beta2) * g * g;
            b -= lr * m_b / (v_b.sqrt() + eps);
        }
        if !b.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver { message: "logistic regression diverged".into(), w, b });
        }
    }
    Ok(LinearModel { w, b, norm_budget: None })
}

fn shuffle(v: &mut [usize], rg: &mut rng::Rng) {
    for i in (1..v.len()).rev() {
        let j = rg.random_range(0..=i);
        v.swap(i, j);
    }
}

/// `mu / ||mu||`.
pub fn w_star(mu: &[f64]) -> Result<Vec<f64>> {
    let n = norm(mu);
    if !(n > 0.0) {
        return arg("w_star of the zero vector");
    }
    Ok(mu.iter().map(|v| v / n).collect())
}

/// Monte-Carlo estimate of `U(w) = E[phi(|w.x|)]` with its standard error.
pub fn unlabeled_objective(phi: MarginLossKind, xs: &[Vec<f64>], w: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sum = par::chunked_sum(xs.len(), 4096, |i| phi.eval(dot(w, &xs[i]).abs()));
    let sq = par::chunked_sum(xs.len(), 4096, |i| phi.eval(dot(w, &xs[i]).abs()).powi(2));
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

fn unlabeled_grad(phi: MarginLossKind, xs: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let d = w.len();
    let n = xs.len();
    let chunk = 4096;
    let parts = par::map_range(n.div_ceil(chunk), |c| {
        let mut g = vec![0.0; d];
        for x in &xs[c * chunk..((c + 1) * chunk).min(n)] {
            let z = dot(w, x);
            let dm = phi.deriv(z.abs());
            if dm != 0.0 {
                let sgn = if z >= 0.0 { 1.0 } else { -1.0 };
                for (gj, xj) in g.iter_mut().zip(x) {
                    *gj += dm * sgn * xj;
                }
            }
        }
        g
    });
    let mut g = vec![0.0; d];
    for p in parts {
        for (a, b) in g.iter_mut().zip(p) {
            *a += b;
        }
    }
    g.iter_mut().for_each(|v| *v /= n as f64);
    g
}

/// Result of [`minimize_unlabeled_gaussian`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledSolution {
    pub w: Vec<f64>,
    pub objective: f64,
    pub std_error: f64,
}

/// Minimizes the Monte-Carlo unlabeled objective over
/// `{||w|| <= ball_r} ∩ trust` by normalized projected subgradient descent,
/// from the trust center and `cfg.restarts` random feasible points.
pub fn minimize_unlabeled_gaussian(
    phi: MarginLossKind,
    domain: &GaussianMixtureDomain,
    ball_r: f64,
    trust: &TrustRegion,
    mc_samples: usize,
    cfg: &SolverConfig,
) -> Result<UnlabeledSolution> {
    cfg.validate()?;
    let d = domain.dim();
    if trust.center.len() != d {
        return Err(Error::Dimension { expected: d, got: trust.center.len() });
    }
    if mc_samples < 1000 {
        return arg("mc_samples must be at least 1000");
    }
    if trust.radius > 1.0 || !(trust.radius > 0.0) {
        return arg("trust radius must lie in (0, 1]");
    }
    let c_norm = norm(&trust.center);
    if c_norm > 1.0 + 1e-12 {
        return arg("trust center must lie in the unit ball");
    }
    if c_norm - trust.radius > ball_r {
        return arg("trust region does not meet the norm ball");
    }
    let xs: Vec<Vec<f64>> = crate::distributions::sample_indexed(mc_samples, cfg.seed, |_| domain.clone())
        .into_iter()
        .map(|p| p.x)
        .collect();
    Ok(minimize_unlabeled_on(phi, &xs, ball_r, trust, cfg))
}

pub(crate) fn minimize_unlabeled_on(
    phi: MarginLossKind,
    xs: &[Vec<f64>],
    ball_r: f64,
    trust: &TrustRegion,
    cfg: &SolverConfig,
) -> UnlabeledSolution {
    let d = trust.center.len();
    let mut starts = vec![trust.center.clone()];
    let mut rg = rng::stream(cfg.seed, 0x7_2057);
    for _ in 0..cfg.restarts {
        let (mut w, _) = random_feasible(d, trust.radius, 0.0, &mut rg);
        w.iter_mut().zip(&trust.center).for_each(|(a, c)| *a += c);
        starts.push(w);
    }
    let mut sols = Vec::new();
    for start in starts {
        let mut w = start;
        project_intersection(&mut w, ball_r, trust);
        let mut best = (w.clone(), unlabeled_objective(phi, xs, &w).0);
        for k in 0..cfg.max_iters.min(400) {
            let g = unlabeled_grad(phi, xs, &w);
            let gn = norm(&g);
            if gn == 0.0 {
                break;
            }
            let step = cfg.step(k);
            w.iter_mut().zip(&g).for_each(|(a, gj)| *a -= step * gj / gn);
            project_intersection(&mut w, ball_r, trust);
            let v = unlabeled_objective(phi, xs, &w).0;
            if v < best.1 {
                best = (w.clone(), v);
            }
        }
        sols.push(best);
    }
    let min = sols.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let (w, _) = sols
        .into_iter()
        .filter(|s| s.1 <= min + cfg.tolerance)
        .min_by(|a, b| dist(&a.0, &trust.center).partial_cmp(&dist(&b.0, &trust.center)).unwrap())
        .unwrap();
    let (objective, std_error) = unlabeled_objective(phi, xs, &w);
    UnlabeledSolution { w, objective, std_error }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::LabeledPoint;

    fn dist_of(pts: &[(&[f64], i8, f64)]) -> DiscreteDistribution {
        DiscreteDistribution::normalized(
            pts.iter().map(|(x, y, m)| (LabeledPoint::new(x.to_vec(), Label::try_from(*y).unwrap()), *m)),
        )
        .unwrap()
    }

    #[test]
    fn projection_onto_ball() {
        let mut w = vec![3.0, 4.0];
        project_ball(&mut w, 1.0);
        assert!((norm(&w) - 1.0).abs() < 1e-15);
        let mut v = vec![0.1, 0.2];
        project_ball(&mut v, 1.0);
        assert_eq!(v, vec![0.1, 0.2]);
    }

    #[test]
    fn intersection_projection_satisfies_both() {
        let tr = TrustRegion::new(vec![1.0, 0.0], 0.5).unwrap();
        for p in [[2.0, 2.0], [-1.0, 0.0], [0.9, 0.9], [5.0, -0.1]] {
            let mut w = p.to_vec();
            project_intersection(&mut w, 1.0, &tr);
            assert!(norm(&w) <= 1.0 + 1e-9, "{w:?}");
            assert!(dist(&w, &tr.center) <= 0.5 * (1.0 + 1e-9), "{w:?}");
        }
    }

    #[test]
    fn hinge_flipped_pseudolabels_reach_zero() {
        // Baselines example: target atoms with every pseudolabel wrong.
        let data = dist_of(&[(&[1.0, -1.0 / 3.0], -1, 0.5), (&[-1.0, 1.0 / 3.0], 1, 0.5)]);
        let m = erm_constrained(MarginLossKind::Hinge, &data, 1.0, &SolverConfig::default(), None).unwrap();
        let obj = erm_objective(MarginLossKind::Hinge, &data, &m).unwrap();
        assert!(obj < 1e-4, "objective {obj}");
        for a in data.atoms() {
            assert_eq!(Label::from_score(m.score_unchecked(&a.point.x)), a.point.y);
        }
    }

    #[test]
    fn single_atom_zero_loss() {
        let data = dist_of(&[(&[1.0], 1, 1.0)]);
        for kind in [MarginLossKind::Ramp, MarginLossKind::Hinge] {
            let m = erm_constrained(kind, &data, 1.0, &SolverConfig::default(), None).unwrap();
            assert!(erm_objective(kind, &data, &m).unwrap() < 1e-6);
            let e = erm_exact_1d2d(kind, &data, 1.0, 64, (-12.0, 12.0), None).unwrap();
            assert_eq!(erm_objective(kind, &data, &e).unwrap(), 0.0);
        }
    }

    #[test]
    fn exact_rejects_three_dims() {
        let data = dist_of(&[(&[1.0, 0.0, 0.0], 1, 1.0)]);
        assert!(matches!(
            erm_exact_1d2d(MarginLossKind::Ramp, &data, 1.0, 16, (-1.0, 1.0), None),
            Err(Error::UnsupportedDimension(3))
        ));
    }

    #[test]
    fn cccp_history_is_monotone() {
        let data =
            dist_of(&[(&[-10.0], -1, 0.5), (&[0.0], 1, 0.2), (&[1.0], 1, 0.15), (&[10.0], 1, 0.15), (&[0.3], -1, 0.1)]);
        let warm = LinearModel::unbounded(vec![1.0], -0.05);
        let (_, hist) =
            erm_constrained_traced(MarginLossKind::Ramp, &data, 1.0, &SolverConfig::default(), Some(&warm)).unwrap();
        assert!(hist.windows(2).all(|w| w[1] <= w[0]), "{hist:?}");
    }

    #[test]
    fn ramp_never_worse_than_warm_start() {
        let data = dist_of(&[(&[0.2], 1, 0.3), (&[-0.4], 1, 0.3), (&[1.5], -1, 0.4)]);
        let warm = LinearModel::unbounded(vec![0.7], 0.1);
        let before = erm_objective(MarginLossKind::Ramp, &data, &warm).unwrap();
        let m = erm_constrained(MarginLossKind::Ramp, &data, 1.0, &SolverConfig::default(), Some(&warm)).unwrap();
        assert!(erm_objective(MarginLossKind::Ramp, &data, &m).unwrap() <= before + 1e-12);
    }

    #[test]
    fn logistic_separable_and_shrinkage() {
        let xs = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let ys = vec![Label::Pos, Label::Neg];
        let ts = TrainSet::hard(&xs, &ys).unwrap();
        let opts = LogisticOptions { learning_rate: 0.05, batch_size: 2, seed: 1 };
        let m = penalized_logistic(&ts, 0.0, 200, &opts, None).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(Label::from_score(m.score_unchecked(x)), *y);
        }
        let big = penalized_logistic(&ts, 1e6, 200, &LogisticOptions::default(), None).unwrap();
        assert!(big.w_norm() <= 1e-2, "{}", big.w_norm());
    }

    #[test]
    fn logistic_is_deterministic() {
        let xs: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64).cos()]).collect();
        let ys: Vec<Label> = xs.iter().map(|x| Label::from_score(x[0])).collect();
        let ts = TrainSet::hard(&xs, &ys).unwrap();
        let a = penalized_logistic(&ts, 0.02, 5, &LogisticOptions::default(), None).unwrap();
        let b = penalized_logistic(&ts, 0.02, 5, &LogisticOptions::default(), None).unwrap();
        assert_eq!(a, b);
        assert!(penalized_logistic(&ts, -1.0, 5, &LogisticOptions::default(), None).is_err());
        assert!(penalized_logistic(&ts, 0.0, 0, &LogisticOptions::default(), None).is_err());
    }

    #[test]
    fn w_star_basics() {
        assert_eq!(w_star(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(w_star(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(w_star(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn w_star_is_lipschitz() {
        let mut rg = rng::seeded(5);
        for _ in 0..1000 {
            let mut draw = || -> Vec<f64> {
                loop {
                    let v: Vec<f64> = (0..3).map(|_| rg.random_range(-4.0..4.0)).collect();
                    if norm(&v) >= 1.0 {
                        return v;
                    }
                }
            };
            let (a, b) = (draw(), draw());
            let lhs = dist(&w_star(&a).unwrap(), &w_star(&b).unwrap());
            assert!(lhs <= dist(&a, &b) / 1.0 + 1e-12);
        }
    }

    #[test]
    fn unlabeled_degenerate_axis() {
        let dom = GaussianMixtureDomain::isotropic_symmetric(vec![1.0, 0.0], 1e-6).unwrap();
        let tr = TrustRegion::new(vec![1.0, 0.0], 0.5).unwrap();
        let cfg = SolverConfig { restarts: 2, ..SolverConfig::default() };
        let sol = minimize_unlabeled_gaussian(MarginLossKind::Ramp, &dom, 1.0, &tr, 2000, &cfg).unwrap();
        assert!(dist(&sol.w, &[1.0, 0.0]) < 1e-3, "{:?}", sol.w);
    }

    #[test]
    fn unlabeled_rejects_infeasible_trust() {
        let dom = GaussianMixtureDomain::isotropic_symmetric(vec![1.0, 0.0], 0.5).unwrap();
        let tr = TrustRegion { center: vec![1.0, 0.0], radius: 0.5 };
        let cfg = SolverConfig::default();
        assert!(minimize_unlabeled_gaussian(MarginLossKind::Ramp, &dom, 0.25, &tr, 2000, &cfg).is_err());
        assert!(minimize_unlabeled_gaussian(MarginLossKind::Ramp, &dom, 1.0, &tr, 10, &cfg).is_err());
    }

    fn doubling_example() -> DiscreteDistribution {
        let delta = 0.06 / 3.0;
        let a = 0.2 / (1.0 + delta);
        dist_of(&[(&[-10.0], -1, 0.5), (&[0.0], 1, a), (&[1.0], 1, a - delta), (&[10.0], 1, 0.5 - 2.0 * a + delta)])
    }

    fn grid_optimum(kind: MarginLossKind, data: &DiscreteDistribution) -> f64 {
        let s = Samples::from_dist(data);
        let ws: Vec<f64> = (0..2001).map(|i| -1.0 + 2.0 * i as f64 / 2000.0).collect();
        par::map(&ws, |&w| {
            (0..2001).map(|j| s.objective(kind, &[w], -12.0 + 24.0 * j as f64 / 2000.0)).fold(f64::INFINITY, f64::min)
        })
        .into_iter()
        .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn cccp_matches_grid_oracle() {
        let truth = doubling_example();
        let delta = 0.02;
        let warm = LinearModel::unbounded(vec![1.0], -delta);
        let pseudo = truth.relabeled(|x| Label::from_score(x[0] - delta));
        for data in [&truth, &pseudo] {
            let grid = grid_optimum(MarginLossKind::Ramp, data);
            for start in [None, Some(&warm)] {
                let m = erm_constrained(MarginLossKind::Ramp, data, 1.0, &SolverConfig::default(), start).unwrap();
                let v = erm_objective(MarginLossKind::Ramp, data, &m).unwrap();
                assert!((v - grid).abs() <= 1e-3, "cccp {v} vs grid {grid}");
            }
            let e = erm_exact_1d2d(MarginLossKind::Ramp, data, 1.0, 64, (-12.0, 12.0), Some(&warm)).unwrap();
            let v = erm_objective(MarginLossKind::Ramp, data, &e).unwrap();
            assert!(v <= grid + 1e-12, "exact {v} vs grid {grid}");
        }
    }

    #[test]
    fn convex_path_matches_exact_solver() {
        let mut rg = rng::seeded(11);
        for case in 0..40 {
            let d = 1 + case % 2;
            let n = rg.random_range(2..7);
            let pts: Vec<(Vec<f64>, i8, f64)> = (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..d).map(|_| rg.random_range(-2.0..2.0)).collect();
                    (x, if rg.random::<bool>() { 1 } else { -1 }, rg.random_range(0.1..1.0))
                })
                .collect();
            let data = DiscreteDistribution::normalized(
                pts.iter().map(|(x, y, m)| (LabeledPoint::new(x.clone(), Label::try_from(*y).unwrap()), *m)),
            )
            .unwrap();
            for kind in [MarginLossKind::Hinge, MarginLossKind::Logistic] {
                let m = erm_constrained(kind, &data, 1.0, &SolverConfig::default(), None).unwrap();
                let e = erm_exact_1d2d(kind, &data, 1.0, 720, (-30.0, 30.0), None).unwrap();
                let vm = erm_objective(kind, &data, &m).unwrap();
                let ve = erm_objective(kind, &data, &e).unwrap();
                assert!((vm - ve).abs() <= 1e-4, "case {case} {kind:?}: descent {vm} exact {ve}");
            }
        }
    }

    #[test]
    fn unlabeled_recovers_mean_direction() {
        let mut mu = vec![0.0; 3];
        mu[0] = 2.0;
        let dom = GaussianMixtureDomain::isotropic_symmetric(mu.clone(), 0.5).unwrap();
        let center = w_star(&mu).unwrap();
        let tr = TrustRegion::new(center.clone(), 0.5).unwrap();
        let cfg = SolverConfig { seed: 3, ..SolverConfig::default() };
        let a = minimize_unlabeled_gaussian(MarginLossKind::Ramp, &dom, 1.0, &tr, 200_000, &cfg).unwrap();
        assert!(dist(&a.w, &center) < 0.05, "{:?}", a.w);
        let b = minimize_unlabeled_gaussian(MarginLossKind::Ramp, &dom, 1.0, &tr, 200_000, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unlabeled_value_is_stable_under_more_samples() {
        let dom = GaussianMixtureDomain::isotropic_symmetric(vec![1.0, 0.5], 0.5).unwrap();
        let tr = TrustRegion::new(vec![0.6, 0.6], 0.5).unwrap();
        let cfg = SolverConfig { seed: 9, restarts: 2, ..SolverConfig::default() };
        let a = minimize_unlabeled_gaussian(MarginLossKind::Ramp, &dom, 1.0, &tr, 20_000, &cfg).unwrap();
        let b = minimize_unlabeled_gaussian(MarginLossKind::Ramp, &dom, 1.0, &tr, 40_000, &cfg).unwrap();
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.objective - b.objective).abs() <= 3.0 * se, "{a:?} {b:?}");
    }
}
