//! Generators for gradually shifting domain sequences and for the discrete
//! counterexample constructions used by the verification harness.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    read_csv, sample_indexed, write_labeled_csv, write_unlabeled_csv, DiscreteDistribution, DomainSequence,
    GaussianMixtureDomain, Label, LabeledPoint, PointCloud, SequenceMeta,
};
use crate::error::{arg, Error, Result};
use crate::models::LinearModel;
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianDriftSpec {
    pub d: usize,
    pub n_labeled: usize,
    pub n_unlabeled_total: usize,
    pub min_var: f64,
    pub max_var: f64,
    pub n_target_eval: usize,
    /// Size of the unlabeled target pool; defaults to `n_unlabeled_total`.
    pub n_target_unlabeled: Option<usize>,
    /// Class means are drawn from `N(0, mean_scale^2 I)`.
    pub mean_scale: f64,
    pub seed: u64,
}

impl Default for GaussianDriftSpec {
    fn default() -> Self {
        Self {
            d: 100,
            n_labeled: 500,
            n_unlabeled_total: 5000,
            min_var: 0.05,
            max_var: 0.1,
            n_target_eval: 1000,
            n_target_unlabeled: None,
            mean_scale: 1.0,
            seed: 0,
        }
    }
}

impl GaussianDriftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return arg("d must be at least 1");
        }
        if !(self.min_var > 0.0 && self.min_var <= self.max_var) {
            return arg(format!("need 0 < min_var <= max_var, got {} and {}", self.min_var, self.max_var));
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return arg("mean_scale must be positive");
        }
        if self.n_labeled == 0 || self.n_target_eval == 0 {
            return arg("sample sizes must be at least 1");
        }
        Ok(())
    }
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q.
pub fn haar_orthogonal(d: usize, rg: &mut rng::Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rg.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn random_covariance(d: usize, min_var: f64, max_var: f64, rg: &mut rng::Rng) -> DMatrix<f64> {
    let u = haar_orthogonal(d, rg);
    let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |_, _| rg.random_range(min_var..=max_var)));
    let s = &u * diag * u.transpose();
    // Symmetrize away rounding.
    (&s + s.transpose()) * 0.5
}

/// Random source and target laws: class means from N(0, I), covariances
/// U D U^T with D uniform in `[min_var, max_var]`, balanced prior.
pub fn gaussian_endpoints(
    d: usize,
    min_var: f64,
    max_var: f64,
    seed: u64,
) -> Result<(GaussianMixtureDomain, GaussianMixtureDomain)> {
    gaussian_endpoints_scaled(d, min_var, max_var, 1.0, seed)
}

/// As [`gaussian_endpoints`] with means drawn from `N(0, mean_scale^2 I)`.
pub fn gaussian_endpoints_scaled(
    d: usize,
    min_var: f64,
    max_var: f64,
    mean_scale: f64,
    seed: u64,
) -> Result<(GaussianMixtureDomain, GaussianMixtureDomain)> {
    let mut rg = rng::stream(seed, 1);
    let mut mean = || -> Vec<f64> { (0..d).map(|_| mean_scale * rg.sample::<f64, _>(StandardNormal)).collect() };
    let (m0p, m0n, m1p, m1n) = (mean(), mean(), mean(), mean());
    let mut rg = rng::stream(seed, 2);
    let mut cov = || random_covariance(d, min_var, max_var, &mut rg);
    let (s0p, s0n, s1p, s1n) = (cov(), cov(), cov(), cov());
    Ok((GaussianMixtureDomain::new(m0p, m0n, s0p, s0n, 0.5)?, GaussianMixtureDomain::new(m1p, m1n, s1p, s1n, 0.5)?))
}

fn strip(points: Vec<LabeledPoint>) -> (Vec<Vec<f64>>, Vec<Label>) {
    points.into_iter().map(|p| (p.x, p.y)).unzip()
}

/// Source, one unlabeled point per interpolation step `i/T` (i = 1..T),
/// a target pool and a held-out target set.
pub fn gen_gaussian_drift(spec: &GaussianDriftSpec) -> Result<DomainSequence> {
    spec.validate()?;
    let (src, tgt) = gaussian_endpoints_scaled(spec.d, spec.min_var, spec.max_var, spec.mean_scale, spec.seed)?;
    let t_total = spec.n_unlabeled_total;
    let laws: Vec<GaussianMixtureDomain> = par::map_range(t_total, |i| {
        src.interpolate(&tgt, (i + 1) as f64 / t_total as f64).expect("interpolated covariance is PSD")
    });
    let source = sample_indexed(spec.n_labeled, rng::derive(spec.seed, 3), |_| src.clone());
    let (inter, truth) = strip(sample_indexed(t_total, rng::derive(spec.seed, 4), |i| laws[i].clone()));
    let n_tu = spec.n_target_unlabeled.unwrap_or(t_total);
    let (target_unlabeled, _) = strip(sample_indexed(n_tu, rng::derive(spec.seed, 5), |_| tgt.clone()));
    let target_eval = sample_indexed(spec.n_target_eval, rng::derive(spec.seed, 6), |_| tgt.clone());
    Ok(DomainSequence {
        source_labeled: source,
        intermediate_unlabeled: vec![inter],
        target_unlabeled,
        target_eval,
        intermediate_truth: Some(vec![truth]),
        metadata: SequenceMeta {
            generator: "gaussian_drift".into(),
            params: serde_json::to_value(spec)?,
            seed: spec.seed,
        },
    })
}

/// `n` draws where each point independently comes from `target` with
/// probability `weight`, else from `source`.
pub fn mixing_sample(
    source: &GaussianMixtureDomain,
    target: &GaussianMixtureDomain,
    weight: f64,
    n: usize,
    seed: u64,
) -> Vec<LabeledPoint> {
    par::map_range(n, |i| {
        let mut r = rng::stream(seed, i as u64);
        let from_target = r.random::<f64>() < weight;
        if from_target {
            target.draw(&mut r)
        } else {
            source.draw(&mut r)
        }
    })
}

/// Domains `i = 1..=n_domains` mix the endpoint laws with weights
/// `(K - i)/K` and `i/K`. Points are never interpolated.
pub fn gen_mixing_interpolation(
    source_domain: &GaussianMixtureDomain,
    target_domain: &GaussianMixtureDomain,
    n_domains: usize,
    n_per_domain: usize,
    seed: u64,
) -> Result<DomainSequence> {
    if n_domains == 0 || n_per_domain == 0 {
        return arg("n_domains and n_per_domain must be at least 1");
    }
    if source_domain.dim() != target_domain.dim() {
        return Err(Error::Dimension { expected: source_domain.dim(), got: target_domain.dim() });
    }
    let mut inter = Vec::with_capacity(n_domains);
    let mut truth = Vec::with_capacity(n_domains);
    for i in 1..=n_domains {
        let w = i as f64 / n_domains as f64;
        let (xs, ys) =
            strip(mixing_sample(source_domain, target_domain, w, n_per_domain, rng::derive(seed, 100 + i as u64)));
        inter.push(xs);
        truth.push(ys);
    }
    let source = sample_indexed(n_per_domain, rng::derive(seed, 3), |_| source_domain.clone());
    let (target_unlabeled, _) =
        strip(sample_indexed(n_domains * n_per_domain, rng::derive(seed, 5), |_| target_domain.clone()));
    let target_eval = sample_indexed(n_per_domain.max(1000), rng::derive(seed, 6), |_| target_domain.clone());
    Ok(DomainSequence {
        source_labeled: source,
        intermediate_unlabeled: inter,
        target_unlabeled,
        target_eval,
        intermediate_truth: Some(truth),
        metadata: SequenceMeta {
            generator: "mixing_interpolation".into(),
            params: serde_json::json!({ "n_domains": n_domains, "n_per_domain": n_per_domain }),
            seed,
        },
    })
}

/// Mixing sequence whose endpoints are drawn as in [`gen_gaussian_drift`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingSpec {
    pub d: usize,
    pub n_domains: usize,
    pub n_per_domain: usize,
    pub min_var: f64,
    pub max_var: f64,
    pub seed: u64,
}

impl Default for MixingSpec {
    fn default() -> Self {
        Self { d: 100, n_domains: 10, n_per_domain: 500, min_var: 0.05, max_var: 0.1, seed: 0 }
    }
}

pub fn gen_mixing_from_spec(spec: &MixingSpec) -> Result<DomainSequence> {
    let (src, tgt) = gaussian_endpoints(spec.d, spec.min_var, spec.max_var, spec.seed)?;
    let mut seq = gen_mixing_interpolation(&src, &tgt, spec.n_domains, spec.n_per_domain, spec.seed)?;
    seq.metadata.params = serde_json::to_value(spec)?;
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotationSpec {
    pub n_points: usize,
    pub n_domains: usize,
    pub total_angle_deg: f64,
    pub radius_band: (f64, f64),
    pub seed: u64,
}

impl Default for RotationSpec {
    fn default() -> Self {
        Self { n_points: 200, n_domains: 12, total_angle_deg: 60.0, radius_band: (4.0, 5.0), seed: 0 }
    }
}

fn rotate(x: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    vec![c * x[0] - s * x[1], s * x[0] + c * x[1]]
}

/// Two-class point cloud in the plane. Positives have polar angle
/// `15 + 150 sqrt(u)` degrees (density rising towards 165 degrees), negatives
/// are the same law turned by 180 degrees; radii are uniform in the band.
fn rotation_base(n: usize, band: (f64, f64), seed: u64) -> Vec<LabeledPoint> {
    par::map_range(n, |i| {
        let mut r = rng::stream(seed, i as u64);
        let y = if r.random::<bool>() { Label::Pos } else { Label::Neg };
        let deg = 15.0 + 150.0 * r.random::<f64>().sqrt() + if y == Label::Neg { 180.0 } else { 0.0 };
        let rad = if band.0 == band.1 { band.0 } else { r.random_range(band.0..=band.1) };
        let a = deg.to_radians();
        LabeledPoint::new(vec![rad * a.cos(), rad * a.sin()], y)
    })
}

/// Domain `t` (1..=n_domains) is the base cloud turned by `t * total/n_domains`.
pub fn gen_rotation_drift(
    n_points: usize,
    n_domains: usize,
    total_angle_deg: f64,
    radius_band: (f64, f64),
    seed: u64,
) -> Result<DomainSequence> {
    if !(0.0..180.0).contains(&total_angle_deg) {
        return arg(format!("total angle must lie in [0, 180), got {total_angle_deg}"));
    }
    if !(radius_band.0 > 0.0 && radius_band.0 <= radius_band.1) {
        return arg("radius band must satisfy 0 < lo <= hi");
    }
    if n_points == 0 || n_domains == 0 {
        return arg("n_points and n_domains must be at least 1");
    }
    let base = rotation_base(n_points, radius_band, rng::derive(seed, 1));
    let step = total_angle_deg.to_radians() / n_domains as f64;
    let turned = |t: usize| -> Vec<LabeledPoint> {
        base.iter().map(|p| LabeledPoint::new(rotate(&p.x, step * t as f64), p.y)).collect()
    };
    let mut inter = Vec::new();
    let mut truth = Vec::new();
    for t in 1..=n_domains {
        let (xs, ys) = strip(turned(t));
        inter.push(xs);
        truth.push(ys);
    }
    let total = total_angle_deg.to_radians();
    let target_eval: Vec<LabeledPoint> = rotation_base(n_points.max(1000), radius_band, rng::derive(seed, 2))
        .into_iter()
        .map(|p| LabeledPoint::new(rotate(&p.x, total), p.y))
        .collect();
    Ok(DomainSequence {
        source_labeled: base,
        target_unlabeled: inter.last().cloned().unwrap_or_default(),
        intermediate_unlabeled: inter,
        target_eval,
        intermediate_truth: Some(truth),
        metadata: SequenceMeta {
            generator: "rotation_drift".into(),
            params: serde_json::json!({
                "n_points": n_points,
                "n_domains": n_domains,
                "total_angle_deg": total_angle_deg,
                "radius_band": [radius_band.0, radius_band.1],
            }),
            seed,
        },
    })
}

pub fn gen_rotation_from_spec(spec: &RotationSpec) -> Result<DomainSequence> {
    gen_rotation_drift(spec.n_points, spec.n_domains, spec.total_angle_deg, spec.radius_band, spec.seed)
}

/// Upper bound on per-step W-infinity of a rotation sequence.
pub fn rotation_step_bound(spec: &RotationSpec) -> f64 {
    let half = 0.5 * spec.total_angle_deg.to_radians() / spec.n_domains as f64;
    2.0 * spec.radius_band.1 * half.sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CounterexampleSpec {
    BaselinesFail,
    Exponential { alpha0: f64, t: usize },
    HingeBad { alpha: f64 },
    NoShiftDoubling { alpha0: f64, epsilon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Eq,
    Le,
    Ge,
}

/// A value the construction is claimed to produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub name: String,
    pub relation: Relation,
    pub value: f64,
}

impl Claim {
    fn new(name: &str, relation: Relation, value: f64) -> Self {
        Self { name: name.into(), relation, value }
    }

    pub fn holds(&self, measured: f64, tol: f64) -> bool {
        match self.relation {
            Relation::Eq => (measured - self.value).abs() <= tol,
            Relation::Le => measured <= self.value + tol,
            Relation::Ge => measured >= self.value - tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectations {
    /// Claimed consecutive `rho` values (`rho_relation` says how they compare).
    pub rho: Vec<f64>,
    pub rho_relation: Relation,
    pub claims: Vec<Claim>,
    /// A model with zero loss on every domain.
    pub witness: LinearModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub spec: CounterexampleSpec,
    pub domains: Vec<DiscreteDistribution>,
    pub theta0: LinearModel,
    pub r: f64,
    pub expected: Expectations,
}

/// `S`, the step weights `w_0..=w_S` and the geometry of the
/// exponential-growth construction: chunks of positive mass travel from
/// `x = 1` to `x = 1 - rho` and then to the misclassified cluster at
/// `x = 1 - 2 rho`.
///
/// `rho` is chosen so that keeping the current classifier stays the global
/// minimizer of the pseudolabeled ramp loss. With `kappa` the largest ratio
/// of a moving chunk to the cluster it joins, that needs
/// `rho >= 1 / (2 - kappa)`; the midpoint between that value and 1 is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentialParams {
    pub s: usize,
    pub weights: Vec<f64>,
    pub kappa: f64,
    pub rho: f64,
}

impl ExponentialParams {
    pub fn cluster(&self) -> f64 {
        1.0 - 2.0 * self.rho
    }

    pub fn waypoint(&self) -> f64 {
        1.0 - self.rho
    }
}

pub fn exponential_params(alpha0: f64) -> Result<ExponentialParams> {
    if !(alpha0 > 0.0 && alpha0 <= 0.25) {
        return arg(format!("alpha0 must lie in (0, 1/4], got {alpha0}"));
    }
    let mut s = 1usize;
    while ((2f64).powi(s as i32) + 0.5) * alpha0 < 0.5 {
        s += 1;
    }
    let mut weights: Vec<f64> = (0..s).map(|i| 0.5 * (2f64).powi(i as i32) * alpha0).collect();
    weights.push(0.5 - ((2f64).powi(s as i32 - 1) + 0.5) * alpha0);
    let mut cluster = alpha0;
    let mut kappa: f64 = 0.0;
    for w in &weights {
        kappa = kappa.max(w / cluster);
        cluster += w;
    }
    let rho = 0.5 * (1.0 + 1.0 / (2.0 - kappa));
    Ok(ExponentialParams { s, weights, kappa, rho })
}

fn atoms_1d(pts: &[(f64, Label, f64)]) -> Result<DiscreteDistribution> {
    DiscreteDistribution::new(pts.iter().filter(|p| p.2 > 0.0).map(|&(x, y, m)| (LabeledPoint::new(vec![x], y), m)))
}

fn atoms_2d(pts: &[([f64; 2], Label, f64)]) -> Result<DiscreteDistribution> {
    DiscreteDistribution::new(pts.iter().map(|&(x, y, m)| (LabeledPoint::new(x.to_vec(), y), m)))
}

fn exponential_domain(p: &ExponentialParams, alpha0: f64, k: usize) -> Result<DiscreteDistribution> {
    use Label::*;
    let s = p.s;
    let k = k.min(2 * s + 2);
    let t = k / 2;
    let moved: f64 = alpha0 + p.weights[..t.min(s + 1)].iter().sum::<f64>();
    let mut pts = vec![(-10.0, Neg, 0.5), (p.cluster(), Pos, moved)];
    let first_far = if k % 2 == 1 {
        pts.push((p.waypoint(), Pos, p.weights[t]));
        t + 1
    } else {
        t
    };
    let far: f64 = p.weights.iter().skip(first_far).sum();
    pts.push((1.0, Pos, far));
    atoms_1d(&pts)
}

fn q_delta(delta: f64, a0: f64) -> Result<DiscreteDistribution> {
    use Label::*;
    let far = (1.0 - a0) / a0;
    atoms_2d(&[
        ([delta, 1.0], Pos, (1.0 - a0) / 2.0),
        ([-0.5, far], Pos, a0 / 2.0),
        ([-delta, -1.0], Neg, (1.0 - a0) / 2.0),
        ([0.5, -far], Neg, a0 / 2.0),
    ])
}

/// Builds one of the counterexample constructions with its claimed values.
pub fn gen_counterexample(spec: &CounterexampleSpec) -> Result<Counterexample> {
    use Label::*;
    use Relation::*;
    match *spec {
        CounterexampleSpec::BaselinesFail => {
            let third = 1.0 / 3.0;
            let domains = vec![
                atoms_2d(&[([1.0, 1.0], Pos, 0.5), ([-1.0, -1.0], Neg, 0.5)])?,
                atoms_2d(&[([1.0, third], Pos, 0.5), ([-1.0, -third], Neg, 0.5)])?,
                atoms_2d(&[([1.0, -third], Pos, 0.5), ([-1.0, third], Neg, 0.5)])?,
            ];
            Ok(Counterexample {
                spec: *spec,
                domains,
                theta0: LinearModel::new(vec![0.0, 1.0], 0.0, Some(1.0))?,
                r: 1.0,
                expected: Expectations {
                    rho: vec![2.0 / 3.0; 2],
                    rho_relation: Eq,
                    claims: vec![
                        Claim::new("source_loss", Eq, 0.0),
                        Claim::new("target_loss", Eq, 1.0),
                        Claim::new("direct_st_loss", Eq, 1.0),
                        Claim::new("witness_loss", Eq, 0.0),
                    ],
                    witness: LinearModel::new(vec![1.0, 0.0], 0.0, Some(1.0))?,
                },
            })
        }
        CounterexampleSpec::Exponential { alpha0, t } => {
            if t == 0 {
                return arg("T must be at least 1");
            }
            let p = exponential_params(alpha0)?;
            let domains = (0..=2 * t).map(|k| exponential_domain(&p, alpha0, k)).collect::<Result<Vec<_>>>()?;
            let bound = (0.5 * (2f64).powi(t as i32) * alpha0).min(0.5);
            Ok(Counterexample {
                spec: *spec,
                domains,
                theta0: LinearModel::new(vec![1.0], 0.0, Some(1.0))?,
                r: 1.0,
                expected: Expectations {
                    rho: vec![p.rho; 2 * t],
                    rho_relation: Le,
                    claims: vec![
                        Claim::new("source_loss", Le, alpha0),
                        Claim::new("final_loss", Ge, bound),
                        Claim::new("witness_loss", Eq, 0.0),
                    ],
                    witness: LinearModel::unbounded(vec![1.0], 5.0),
                },
            })
        }
        CounterexampleSpec::HingeBad { alpha } => {
            if !(alpha > 0.0) {
                return arg("alpha must be positive");
            }
            let a0 = (0.5f64).min(2.0 * alpha / 3.0);
            let domains = vec![q_delta(1.0, a0)?, q_delta(1.0 / 3.0, a0)?, q_delta(-1.0 / 3.0, a0)?];
            Ok(Counterexample {
                spec: *spec,
                domains,
                theta0: LinearModel::new(vec![1.0, 0.0], 0.0, Some(1.0))?,
                r: 1.0,
                expected: Expectations {
                    rho: vec![2.0 / 3.0; 2],
                    rho_relation: Le,
                    claims: vec![
                        Claim::new("source_hinge", Eq, 1.5 * a0),
                        Claim::new("source_hinge_vs_alpha", Le, alpha),
                        Claim::new("final_error", Eq, 1.0),
                        Claim::new("witness_hinge", Eq, 0.0),
                    ],
                    witness: LinearModel::new(vec![0.0, 1.0], 0.0, Some(1.0))?,
                },
            })
        }
        CounterexampleSpec::NoShiftDoubling { alpha0, epsilon } => {
            if !(0.0 < epsilon && epsilon < alpha0 && alpha0 < 0.25) {
                return arg(format!("need 0 < epsilon < alpha0 < 1/4, got epsilon={epsilon}, alpha0={alpha0}"));
            }
            let delta = epsilon / 3.0;
            let a = alpha0 / (1.0 + delta);
            let dist = atoms_1d(&[
                (-10.0, Neg, 0.5),
                (0.0, Pos, a),
                (1.0, Pos, a - delta),
                (10.0, Pos, 0.5 - 2.0 * a + delta),
            ])?;
            Ok(Counterexample {
                spec: *spec,
                domains: vec![dist],
                theta0: LinearModel::new(vec![1.0], -delta, Some(1.0))?,
                r: 1.0,
                expected: Expectations {
                    rho: vec![],
                    rho_relation: Eq,
                    claims: vec![
                        Claim::new("source_loss", Eq, alpha0 - delta * delta),
                        Claim::new("doubled_loss", Ge, 2.0 * alpha0 - epsilon),
                        Claim::new("linear_bound", Le, 2.0 * alpha0),
                    ],
                    witness: LinearModel::unbounded(vec![1.0], 1.0),
                },
            })
        }
    }
}

/// What `gen` can produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenSpec {
    GaussianDrift(GaussianDriftSpec),
    Mixing(MixingSpec),
    Rotation(RotationSpec),
    Counterexample { construction: CounterexampleSpec },
}

/// Writes `source.csv`, `inter_0001.csv`..., `target_unlabeled.csv`,
/// `target_eval.csv` and `meta.json`.
pub fn write_sequence_dir(seq: &DomainSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_labeled_csv(&dir.join("source.csv"), &seq.source_labeled)?;
    for (i, xs) in seq.intermediate_unlabeled.iter().enumerate() {
        write_unlabeled_csv(&dir.join(format!("inter_{:04}.csv", i + 1)), xs)?;
    }
    write_unlabeled_csv(&dir.join("target_unlabeled.csv"), &seq.target_unlabeled)?;
    write_labeled_csv(&dir.join("target_eval.csv"), &seq.target_eval)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&seq.metadata)?)?;
    Ok(())
}

/// Reads a directory written by [`write_sequence_dir`].
pub fn read_sequence_dir(dir: &Path) -> Result<DomainSequence> {
    let labeled = |name: &str| -> Result<Vec<LabeledPoint>> {
        match read_csv(&dir.join(name))? {
            PointCloud::Labeled(ps) => Ok(ps),
            PointCloud::Unlabeled(_) => Err(Error::Data { line: Some(1), message: format!("{name} has no y column") }),
        }
    };
    let mut inter = Vec::new();
    for i in 1.. {
        let path = dir.join(format!("inter_{i:04}.csv"));
        if !path.exists() {
            break;
        }
        inter.push(read_csv(&path)?.xs());
    }
    let target_unlabeled = match dir.join("target_unlabeled.csv") {
        p if p.exists() => read_csv(&p)?.xs(),
        _ => inter.last().cloned().unwrap_or_default(),
    };
    let metadata = match fs::read_to_string(dir.join("meta.json")) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => SequenceMeta { generator: "import".into(), params: serde_json::Value::Null, seed: 0 },
    };
    Ok(DomainSequence {
        source_labeled: labeled("source.csv")?,
        intermediate_unlabeled: inter,
        target_unlabeled,
        target_eval: labeled("target_eval.csv")?,
        intermediate_truth: None,
        metadata,
    })
}

/// Writes each domain as a labeled CSV whose rows repeat atoms in proportion
/// to their (rational) masses, so the uniform empirical law of the file is
/// the domain itself.
pub fn write_counterexample_dir(ce: &Counterexample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, d) in ce.domains.iter().enumerate() {
        let fracs: Vec<(u64, u64)> =
            d.atoms().iter().map(|a| crate::wasserstein::rationalize(a.mass, 10_000)).collect::<Result<_>>()?;
        let lcd = fracs.iter().fold(1u64, |l, &(_, q)| l / gcd(l, q) * q);
        if lcd > 100_000 {
            return arg(format!("domain {k} needs {lcd} rows; masses are not simple fractions"));
        }
        let rows: Vec<LabeledPoint> = d
            .atoms()
            .iter()
            .zip(&fracs)
            .flat_map(|(a, &(p, q))| std::iter::repeat_n(a.point.clone(), (p * (lcd / q)) as usize))
            .collect();
        write_labeled_csv(&dir.join(format!("domain_{k:04}.csv")), &rows)?;
    }
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(ce)?)?;
    Ok(())
}

/// Generates whatever `spec` describes and writes it under `dir`.
pub fn write_gen(spec: &GenSpec, dir: &Path) -> Result<()> {
    match spec {
        GenSpec::GaussianDrift(s) => write_sequence_dir(&gen_gaussian_drift(s)?, dir),
        GenSpec::Mixing(s) => write_sequence_dir(&gen_mixing_from_spec(s)?, dir),
        GenSpec::Rotation(s) => write_sequence_dir(&gen_rotation_from_spec(s)?, dir),
        GenSpec::Counterexample { construction } => write_counterexample_dir(&gen_counterexample(construction)?, dir),
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::WeightedCloud;
    use crate::wasserstein::{rho_conditional, winf_discrete};

    #[test]
    fn haar_is_orthogonal() {
        let mut rg = rng::seeded(3);
        for d in [1, 2, 5, 30] {
            let u = haar_orthogonal(d, &mut rg);
            let e = &u.transpose() * &u - DMatrix::identity(d, d);
            assert!(e.amax() <= 1e-10);
            assert!((u.determinant().abs() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn drift_is_deterministic_and_balanced() {
        let spec = GaussianDriftSpec {
            d: 5,
            n_unlabeled_total: 200,
            n_labeled: 50,
            n_target_eval: 50,
            seed: 7,
            ..Default::default()
        };
        let a = gen_gaussian_drift(&spec).unwrap();
        let b = gen_gaussian_drift(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_intermediate(), 200);
        assert_eq!(a.target_unlabeled.len(), 200);
        let (src, tgt) = gaussian_endpoints(5, 0.05, 0.1, 7).unwrap();
        assert_eq!(src.prior_pos(), 0.5);
        assert_eq!(tgt.prior_pos(), 0.5);
    }

    #[test]
    fn degenerate_variance_tracks_interpolated_means() {
        let spec = GaussianDriftSpec {
            d: 1,
            n_unlabeled_total: 100,
            n_labeled: 10,
            n_target_eval: 10,
            min_var: 1e-8,
            max_var: 1e-8,
            seed: 2,
            ..Default::default()
        };
        let seq = gen_gaussian_drift(&spec).unwrap();
        let (src, tgt) = gaussian_endpoints(1, 1e-8, 1e-8, 2).unwrap();
        let truth = &seq.intermediate_truth.as_ref().unwrap()[0];
        for (i, (x, y)) in seq.intermediate_unlabeled[0].iter().zip(truth).enumerate() {
            let f = (i + 1) as f64 / 100.0;
            let mean = (1.0 - f) * src.mu(*y)[0] + f * tgt.mu(*y)[0];
            assert!((x[0] - mean).abs() < 1e-3);
        }
        assert!(gen_gaussian_drift(&GaussianDriftSpec { min_var: 0.2, max_var: 0.1, ..spec }).is_err());
    }

    #[test]
    fn mixing_endpoints() {
        let src = GaussianMixtureDomain::isotropic_symmetric(vec![5.0, 0.0], 1e-6).unwrap();
        let tgt = GaussianMixtureDomain::isotropic_symmetric(vec![0.0, 5.0], 1e-6).unwrap();
        let from_target = |p: &LabeledPoint| p.x[1].abs() > 2.5;
        assert!(mixing_sample(&src, &tgt, 0.0, 200, 1).iter().all(|p| !from_target(p)));
        assert!(mixing_sample(&src, &tgt, 1.0, 200, 1).iter().all(from_target));
        let seq = gen_mixing_interpolation(&src, &tgt, 4, 100, 3).unwrap();
        assert_eq!(seq.intermediate_unlabeled.len(), 4);
        assert!(seq.intermediate_unlabeled[3].iter().all(|x| x[1].abs() > 2.5));
    }

    #[test]
    fn rotation_zero_angle_and_chord_length() {
        let seq = gen_rotation_drift(30, 4, 0.0, (1.0, 2.0), 5).unwrap();
        for d in &seq.intermediate_unlabeled {
            assert_eq!(d, &seq.intermediate_unlabeled[0]);
        }
        // Few points on one circle: the identity coupling is optimal.
        let r = 3.0;
        let seq = gen_rotation_drift(3, 12, 60.0, (r, r), 9).unwrap();
        let step = 5f64.to_radians();
        let mut prev = seq.source_labeled.iter().map(|p| p.x.clone()).collect::<Vec<_>>();
        for d in &seq.intermediate_unlabeled {
            let w = winf_discrete(&WeightedCloud::uniform(prev.clone()), &WeightedCloud::uniform(d.clone())).unwrap();
            assert!((w - 2.0 * r * (step / 2.0).sin()).abs() <= 1e-9, "{w}");
            prev = d.clone();
        }
        assert!(gen_rotation_drift(3, 12, 180.0, (r, r), 9).is_err());
    }

    #[test]
    fn rotation_steps_respect_bound() {
        let spec = RotationSpec { n_points: 40, ..Default::default() };
        let seq = gen_rotation_from_spec(&spec).unwrap();
        let bound = rotation_step_bound(&spec);
        let mut prev: Vec<Vec<f64>> = seq.source_labeled.iter().map(|p| p.x.clone()).collect();
        for d in &seq.intermediate_unlabeled {
            let w = winf_discrete(&WeightedCloud::uniform(prev.clone()), &WeightedCloud::uniform(d.clone())).unwrap();
            assert!(w <= bound + 1e-12);
            prev = d.clone();
        }
    }

    #[test]
    fn baselines_rho() {
        let ce = gen_counterexample(&CounterexampleSpec::BaselinesFail).unwrap();
        for w in ce.domains.windows(2) {
            assert!((rho_conditional(&w[0], &w[1], true).unwrap() - 2.0 / 3.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn exponential_parameters() {
        let p = exponential_params(0.2).unwrap();
        assert_eq!(p.s, 1);
        assert!((p.weights[0] - 0.1).abs() < 1e-15 && (p.weights[1] - 0.2).abs() < 1e-15);
        assert!((p.kappa - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.rho - 0.875).abs() < 1e-12);
        for a in [0.01, 0.05, 0.1, 0.2, 0.25] {
            let p = exponential_params(a).unwrap();
            assert!(p.weights.iter().all(|w| *w > 0.0));
            assert!(p.rho < 1.0 && p.cluster() > -1.0);
            assert!((p.weights.iter().sum::<f64>() + a - 0.5).abs() < 1e-12);
        }
        assert!(exponential_params(0.3).is_err());
        let ce = gen_counterexample(&CounterexampleSpec::Exponential { alpha0: 0.2, t: 3 }).unwrap();
        assert_eq!(ce.domains.len(), 7);
        assert_eq!(ce.domains[4], ce.domains[6]);
        for d in &ce.domains {
            assert!((d.class_mass(Label::Pos) - 0.5).abs() < 1e-12);
        }
        for w in ce.domains.windows(2) {
            assert!(rho_conditional(&w[0], &w[1], true).unwrap() <= 0.875 + 1e-9);
        }
    }

    #[test]
    fn no_shift_masses_valid() {
        let ce = gen_counterexample(&CounterexampleSpec::NoShiftDoubling { alpha0: 0.2, epsilon: 0.06 }).unwrap();
        let d = &ce.domains[0];
        assert!(d.atoms().iter().all(|a| a.mass >= 0.0));
        assert!((d.total_mass() - 1.0).abs() < 1e-12);
        assert!(gen_counterexample(&CounterexampleSpec::NoShiftDoubling { alpha0: 0.2, epsilon: 0.3 }).is_err());
    }

    #[test]
    fn hinge_family_gaps() {
        for alpha in [0.3, 3.0] {
            let ce = gen_counterexample(&CounterexampleSpec::HingeBad { alpha }).unwrap();
            for w in ce.domains.windows(2) {
                assert!(rho_conditional(&w[0], &w[1], true).unwrap() <= 2.0 / 3.0 + 1e-9);
            }
        }
    }

    #[test]
    fn sequence_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = gen_rotation_drift(20, 3, 30.0, (1.0, 2.0), 1).unwrap();
        write_sequence_dir(&seq, dir.path()).unwrap();
        for f in ["source.csv", "inter_0001.csv", "inter_0003.csv", "target_eval.csv", "meta.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = read_sequence_dir(dir.path()).unwrap();
        assert_eq!(back.source_labeled, seq.source_labeled);
        assert_eq!(back.intermediate_unlabeled, seq.intermediate_unlabeled);
        assert_eq!(back.metadata, seq.metadata);
    }

    #[test]
    fn counterexample_export_rows() {
        let dir = tempfile::tempdir().unwrap();
        let ce = gen_counterexample(&CounterexampleSpec::Exponential { alpha0: 0.2, t: 1 }).unwrap();
        write_counterexample_dir(&ce, dir.path()).unwrap();
        let PointCloud::Labeled(rows) = read_csv(&dir.path().join("domain_0000.csv")).unwrap() else { panic!() };
        assert_eq!(rows.len(), 10);
    }

    #[test]
    fn gen_spec_json() {
        let s: GenSpec = serde_json::from_str(r#"{"kind":"rotation","n_points":10}"#).unwrap();
        assert!(matches!(s, GenSpec::Rotation(RotationSpec { n_points: 10, .. })));
        assert!(serde_json::from_str::<GenSpec>(r#"{"kind":"rotation","bogus":1}"#).is_err());
        let c: GenSpec =
            serde_json::from_str(r#"{"kind":"counterexample","construction":{"kind":"hinge_bad","alpha":0.3}}"#)
                .unwrap();
        assert!(matches!(c, GenSpec::Counterexample { .. }));
    }
}
