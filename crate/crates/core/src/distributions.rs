//! Labeled point sets, finite discrete distributions and Gaussian-mixture
//! domains.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::par;
use crate::rng;

/// Binary class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Label {
    Neg,
    Pos,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    /// `sign(score)` with `sign(0) = +1`.
    pub fn from_score(score: f64) -> Label {
        if score >= 0.0 {
            Label::Pos
        } else {
            Label::Neg
        }
    }

    pub fn flip(self) -> Label {
        match self {
            Label::Pos => Label::Neg,
            Label::Neg => Label::Pos,
        }
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        match l {
            Label::Pos => 1,
            Label::Neg => -1,
        }
    }
}

impl TryFrom<i8> for Label {
    type Error = String;
    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Label::Pos),
            -1 => Ok(Label::Neg),
            other => Err(format!("label must be -1 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub y: Label,
}

impl LabeledPoint {
    pub fn new(x: Vec<f64>, y: Label) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub point: LabeledPoint,
    pub mass: f64,
}

const MASS_TOL: f64 = 1e-12;

/// Finite-support labeled probability measure. Atoms are unique by bitwise
/// equality of `(x, y)` and masses sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    dim: usize,
    atoms: Vec<Atom>,
}

fn key(x: &[f64], y: Label) -> (Vec<u64>, Label) {
    // +0.0 and -0.0 are the same coordinate.
    (x.iter().map(|v| (v + 0.0).to_bits()).collect(), y)
}

impl DiscreteDistribution {
    /// Builds a distribution from `(point, mass)` pairs, merging exact
    /// duplicates. Masses must be positive and sum to one within 1e-12.
    pub fn new(atoms: impl IntoIterator<Item = (LabeledPoint, f64)>) -> Result<Self> {
        let mut merged: Vec<Atom> = Vec::new();
        let mut index: HashMap<(Vec<u64>, Label), usize> = HashMap::new();
        let mut dim = None;
        for (point, mass) in atoms {
            if !(mass > 0.0) || !mass.is_finite() {
                return arg(format!("atom mass must be positive and finite, got {mass}"));
            }
            if point.x.iter().any(|v| !v.is_finite()) {
                return arg("atom coordinates must be finite");
            }
            match dim {
                None => dim = Some(point.x.len()),
                Some(d) if d != point.x.len() => return Err(Error::Dimension { expected: d, got: point.x.len() }),
                _ => {}
            }
            let k = key(&point.x, point.y);
            if let Some(&i) = index.get(&k) {
                merged[i].mass += mass;
            } else {
                index.insert(k, merged.len());
                merged.push(Atom { point, mass });
            }
        }
        let Some(dim) = dim else {
            return arg("distribution needs at least one atom");
        };
        let total: f64 = merged.iter().map(|a| a.mass).sum();
        if (total - 1.0).abs() > MASS_TOL {
            return arg(format!("masses sum to {total}, expected 1"));
        }
        Ok(Self { dim, atoms: merged })
    }

    /// Like [`new`](Self::new) but rescales masses to sum to one.
    pub fn normalized(atoms: impl IntoIterator<Item = (LabeledPoint, f64)>) -> Result<Self> {
        let atoms: Vec<_> = atoms.into_iter().collect();
        let total: f64 = atoms.iter().map(|(_, m)| m).sum();
        if !(total > 0.0) {
            return arg("total mass must be positive");
        }
        Self::new(atoms.into_iter().map(|(p, m)| (p, m / total)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }

    pub fn class_mass(&self, y: Label) -> f64 {
        self.atoms.iter().filter(|a| a.point.y == y).map(|a| a.mass).sum()
    }

    /// Same support with labels replaced by `relabel(x)`; atoms that collide
    /// after relabeling are merged.
    pub fn relabeled(&self, relabel: impl Fn(&[f64]) -> Label) -> Self {
        let atoms = self.atoms.iter().map(|a| (LabeledPoint::new(a.point.x.clone(), relabel(&a.point.x)), a.mass));
        Self::new(atoms).expect("relabeling preserves mass")
    }

    /// X-marginal as a weighted point cloud.
    pub fn marginal(&self) -> WeightedCloud {
        WeightedCloud::from_pairs(self.atoms.iter().map(|a| (a.point.x.clone(), a.mass)))
    }

    /// Class-conditional X-law, renormalized. `None` if the class is absent.
    pub fn conditional(&self, y: Label) -> Option<WeightedCloud> {
        let mass = self.class_mass(y);
        if mass <= 0.0 {
            return None;
        }
        Some(WeightedCloud::from_pairs(
            self.atoms.iter().filter(|a| a.point.y == y).map(|a| (a.point.x.clone(), a.mass / mass)),
        ))
    }

    /// Draws `n` labeled points i.i.d. from the atoms.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<LabeledPoint> {
        let mut cdf = Vec::with_capacity(self.atoms.len());
        let mut acc = 0.0;
        for a in &self.atoms {
            acc += a.mass;
            cdf.push(acc);
        }
        let mut rng = rng::seeded(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let i = cdf.partition_point(|&c| c <= u).min(self.atoms.len() - 1);
                self.atoms[i].point.clone()
            })
            .collect()
    }
}

/// Unlabeled weighted point set; the X-marginal of a discrete distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedCloud {
    pub points: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
}

impl WeightedCloud {
    /// Merges bitwise-identical points.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Self {
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut masses: Vec<f64> = Vec::new();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        for (x, m) in pairs {
            let k: Vec<u64> = x.iter().map(|v| (v + 0.0).to_bits()).collect();
            if let Some(&i) = index.get(&k) {
                masses[i] += m;
            } else {
                index.insert(k, points.len());
                points.push(x);
                masses.push(m);
            }
        }
        Self { points, masses }
    }

    /// Uniform mass over the given points.
    pub fn uniform(points: Vec<Vec<f64>>) -> Self {
        let n = points.len() as f64;
        Self::from_pairs(points.into_iter().map(|x| (x, 1.0 / n)))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Uniform empirical measure over `points`, duplicates merged.
pub fn empirical_distribution(points: &[LabeledPoint]) -> Result<DiscreteDistribution> {
    if points.is_empty() {
        return arg("empirical distribution of an empty sample");
    }
    let n = points.len() as f64;
    let mut dist = DiscreteDistribution::normalized(points.iter().map(|p| (p.clone(), 1.0)))?;
    // Merged masses are k/n; recompute from counts to avoid summation drift.
    let mut counts: HashMap<(Vec<u64>, Label), usize> = HashMap::new();
    for p in points {
        *counts.entry(key(&p.x, p.y)).or_default() += 1;
    }
    for a in &mut dist.atoms {
        a.mass = counts[&key(&a.point.x, a.point.y)] as f64 / n;
    }
    Ok(dist)
}

/// `E[||X||^2]` under the atom masses (the squared bounded-data constant).
pub fn second_moment_bound(dist: &DiscreteDistribution) -> f64 {
    dist.atoms.iter().map(|a| a.mass * a.point.x.iter().map(|v| v * v).sum::<f64>()).sum()
}

/// Class-conditional Gaussians with a class prior.
#[derive(Debug, Clone)]
pub struct GaussianMixtureDomain {
    mu_pos: Vec<f64>,
    mu_neg: Vec<f64>,
    sigma_pos: DMatrix<f64>,
    sigma_neg: DMatrix<f64>,
    prior_pos: f64,
    factor_pos: DMatrix<f64>,
    factor_neg: DMatrix<f64>,
}

const SYM_TOL: f64 = 1e-10;

/// A matrix `L` with `L L^T = sigma`: Cholesky when positive definite, else
/// `U sqrt(D)` from the eigendecomposition.
pub fn covariance_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    if sigma.ncols() != d {
        return Err(Error::Construction("covariance must be square".into()));
    }
    for i in 0..d {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > SYM_TOL {
                return Err(Error::Construction(format!("covariance not symmetric at ({i},{j})")));
            }
        }
    }
    if let Some(ch) = sigma.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(sigma.clone());
    let min = eig.eigenvalues.min();
    if min < -SYM_TOL {
        return Err(Error::Construction(format!("covariance not PSD: min eigenvalue {min}")));
    }
    let sqrt = DVector::from_iterator(d, eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

/// Draws one vector `mu + L z` with `z` standard normal.
pub(crate) fn gaussian_draw(mu: &[f64], factor: &DMatrix<f64>, rng: &mut rng::Rng) -> Vec<f64> {
    let d = mu.len();
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    (0..d).map(|i| mu[i] + (0..d).map(|j| factor[(i, j)] * z[j]).sum::<f64>()).collect()
}

impl GaussianMixtureDomain {
    pub fn new(
        mu_pos: Vec<f64>,
        mu_neg: Vec<f64>,
        sigma_pos: DMatrix<f64>,
        sigma_neg: DMatrix<f64>,
        prior_pos: f64,
    ) -> Result<Self> {
        let d = mu_pos.len();
        if d == 0 {
            return Err(Error::Construction("dimension must be at least 1".into()));
        }
        if mu_neg.len() != d || sigma_pos.nrows() != d || sigma_neg.nrows() != d {
            return Err(Error::Construction("inconsistent dimensions".into()));
        }
        if !(0.0..=1.0).contains(&prior_pos) {
            return Err(Error::Construction(format!("prior {prior_pos} outside [0,1]")));
        }
        let factor_pos = covariance_factor(&sigma_pos)?;
        let factor_neg = covariance_factor(&sigma_neg)?;
        Ok(Self { mu_pos, mu_neg, sigma_pos, sigma_neg, prior_pos, factor_pos, factor_neg })
    }

    /// Both classes share `sigma^2 I`, means `+mu` and `-mu`, balanced prior.
    pub fn isotropic_symmetric(mu: Vec<f64>, sigma: f64) -> Result<Self> {
        let d = mu.len();
        let cov = DMatrix::identity(d, d) * (sigma * sigma);
        let neg = mu.iter().map(|v| -v).collect();
        Self::new(mu, neg, cov.clone(), cov, 0.5)
    }

    pub fn dim(&self) -> usize {
        self.mu_pos.len()
    }

    pub fn mu(&self, y: Label) -> &[f64] {
        match y {
            Label::Pos => &self.mu_pos,
            Label::Neg => &self.mu_neg,
        }
    }

    pub fn sigma(&self, y: Label) -> &DMatrix<f64> {
        match y {
            Label::Pos => &self.sigma_pos,
            Label::Neg => &self.sigma_neg,
        }
    }

    pub fn prior_pos(&self) -> f64 {
        self.prior_pos
    }

    pub(crate) fn factor(&self, y: Label) -> &DMatrix<f64> {
        match y {
            Label::Pos => &self.factor_pos,
            Label::Neg => &self.factor_neg,
        }
    }

    /// Draws one labeled point.
    pub fn draw(&self, rng: &mut rng::Rng) -> LabeledPoint {
        let y = if rng.random::<f64>() < self.prior_pos { Label::Pos } else { Label::Neg };
        let x = gaussian_draw(self.mu(y), self.factor(y), rng);
        LabeledPoint { x, y }
    }

    /// Per-class linear interpolation of means and covariances:
    /// `(1 - frac) * self + frac * other`.
    pub fn interpolate(&self, other: &Self, frac: f64) -> Result<Self> {
        let lerp =
            |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - frac) * x + frac * y).collect() };
        Self::new(
            lerp(&self.mu_pos, &other.mu_pos),
            lerp(&self.mu_neg, &other.mu_neg),
            &self.sigma_pos * (1.0 - frac) + &other.sigma_pos * frac,
            &self.sigma_neg * (1.0 - frac) + &other.sigma_neg * frac,
            (1.0 - frac) * self.prior_pos + frac * other.prior_pos,
        )
    }
}

/// `n` i.i.d. labeled draws from `domain`, deterministic in `seed`.
pub fn sample_domain(domain: &GaussianMixtureDomain, n: usize, seed: u64) -> Result<Vec<LabeledPoint>> {
    if n == 0 {
        return arg("sample size must be at least 1");
    }
    let mut rng = rng::seeded(seed);
    Ok((0..n).map(|_| domain.draw(&mut rng)).collect())
}

/// Provenance of a generated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: u64,
}

/// Source, intermediate and target samples of one adaptation problem.
///
/// `intermediate_unlabeled` is in temporal order. `target_unlabeled` is the
/// pool used by direct target adaptation; `target_eval` is held out and only
/// ever read by evaluation. `intermediate_truth`, when present, is for trace
/// diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSequence {
    pub source_labeled: Vec<LabeledPoint>,
    pub intermediate_unlabeled: Vec<Vec<Vec<f64>>>,
    pub target_unlabeled: Vec<Vec<f64>>,
    pub target_eval: Vec<LabeledPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate_truth: Option<Vec<Vec<Label>>>,
    pub metadata: SequenceMeta,
}

impl DomainSequence {
    pub fn dim(&self) -> usize {
        self.source_labeled.first().map(|p| p.x.len()).unwrap_or(0)
    }

    /// All intermediate points in temporal order.
    pub fn flat_intermediate(&self) -> Vec<Vec<f64>> {
        self.intermediate_unlabeled.iter().flatten().cloned().collect()
    }

    pub fn n_intermediate(&self) -> usize {
        self.intermediate_unlabeled.iter().map(Vec::len).sum()
    }
}

/// Point cloud read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub enum PointCloud {
    Labeled(Vec<LabeledPoint>),
    Unlabeled(Vec<Vec<f64>>),
}

impl PointCloud {
    pub fn xs(&self) -> Vec<Vec<f64>> {
        match self {
            PointCloud::Labeled(ps) => ps.iter().map(|p| p.x.clone()).collect(),
            PointCloud::Unlabeled(xs) => xs.clone(),
        }
    }
}

fn csv_header(d: usize, labeled: bool) -> Vec<String> {
    let mut h: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    if labeled {
        h.push("y".into());
    }
    h
}

pub fn write_labeled_csv(path: &Path, points: &[LabeledPoint]) -> Result<()> {
    let d = points.first().map(|p| p.x.len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(csv_header(d, true)).map_err(csv_err)?;
    for p in points {
        let mut row: Vec<String> = p.x.iter().map(|v| format!("{v:?}")).collect();
        row.push(i8::from(p.y).to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_unlabeled_csv(path: &Path, xs: &[Vec<f64>]) -> Result<()> {
    let d = xs.first().map(Vec::len).unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(csv_header(d, false)).map_err(csv_err)?;
    for x in xs {
        w.write_record(x.iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    Error::Data { line, message: e.to_string() }
}

/// Reads a point cloud in the `x0,...,x{d-1}[,y]` format.
pub fn read_csv(path: &Path) -> Result<PointCloud> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let labeled = names.last() == Some(&"y");
    let d = if labeled { names.len() - 1 } else { names.len() };
    for (i, name) in names.iter().take(d).enumerate() {
        if *name != format!("x{i}") {
            return Err(Error::Data { line: Some(1), message: format!("expected column x{i}, found {name:?}") });
        }
    }
    if d == 0 {
        return Err(Error::Data { line: Some(1), message: "no feature columns".into() });
    }
    let mut labeled_pts = Vec::new();
    let mut xs = Vec::new();
    for (row_idx, rec) in r.records().enumerate() {
        let line = row_idx + 2;
        let rec = rec.map_err(csv_err)?;
        if rec.len() != names.len() {
            return Err(Error::Data {
                line: Some(line),
                message: format!("expected {} fields, found {}", names.len(), rec.len()),
            });
        }
        let x = rec
            .iter()
            .take(d)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Data { line: Some(line), message: e.to_string() })?;
        if labeled {
            let raw = rec[d].trim();
            let y = raw.parse::<i8>().ok().and_then(|v| Label::try_from(v).ok()).ok_or_else(|| Error::Data {
                line: Some(line),
                message: format!("label must be -1 or 1, got {raw:?}"),
            })?;
            labeled_pts.push(LabeledPoint { x, y });
        } else {
            xs.push(x);
        }
    }
    Ok(if labeled { PointCloud::Labeled(labeled_pts) } else { PointCloud::Unlabeled(xs) })
}

/// Samples `n` points from per-point domains in parallel; point `i` is drawn
/// from `domain_at(i)` with its own RNG stream.
pub(crate) fn sample_indexed<F>(n: usize, seed: u64, domain_at: F) -> Vec<LabeledPoint>
where
    F: Fn(usize) -> GaussianMixtureDomain + Sync + Send,
{
    par::map_range(n, |i| {
        let mut r = rng::stream(seed, i as u64);
        domain_at(i).draw(&mut r)
    })
}
