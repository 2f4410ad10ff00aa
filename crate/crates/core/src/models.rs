//! Linear classifiers and the loss functionals evaluated on them.

use serde::{Deserialize, Serialize};

use crate::distributions::{DiscreteDistribution, Label};
use crate::error::{arg, Error, Result};

const NORM_SLACK: f64 = 1e-9;

/// `x -> w.x + b`, optionally with a norm budget `||w|| <= R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Vec<f64>,
    pub b: f64,
    /// Norm budget `R`; `None` means unbounded.
    #[serde(rename = "R")]
    pub norm_budget: Option<f64>,
}

impl LinearModel {
    pub fn new(w: Vec<f64>, b: f64, norm_budget: Option<f64>) -> Result<Self> {
        if let Some(r) = norm_budget {
            if !(r > 0.0) {
                return arg(format!("norm budget must be positive, got {r}"));
            }
            let n = norm(&w);
            if n > r + NORM_SLACK {
                return arg(format!("||w|| = {n} exceeds budget {r}"));
            }
        }
        if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            return arg("model parameters must be finite");
        }
        Ok(Self { w, b, norm_budget })
    }

    pub fn unbounded(w: Vec<f64>, b: f64) -> Self {
        Self { w, b, norm_budget: None }
    }

    pub fn zeros(d: usize, norm_budget: Option<f64>) -> Self {
        Self { w: vec![0.0; d], b: 0.0, norm_budget }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn w_norm(&self) -> f64 {
        norm(&self.w)
    }

    /// `(a w, a b)` with the budget dropped.
    pub fn scaled(&self, a: f64) -> Self {
        Self { w: self.w.iter().map(|v| a * v).collect(), b: a * self.b, norm_budget: None }
    }

    /// Raw score without a dimension check.
    #[inline]
    pub(crate) fn score_unchecked(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.b
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.w.len() {
            return Err(Error::Dimension { expected: self.w.len(), got: x.len() });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: LinearModel = serde_json::from_str(s)?;
        LinearModel::new(m.w, m.b, m.norm_budget)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `w.x + b`.
pub fn score(model: &LinearModel, x: &[f64]) -> Result<f64> {
    model.check(x)?;
    Ok(model.score_unchecked(x))
}

/// `sign(w.x + b)` with `sign(0) = +1`.
pub fn predict(model: &LinearModel, x: &[f64]) -> Result<Label> {
    Ok(Label::from_score(score(model, x)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginLossKind {
    Ramp,
    Hinge,
    Logistic,
}

impl MarginLossKind {
    /// The loss as a function of the margin `m = y * prediction`.
    #[inline]
    pub fn eval(self, m: f64) -> f64 {
        match self {
            MarginLossKind::Hinge => (1.0 - m).max(0.0),
            MarginLossKind::Ramp => (1.0 - m).clamp(0.0, 1.0),
            MarginLossKind::Logistic => softplus(-m),
        }
    }

    /// A (sub)derivative with respect to the margin.
    #[inline]
    pub fn deriv(self, m: f64) -> f64 {
        match self {
            MarginLossKind::Hinge => {
                if m < 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            MarginLossKind::Ramp => {
                if m < 1.0 && m > 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            MarginLossKind::Logistic => -sigmoid(-m),
        }
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss of `prediction` against label `y`.
pub fn margin_loss(kind: MarginLossKind, prediction: f64, y: Label) -> f64 {
    kind.eval(y.value() * prediction)
}

fn check_dims(model: &LinearModel, dist: &DiscreteDistribution) -> Result<()> {
    if model.dim() != dist.dim() {
        return Err(Error::Dimension { expected: model.dim(), got: dist.dim() });
    }
    Ok(())
}

/// Mass-weighted expected margin loss.
pub fn population_loss(kind: MarginLossKind, model: &LinearModel, dist: &DiscreteDistribution) -> Result<f64> {
    check_dims(model, dist)?;
    Ok(dist.atoms().iter().map(|a| a.mass * margin_loss(kind, model.score_unchecked(&a.point.x), a.point.y)).sum())
}

/// Mass-weighted misclassification rate.
pub fn zero_one_error(model: &LinearModel, dist: &DiscreteDistribution) -> Result<f64> {
    check_dims(model, dist)?;
    Ok(dist
        .atoms()
        .iter()
        .filter(|a| Label::from_score(model.score_unchecked(&a.point.x)) != a.point.y)
        .map(|a| a.mass)
        .sum())
}

/// Unlabeled loss `E[phi(|M(X)|)]`: the loss against the model's own sign.
pub fn unlabeled_loss(kind: MarginLossKind, model: &LinearModel, dist: &DiscreteDistribution) -> Result<f64> {
    check_dims(model, dist)?;
    Ok(dist.atoms().iter().map(|a| a.mass * kind.eval(model.score_unchecked(&a.point.x).abs())).sum())
}

/// Loss of `student` on `dist` relabeled by `teacher`'s predictions.
pub fn pseudolabeled_loss(
    kind: MarginLossKind,
    student: &LinearModel,
    teacher: &LinearModel,
    dist: &DiscreteDistribution,
) -> Result<f64> {
    check_dims(student, dist)?;
    check_dims(teacher, dist)?;
    Ok(dist
        .atoms()
        .iter()
        .map(|a| {
            let y = Label::from_score(teacher.score_unchecked(&a.point.x));
            a.mass * margin_loss(kind, student.score_unchecked(&a.point.x), y)
        })
        .sum())
}

const PROB_CLAMP: f64 = 1e-12;

/// Cross-entropy `-[p ln p' + (1-p) ln(1-p')]` for target `p` and prediction `p'`.
#[inline]
pub fn cross_entropy(p: f64, p_pred: f64) -> f64 {
    let q = p_pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(p * q.ln() + (1.0 - p) * (1.0 - q).ln())
}

/// Expected cross-entropy between the teacher's and student's sigmoid
/// probabilities.
pub fn soft_label_loss(teacher: &LinearModel, student: &LinearModel, dist: &DiscreteDistribution) -> Result<f64> {
    check_dims(student, dist)?;
    check_dims(teacher, dist)?;
    Ok(dist
        .atoms()
        .iter()
        .map(|a| {
            let p = sigmoid(teacher.score_unchecked(&a.point.x));
            let q = sigmoid(student.score_unchecked(&a.point.x));
            a.mass * cross_entropy(p, q)
        })
        .sum())
}

/// How a model is kept from growing without bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// Hard constraint `||w|| <= R`.
    Constraint {
        r: f64,
    },
    /// Penalty `lambda * ||w||^2` added to the mean loss.
    Penalty {
        lambda: f64,
    },
    None,
}

impl Regularization {
    pub fn norm_budget(&self) -> Option<f64> {
        match self {
            Regularization::Constraint { r } => Some(*r),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::LabeledPoint;
    use proptest::prelude::*;

    fn m(w: &[f64], b: f64) -> LinearModel {
        LinearModel::unbounded(w.to_vec(), b)
    }

    fn baselines_p(second: f64) -> DiscreteDistribution {
        DiscreteDistribution::new([
            (LabeledPoint::new(vec![1.0, second], Label::Pos), 0.5),
            (LabeledPoint::new(vec![-1.0, -second], Label::Neg), 0.5),
        ])
        .unwrap()
    }

    #[test]
    fn scores() {
        assert_eq!(score(&m(&[0.0, 1.0], 0.0), &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(score(&m(&[0.0, 0.0], 0.0), &[7.0, -3.0]).unwrap(), 0.0);
        assert_eq!(score(&m(&[2.0, -1.0], 0.5), &[1.0, 2.0]).unwrap(), 0.5);
        assert!(matches!(score(&m(&[1.0], 0.0), &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn predictions() {
        assert_eq!(predict(&m(&[0.0], 0.0), &[1.0]).unwrap(), Label::Pos);
        assert_eq!(predict(&m(&[1.0], 0.0), &[-1e-300]).unwrap(), Label::Neg);
        assert_eq!(predict(&m(&[0.0, 1.0], 0.0), &[1.0, -1.0 / 3.0]).unwrap(), Label::Neg);
    }

    #[test]
    fn margin_losses() {
        assert_eq!(margin_loss(MarginLossKind::Ramp, 1.0, Label::Pos), 0.0);
        assert_eq!(margin_loss(MarginLossKind::Ramp, -5.0, Label::Pos), 1.0);
        assert_eq!(margin_loss(MarginLossKind::Hinge, -1.0, Label::Pos), 2.0);
        assert!((margin_loss(MarginLossKind::Logistic, 0.0, Label::Neg) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn baselines_example_losses() {
        let theta0 = m(&[0.0, 1.0], 0.0);
        let p0 = baselines_p(1.0);
        let p2 = baselines_p(-1.0 / 3.0);
        assert_eq!(population_loss(MarginLossKind::Ramp, &theta0, &p0).unwrap(), 0.0);
        assert_eq!(population_loss(MarginLossKind::Ramp, &theta0, &p2).unwrap(), 1.0);
        assert_eq!(zero_one_error(&theta0, &p0).unwrap(), 0.0);
        assert_eq!(zero_one_error(&theta0, &p2).unwrap(), 1.0);
    }

    #[test]
    fn single_atom_at_margin_one() {
        let d = DiscreteDistribution::new([(LabeledPoint::new(vec![1.0], Label::Pos), 1.0)]).unwrap();
        for k in [MarginLossKind::Ramp, MarginLossKind::Hinge] {
            assert_eq!(population_loss(k, &m(&[1.0], 0.0), &d).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_model_misclassifies_negatives() {
        let d = DiscreteDistribution::new([
            (LabeledPoint::new(vec![1.0], Label::Pos), 0.5),
            (LabeledPoint::new(vec![-1.0], Label::Neg), 0.5),
        ])
        .unwrap();
        assert_eq!(zero_one_error(&m(&[0.0], 0.0), &d).unwrap(), 0.5);
    }

    #[test]
    fn soft_loss_at_zero_scores_is_log2() {
        let d = baselines_p(1.0);
        let z = m(&[0.0, 0.0], 0.0);
        assert!((soft_label_loss(&z, &z, &d).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_loss_self_equals_entropy() {
        let d = baselines_p(0.3);
        let t = m(&[0.4, -1.2], 0.1);
        let ent: f64 = d
            .atoms()
            .iter()
            .map(|a| {
                let p = sigmoid(t.score_unchecked(&a.point.x));
                a.mass * -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
            })
            .sum();
        assert!((soft_label_loss(&t, &t, &d).unwrap() - ent).abs() < 1e-12);
    }

    #[test]
    fn soft_loss_proper_scoring_bruteforce() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(11);
        let atoms: Vec<_> = (0..10)
            .map(|_| {
                let x = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let y = if rng.random::<bool>() { Label::Pos } else { Label::Neg };
                (LabeledPoint::new(x, y), 0.1)
            })
            .collect();
        let d = DiscreteDistribution::normalized(atoms).unwrap();
        let t = m(&[0.7, -0.3], 0.2);
        let base = soft_label_loss(&t, &t, &d).unwrap();
        for _ in 0..100 {
            let dir: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = norm(&dir);
            let s = m(&[t.w[0] + 0.1 * dir[0] / n, t.w[1] + 0.1 * dir[1] / n], t.b + 0.1 * dir[2] / n);
            assert!(soft_label_loss(&t, &s, &d).unwrap() >= base);
        }
    }

    #[test]
    fn budget_enforced_and_json_roundtrip() {
        assert!(LinearModel::new(vec![3.0, 4.0], 0.0, Some(4.9)).is_err());
        let model = LinearModel::new(vec![0.6, 0.8], -0.25, Some(1.0)).unwrap();
        assert_eq!(LinearModel::from_json(&model.to_json()).unwrap(), model);
        let unb = m(&[1.0], 2.0);
        let js = unb.to_json();
        assert!(js.contains("\"R\":null"));
        assert_eq!(LinearModel::from_json(&js).unwrap(), unb);
    }

    fn small_dist() -> impl Strategy<Value = DiscreteDistribution> {
        prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, any::<bool>(), 0.05f64..1.0), 1..8).prop_map(|v| {
            DiscreteDistribution::normalized(
                v.into_iter().map(|(a, b, pos, w)| {
                    (LabeledPoint::new(vec![a, b], if pos { Label::Pos } else { Label::Neg }), w)
                }),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn loss_ordering_and_monotonicity(m1 in -10.0f64..10.0, dm in 0.0f64..5.0) {
            let r = MarginLossKind::Ramp.eval(m1);
            prop_assert!(r <= MarginLossKind::Hinge.eval(m1));
            prop_assert!((0.0..=1.0).contains(&r));
            for k in [MarginLossKind::Ramp, MarginLossKind::Hinge, MarginLossKind::Logistic] {
                prop_assert!(k.eval(m1 + dm) <= k.eval(m1));
            }
        }

        #[test]
        fn error_below_ramp_and_unlabeled_below_labeled(
            d in small_dist(), w0 in -2.0f64..2.0, w1 in -2.0f64..2.0, b in -2.0f64..2.0,
        ) {
            let model = m(&[w0, w1], b);
            prop_assume!(d.atoms().iter().all(|a| model.score_unchecked(&a.point.x) != 0.0));
            let err = zero_one_error(&model, &d).unwrap();
            let ramp = population_loss(MarginLossKind::Ramp, &model, &d).unwrap();
            let unl = unlabeled_loss(MarginLossKind::Ramp, &model, &d).unwrap();
            prop_assert!(err <= ramp + 1e-12);
            prop_assert!(unl <= ramp + 1e-12);
        }

        #[test]
        fn prediction_scale_invariant(
            w0 in -2.0f64..2.0, w1 in -2.0f64..2.0, b in -2.0f64..2.0,
            x0 in -5.0f64..5.0, x1 in -5.0f64..5.0, a in 1e-3f64..1e3,
        ) {
            let model = m(&[w0, w1], b);
            prop_assert_eq!(
                predict(&model, &[x0, x1]).unwrap(),
                predict(&model.scaled(a), &[x0, x1]).unwrap()
            );
        }
    }
}
