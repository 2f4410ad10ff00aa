//! Acceptance criteria 1 to 8. Prints one line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use gradual_core::distributions::WeightedCloud;
use gradual_core::experiment::{
    gaussian_default, mixing_default, rotation_default, run_ablation, run_experiment, Ablation, Method,
};
use gradual_core::optimize::w_star;
use gradual_core::rng;
use gradual_core::shiftgen::{gen_counterexample, CounterexampleSpec};
use gradual_core::theory::{self, GaussianRecovery, Status, VerificationResult};
use gradual_core::wasserstein::{rho_conditional, winf_bruteforce, winf_discrete};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn mean_of(method: Method) -> f64 {
    run_experiment(&gaussian_default(method, SEEDS.to_vec())).expect("experiment runs").mean
}

fn criterion_1(means: &[f64; 4]) -> Outcome {
    let [src, tgt, all, grad] = *means;
    let pass = grad >= 97.0
        && (40.0..=55.0).contains(&src)
        && tgt <= 60.0
        && (85.0..=96.0).contains(&all)
        && grad > all
        && all > tgt
        && tgt >= src;
    Outcome { pass, detail: format!("source {src:.2}, target ST {tgt:.2}, all ST {all:.2}, gradual ST {grad:.2}") }
}

fn criterion_2() -> Outcome {
    let base = gaussian_default(Method::GradualSt, SEEDS.to_vec());
    let no_reg = run_ablation(&base, Ablation::NoReg).expect("no_reg ablation");
    let soft = run_ablation(&base, Ablation::SoftLabels).expect("soft ablation");
    let g1 = no_reg.base.mean - no_reg.ablated.mean;
    let g2 = soft.base.mean - soft.ablated.mean;
    Outcome {
        pass: g1 >= 5.0 && g2 >= 3.0,
        detail: format!(
            "no reg {:.2} vs {:.2} (gap {g1:.2}), soft labels {:.2} vs {:.2} (gap {g2:.2})",
            no_reg.base.mean, no_reg.ablated.mean, soft.base.mean, soft.ablated.mean
        ),
    }
}

fn passed(r: &gradual_core::Result<VerificationResult>) -> bool {
    matches!(r, Ok(v) if v.status == Status::Pass)
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut check =
        |name: String, r: gradual_core::Result<VerificationResult>, extra: &dyn Fn(&VerificationResult) -> bool| {
            let ok = passed(&r) && r.as_ref().map(extra).unwrap_or(false);
            if !ok {
                failures.push(name);
            }
        };
    check("baselines_fail".into(), theory::verify_baselines_fail(), &|r| {
        r.measured.get("source_loss") == Some(&0.0)
            && r.measured.get("target_loss") == Some(&1.0)
            && r.measured.get("direct_st_loss") == Some(&1.0)
    });
    for t in 1..=3 {
        check(format!("exponential_growth(0.2,{t})"), theory::verify_exponential_growth(0.2, t), &|r| {
            let floor = (0.5 * 2f64.powi(t as i32) * 0.2).min(0.5);
            r.measured.get("final_loss").is_some_and(|&l| l >= floor - 1e-12)
        });
    }
    check("hinge_failure(0.3)".into(), theory::verify_hinge_failure(0.3), &|r| {
        r.measured.get("final_error") == Some(&1.0)
    });
    let theta = gradual_core::models::LinearModel::unbounded(vec![1.0, 0.0], 0.0);
    check(
        "no_regularization_fixed_point".into(),
        theory::verify_no_regularization_fixed_point(&theta, &[vec![2.0, 0.0], vec![-3.0, 0.0]]),
        &|_| true,
    );
    for r in theory::run_suite(theory::Suite::Margin) {
        let id = r.claim_id.clone();
        if id.starts_with("soft_label_fixed_point") || id.starts_with("no_shift_linear_bound") {
            let ok = r.status == Status::Pass;
            if !ok {
                failures.push(id);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: failures.is_empty() && secs < 60.0,
        detail: if failures.is_empty() {
            format!("all theory claims pass in {secs:.1}s")
        } else {
            format!("failing: {} ({secs:.1}s)", failures.join(", "))
        },
    }
}

fn criterion_4() -> Outcome {
    let inst = theory::random_bound_instances(100, 0.5, 1000, 21).expect("instances");
    let batch = theory::check_bound_batch("theorem_bound[random_pairs]", &inst, 1, 22).expect("bound batch");
    let held = 100.0 - batch.measured.get("trials_violating").copied().unwrap_or(f64::NAN);
    let chain = theory::verify_corollary_chain(3, 0.2, 1000, 31);
    let pass = batch.status == Status::Pass && held == 100.0 && passed(&chain);
    Outcome { pass, detail: format!("bound held on {held}/100 instances, corollary chain T=3 {}", status(&chain)) }
}

fn status(r: &gradual_core::Result<VerificationResult>) -> &'static str {
    match r {
        Ok(v) if v.status == Status::Pass => "pass",
        Ok(v) if v.status == Status::Inconclusive => "inconclusive",
        _ => "FAIL",
    }
}

fn random_cloud(rg: &mut rng::Rng, n: usize) -> WeightedCloud {
    let weights: Vec<u32> = (0..n).map(|_| rg.random_range(1..=5)).collect();
    let total: u32 = weights.iter().sum();
    WeightedCloud::from_pairs(
        weights
            .iter()
            .map(|&w| (vec![rg.random_range(-3.0..3.0), rg.random_range(-3.0..3.0)], w as f64 / total as f64)),
    )
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let mut rg = rng::seeded(5);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (np, nq) = (rg.random_range(1..=3), rg.random_range(1..=3));
        let p = random_cloud(&mut rg, np);
        let q = random_cloud(&mut rg, nq);
        let a = winf_discrete(&p, &q).expect("winf");
        let b = winf_bruteforce(&p, &q).expect("brute force");
        worst = worst.max((a - b).abs());
    }
    let ce = gen_counterexample(&CounterexampleSpec::BaselinesFail).expect("construction");
    let rho = rho_conditional(&ce.domains[0], &ce.domains[1], true).expect("rho");
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-9 && (rho - 2.0 / 3.0).abs() <= 1e-9 && secs < 30.0,
        detail: format!("max |winf - brute force| = {worst:.1e} over 500 instances, rho = {rho:.12}, {secs:.1}s"),
    }
}

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let rec = theory::verify_gaussian_recovery(&GaussianRecovery::rotating(2, 2.0, 5, 0.5, 0.4, 61));
    let dev = rec.as_ref().ok().and_then(|r| r.measured.get("final_deviation").copied()).unwrap_or(f64::NAN);
    let b = 2.0;
    let mut rg = rng::seeded(6);
    let mut lipschitz_ok = 0;
    for _ in 0..1000 {
        let draw = |rg: &mut rng::Rng| -> Vec<f64> {
            let v: Vec<f64> = (0..2).map(|_| StandardNormal.sample(rg)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let r = rg.random_range(b..3.0 * b);
            v.iter().map(|x| x * r / n).collect()
        };
        let (m0, m1) = (draw(&mut rg), draw(&mut rg));
        let (w0, w1) = (w_star(&m0).unwrap(), w_star(&m1).unwrap());
        let dw = w0.iter().zip(&w1).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
        let dm = m0.iter().zip(&m1).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
        if dw <= dm / b + 1e-12 {
            lipschitz_ok += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: passed(&rec) && dev <= 0.05 && lipschitz_ok == 1000 && secs < 120.0,
        detail: format!("final deviation {dev:.4}, Lipschitz pre-check {lipschitz_ok}/1000, {secs:.1}s"),
    }
}

fn criterion_7(gaussian_gap: f64) -> Outcome {
    let g = run_experiment(&mixing_default(Method::GradualSt, SEEDS.to_vec())).expect("mixing gradual").mean;
    let t = run_experiment(&mixing_default(Method::TargetSt, SEEDS.to_vec())).expect("mixing target").mean;
    let mixing_gap = g - t;
    Outcome {
        pass: mixing_gap <= 3.0 && gaussian_gap >= 20.0,
        detail: format!(
            "mixing gap {mixing_gap:.2} (gradual {g:.2}, target {t:.2}), gaussian drift gap {gaussian_gap:.2}"
        ),
    }
}

fn criterion_8() -> Outcome {
    let g = run_experiment(&rotation_default(Method::GradualSt, vec![0])).expect("rotation gradual").mean;
    let t = run_experiment(&rotation_default(Method::TargetSt, vec![0])).expect("rotation target").mean;
    let (ge, te) = (1.0 - g / 100.0, 1.0 - t / 100.0);
    Outcome { pass: ge == 0.0 && te >= 0.4, detail: format!("gradual error {ge:.3}, direct target ST error {te:.3}") }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let means = [Method::SourceOnly, Method::TargetSt, Method::AllSt, Method::GradualSt].map(mean_of);
    let outcomes = [
        criterion_1(&means),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(means[3] - means[1]),
        criterion_8(),
    ];
    let mut all = true;
    for (i, o) in outcomes.iter().enumerate() {
        println!("criterion {}: {} | {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        all &= o.pass;
    }
    println!("acceptance: {} in {:.0}s", if all { "PASS" } else { "FAIL" }, started.elapsed().as_secs_f64());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
