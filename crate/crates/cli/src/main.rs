use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use gradual_core::distributions::{empirical_distribution, read_csv, PointCloud, WeightedCloud};
use gradual_core::experiment::{self, Ablation, ExperimentConfig};
use gradual_core::shiftgen::{self, GenSpec};
use gradual_core::theory::{self, Status, Suite};
use gradual_core::wasserstein::{rho_conditional, winf_discrete};
use gradual_core::{par, Error};

const EXIT_VERIFY_FAIL: u8 = 1;
const EXIT_INCONCLUSIVE: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;
const EXIT_SOFTWARE: u8 = 70;

/// Gradual self-training experiments, Wasserstein-infinity tools and the
/// verification suite.
#[derive(Parser)]
#[command(name = "gda", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment configuration over its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a `method,seed,accuracy` summary.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a base configuration and one ablated variant on shared seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// no_filter, window_override, no_reg or soft_labels
        #[arg(long)]
        ablation: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the verification battery.
    Verify {
        /// margin, gaussian or all
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Flip one label in the named claim's construction (harness self-test).
        #[arg(long, hide = true)]
        sabotage: Option<String>,
    },
    /// W-infinity between two CSV point sets.
    Wdist {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        /// Per-class distances; both files need a `y` column.
        #[arg(long)]
        conditional: bool,
    },
    /// Write a generated dataset or construction to a directory.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) => EXIT_USAGE,
        Error::Data { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::Dimension { .. }
        | Error::Precision { .. }
        | Error::AssumptionViolation(_)
        | Error::Construction(_) => EXIT_DATA,
        _ => EXIT_SOFTWARE,
    }
}

fn read_to_string(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::Lib(Error::Data { line: None, message: format!("{}: {e}", path.display()) }))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn timing_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".timing.json");
    PathBuf::from(s)
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::from_json(&read_to_string(path)?)?)
}

fn cmd_run(config: &Path, out: &Path, csv: Option<&Path>) -> Result<u8, Failure> {
    let cfg = load_config(config)?;
    let report = experiment::run_experiment(&cfg)?;
    write_json(out, &report)?;
    write_json(&timing_path(out), &json!({ "wall_clock_seconds": report.wall_clock_seconds }))?;
    if let Some(p) = csv {
        fs::write(p, report.csv_summary())?;
    }
    let ci = report.ci90_half_width.map(|h| format!(" ± {h:.2}")).unwrap_or_default();
    println!("{}: {:.2}{ci} over {} seed(s)", report.method.name(), report.mean, report.per_seed.len());
    Ok(0)
}

fn cmd_ablate(config: &Path, ablation: &str, out: &Path, csv: Option<&Path>) -> Result<u8, Failure> {
    let ablation: Ablation = ablation.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let cfg = load_config(config)?;
    let report = experiment::run_ablation(&cfg, ablation)?;
    write_json(out, &report)?;
    write_json(
        &timing_path(out),
        &json!({
            "base_wall_clock_seconds": report.base.wall_clock_seconds,
            "ablated_wall_clock_seconds": report.ablated.wall_clock_seconds,
        }),
    )?;
    if let Some(p) = csv {
        let mut s = report.base.csv_summary();
        let name = format!("{}+{}", report.ablated.method.name(), ablation_name(ablation));
        for r in &report.ablated.per_seed {
            s.push_str(&format!("{name},{},{}\n", r.seed, r.accuracy));
        }
        fs::write(p, s)?;
    }
    println!("base {:.2}, ablated {:.2}, mean delta {:+.2}", report.base.mean, report.ablated.mean, report.mean_delta);
    Ok(0)
}

fn ablation_name(a: Ablation) -> &'static str {
    match a {
        Ablation::NoFilter => "no_filter",
        Ablation::WindowOverride => "window_override",
        Ablation::NoReg => "no_reg",
        Ablation::SoftLabels => "soft_labels",
    }
}

fn cmd_verify(suite: &str, out: &Path, sabotage: Option<&str>) -> Result<u8, Failure> {
    let which: Suite = suite.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let results = theory::run_suite_with(which, sabotage);
    let status = theory::overall(&results);
    write_json(out, &json!({ "suite": suite, "overall": status, "results": results }))?;
    print!("{}", theory::render_table(&results));
    Ok(match status {
        Status::Pass => 0,
        Status::Fail => EXIT_VERIFY_FAIL,
        Status::Inconclusive => EXIT_INCONCLUSIVE,
    })
}

fn cloud(pc: &PointCloud) -> WeightedCloud {
    WeightedCloud::uniform(pc.xs())
}

fn cmd_wdist(p: &Path, q: &Path, conditional: bool) -> Result<u8, Failure> {
    let (pc, qc) = (read_csv(p)?, read_csv(q)?);
    let out = if conditional {
        let (PointCloud::Labeled(pp), PointCloud::Labeled(qp)) = (&pc, &qc) else {
            return Err(Failure::Usage("--conditional needs a y column in both files".into()));
        };
        let (pd, qd) = (empirical_distribution(pp)?, empirical_distribution(qp)?);
        let rho = rho_conditional(&pd, &qd, true)?;
        let mut per_class = Vec::new();
        for y in [gradual_core::distributions::Label::Pos, gradual_core::distributions::Label::Neg] {
            let (a, b) = (pd.conditional(y), qd.conditional(y));
            per_class.push(match (a, b) {
                (Some(a), Some(b)) => winf_discrete(&a, &b)?,
                _ => return Err(Error::Data { line: None, message: "a class is missing from one file".into() }.into()),
            });
        }
        json!({ "rho": rho, "winf_pos": per_class[0], "winf_neg": per_class[1] })
    } else {
        json!({ "winf": winf_discrete(&cloud(&pc), &cloud(&qc))? })
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(0)
}

fn cmd_gen(spec: &Path, out_dir: &Path) -> Result<u8, Failure> {
    let spec: GenSpec =
        serde_json::from_str(&read_to_string(spec)?).map_err(|e| Failure::Lib(Error::Config(e.to_string())))?;
    shiftgen::write_gen(&spec, out_dir)?;
    println!("wrote {}", out_dir.display());
    Ok(0)
}

fn threads_from_env() -> Result<Option<usize>, Failure> {
    match std::env::var("GDA_THREADS") {
        Err(_) => Ok(None),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("GDA_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn dispatch(cmd: Cmd) -> Result<u8, Failure> {
    match cmd {
        Cmd::Run { config, out, csv } => cmd_run(&config, &out, csv.as_deref()),
        Cmd::Ablate { config, ablation, out, csv } => cmd_ablate(&config, &ablation, &out, csv.as_deref()),
        Cmd::Verify { suite, out, sabotage } => cmd_verify(&suite, &out, sabotage.as_deref()),
        Cmd::Wdist { p, q, conditional } => cmd_wdist(&p, &q, conditional),
        Cmd::Gen { spec, out_dir } => cmd_gen(&spec, &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = threads_from_env().and_then(|t| par::with_threads(t, move || dispatch(cli.cmd)));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
