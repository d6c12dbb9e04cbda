//! Command-line front end.
//!
//! Reports go to `out`, warnings and progress to `err`. Exit codes: 0 on
//! success, 1 on a numerical failure, 2 on usage or data errors, 3 when an
//! optimizer stopped before converging (the report is still printed).

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use crate::data::{load_csv, Dataset};
use crate::estimation::{EstimationError, OptimizerConfig};
use crate::re_oracle::{re_skovgaard, ReData};
use crate::simulation::{
    grid_runner_with_progress, write_grid_csv, GridAxis, Scenario, SimulationConfig,
};
use crate::skovgaard::{Alternative, Analysis, SkovgaardError, StatisticKind, TestReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

/// Significant digits in the printed report tables.
const REPORT_DIGITS: usize = 4;

const DEFAULT_TAU_GRID: &str = "0.3,0.6,0.9,1.2,1.5,1.8,2.0";

#[derive(Debug, Parser)]
#[command(
    name = "crr",
    version,
    about = "Likelihood inference for control rate regression in meta-analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Test a null value of the slope beta1.
    Test(TestArgs),
    /// Confidence intervals for beta1.
    Confint(ConfintArgs),
    /// Coverage simulation over a grid of settings, written as CSV.
    Simulate(SimulateArgs),
    /// Worked random-effects example with closed-form corrections.
    ReExample(ReArgs),
}

#[derive(Debug, Args)]
struct TestArgs {
    /// CSV of per-study counts or observations.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    beta1_null: f64,
    /// two.sided, less or greater.
    #[arg(long, default_value = "two.sided")]
    alternative: Alternative,
    /// Objective evaluations allowed per fit.
    #[arg(long, default_value_t = 1000)]
    maxit: usize,
    /// Print JSON instead of the text report.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ConfintArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// wald, rp, rbar or all.
    #[arg(long, default_value = "all")]
    statistic: String,
    #[arg(long, default_value_t = 1000)]
    maxit: usize,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Preset 1 to 4.
    #[arg(long, conflicts_with_all = ["beta0", "beta1", "mu"])]
    scenario: Option<u32>,
    #[arg(long, allow_hyphen_values = true)]
    beta0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    beta1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    /// Comma-separated study counts.
    #[arg(long, default_value = "5,10,20")]
    n_list: String,
    /// Comma-separated tau values (default grid when neither list is given).
    #[arg(long, conflicts_with = "sigma_list")]
    tau_list: Option<String>,
    #[arg(long)]
    sigma_list: Option<String>,
    /// Fixed tau for a sigma grid.
    #[arg(long, default_value_t = 1.2)]
    tau: f64,
    /// Fixed sigma for a tau grid.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1000)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 1000)]
    maxit: usize,
}

#[derive(Debug, Args)]
struct ReArgs {
    /// Comma-separated study estimates.
    #[arg(long, allow_hyphen_values = true)]
    y: String,
    #[arg(long)]
    sigma2: f64,
    #[arg(long, allow_hyphen_values = true)]
    upsilon_null: f64,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::Test(a) => cmd_test(&a, out, err),
        Command::Confint(a) => cmd_confint(&a, out, err),
        Command::Simulate(a) => cmd_simulate(&a, out, err),
        Command::ReExample(a) => cmd_re_example(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(CliError { code, message }) => {
            let _ = writeln!(err, "error: {message}");
            code
        }
    }
}

struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn failure(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::failure(e.to_string())
    }
}

impl From<SkovgaardError> for CliError {
    fn from(e: SkovgaardError) -> Self {
        let code = match &e {
            SkovgaardError::Fit {
                source: EstimationError::DegenerateDesign,
                ..
            }
            | SkovgaardError::InvalidLevel(_)
            | SkovgaardError::NonFiniteNull(_)
            | SkovgaardError::MissingStdErr => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn load(path: &PathBuf) -> Result<Dataset, CliError> {
    load_csv(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn optimizer(maxit: usize) -> Result<OptimizerConfig, CliError> {
    let c = OptimizerConfig::default().with_max_iterations(maxit);
    c.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(c)
}

fn cmd_test(a: &TestArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    if !a.beta1_null.is_finite() {
        return Err(CliError::usage("--beta1-null must be finite"));
    }
    let data = load(&a.data)?;
    let config = optimizer(a.maxit)?;
    let report = Analysis::new(&data, &config)?.test(a.beta1_null, a.alternative)?;
    for f in &report.flags {
        writeln!(err, "warning: {}", f.message())?;
    }
    if a.json {
        writeln!(out, "{}", report_json(&report))?;
    } else {
        if !report.converged() {
            writeln!(out, "converged=false: optimizer stopped before convergence")?;
        }
        write!(out, "{}", format_report(&report))?;
    }
    Ok(if report.converged() {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

/// JSON form of a test report.
pub fn report_json(r: &TestReport) -> serde_json::Value {
    let se_mle = r.mle.std_errs.map(|s| s[crate::likelihood::BETA1]);
    json!({
        "estimates": {
            "wls": { "estimate": r.wls.beta1, "std_err": r.wls.se_beta1 },
            "mle": { "estimate": r.mle.theta.beta1, "std_err": se_mle },
            "mle_theta": r.mle.theta,
            "constrained_theta": r.constrained.theta,
        },
        "statistics": {
            "beta1_null": r.beta1_null,
            "alternative": r.alternative.as_str(),
            "wald": { "value": r.wald, "p_value": r.p_wald },
            "signed_root": { "value": r.r_p, "p_value": r.p_r },
            "skovgaard": { "value": r.r_bar, "p_value": r.p_rbar },
            "u": r.u,
            "mle_wald": r.mle_wald,
        },
        "diagnostics": r.flags,
        "converged": r.converged(),
    })
}

/// The text report: estimates table, statistics table, alternative line.
pub fn format_report(r: &TestReport) -> String {
    let se_mle = r.mle.std_errs.map(|s| s[crate::likelihood::BETA1]);
    let mut s = String::from("\nEstimate of beta1:\n");
    let cells = r_format(
        &[Some(r.wls.beta1), Some(r.mle.theta.beta1), r.wls.se_beta1, se_mle],
        REPORT_DIGITS,
    );
    s += &print_matrix(
        &["WLS", "MLE"],
        &["Estimate", "Std.Err."],
        &[
            vec![cells[0].clone(), cells[2].clone()],
            vec![cells[1].clone(), cells[3].clone()],
        ],
    );
    s += "\nHypothesis test for beta1:\n";
    let cells = r_format(
        &[
            r.wald,
            Some(r.r_p),
            Some(r.r_bar),
            r.p_wald,
            Some(r.p_r),
            Some(r.p_rbar),
        ],
        REPORT_DIGITS,
    );
    s += &print_matrix(
        &[
            "Wald statistic",
            "Signed profile log-likelihood ratio statistic",
            "Skovgaard statistic",
        ],
        &["Value", "P-value"],
        &[
            vec![cells[0].clone(), cells[3].clone()],
            vec![cells[1].clone(), cells[4].clone()],
            vec![cells[2].clone(), cells[5].clone()],
        ],
    );
    let null = r_number(round_to(r.beta1_null, REPORT_DIGITS as i32));
    match r.alternative {
        Alternative::TwoSided => {
            s += &format!("\nalternative hypothesis: parameter is different from {null}\n")
        }
        alt => s += &format!("\nalternative hypothesis: parameter is {alt} than {null}\n"),
    }
    s
}

fn round_to(x: f64, digits: i32) -> f64 {
    let p = 10f64.powi(digits);
    (x * p).round() / p
}

/// `x` to 7 significant digits without trailing zeros.
pub fn r_number(x: f64) -> String {
    if x.is_nan() {
        return "NA".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let v: f64 = format!("{:.6e}", x).parse().unwrap_or(x);
    format!("{v}")
}

/// Significant digits and decimal exponent of `|x|` rounded to `digits`.
fn sig_and_exp(x: f64, digits: usize) -> (usize, i32) {
    if x == 0.0 {
        return (1, 0);
    }
    let s = format!("{:.*e}", digits - 1, x.abs());
    let (mant, exp) = s.split_once('e').expect("scientific format");
    let e10: i32 = exp.parse().expect("exponent");
    let digits_only: String = mant.chars().filter(|c| *c != '.').collect();
    let nsig = digits_only.trim_end_matches('0').len().max(1);
    (nsig, e10)
}

/// Formats numbers jointly with a common number of decimals, enough to
/// show every value to `digits` significant digits, padded to a common
/// width. Falls back to scientific notation when that is narrower. `None`
/// prints as `NA`.
pub fn r_format(values: &[Option<f64>], digits: usize) -> Vec<String> {
    let finite: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let any_neg = finite.iter().any(|v| *v < 0.0);
    let mut rgt = 0usize;
    let mut mxsl = 1usize;
    let mut mxns = 1usize;
    let mut max_e = 0i32;
    let mut min_e = 0i32;
    for &v in &finite {
        let (nsig, e10) = sig_and_exp(v, digits);
        let r = (nsig as i32 - 1 - e10).max(0) as usize;
        rgt = rgt.max(r);
        let left = if e10 >= 0 { e10 as usize + 1 } else { 1 };
        mxsl = mxsl.max(left + usize::from(v < 0.0));
        mxns = mxns.max(nsig);
        max_e = max_e.max(e10);
        min_e = min_e.min(e10);
    }
    let w_fixed = mxsl + if rgt > 0 { rgt + 1 } else { 0 };
    let exp_width = if max_e.abs().max(min_e.abs()) >= 100 { 5 } else { 4 };
    let w_sci = usize::from(any_neg) + if mxns > 1 { mxns + 1 } else { mxns } + exp_width;
    let fixed = finite.is_empty() || w_fixed <= w_sci;
    let width = if fixed { w_fixed } else { w_sci }.max(2);
    values
        .iter()
        .map(|v| match v {
            Some(x) if x.is_finite() => {
                if fixed {
                    format!("{:>width$.rgt$}", x)
                } else {
                    let s = format!("{:.*e}", mxns - 1, x);
                    let (m, e) = s.split_once('e').expect("scientific format");
                    let e: i32 = e.parse().expect("exponent");
                    let sign = if e < 0 { '-' } else { '+' };
                    format!("{:>width$}", format!("{m}e{sign}{:02}", e.abs()))
                }
            }
            Some(x) if x.is_nan() => format!("{:>width$}", "NaN"),
            Some(x) => format!("{:>width$}", if *x > 0.0 { "Inf" } else { "-Inf" }),
            None => format!("{:>width$}", "NA"),
        })
        .collect()
}

/// Left-aligned character matrix with two-space gaps and a header row.
fn print_matrix(rows: &[&str], cols: &[&str], cells: &[Vec<String>]) -> String {
    let rw = rows.iter().map(|r| r.chars().count()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols.len())
        .map(|j| {
            cells
                .iter()
                .map(|row| row[j].chars().count())
                .chain(std::iter::once(cols[j].chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut s = " ".repeat(rw);
    for (c, w) in cols.iter().zip(&widths) {
        s += &format!("  {c:<w$}");
    }
    s.push('\n');
    for (name, row) in rows.iter().zip(cells) {
        s += &format!("{name:<rw$}");
        for (c, w) in row.iter().zip(&widths) {
            s += &format!("  {c:<w$}");
        }
        s.push('\n');
    }
    s
}

fn cmd_confint(a: &ConfintArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(CliError::usage("--level must lie in (0, 1)"));
    }
    let kinds = match a.statistic.as_str() {
        "all" => vec![StatisticKind::Wald, StatisticKind::RP, StatisticKind::RBar],
        other => vec![other.parse::<StatisticKind>().map_err(CliError::usage)?],
    };
    let data = load(&a.data)?;
    let config = optimizer(a.maxit)?;
    let analysis = Analysis::new(&data, &config)?;
    let converged = analysis.mle().converged;
    if !converged {
        writeln!(err, "warning: unconstrained optimizer did not converge")?;
    }
    for kind in kinds {
        let ci = analysis.confint(a.level, kind)?;
        for f in &ci.flags {
            writeln!(err, "warning: {} ({})", f.message(), kind.as_str())?;
        }
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            kind.as_str(),
            r_number(a.level),
            r_number(ci.lower),
            r_number(ci.upper)
        )?;
    }
    Ok(if converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, CliError> {
    let items: Result<Vec<T>, _> = s
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>())
        .collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::usage(format!("--{flag}: expected a comma-separated list, got '{s}'"))),
    }
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    let (label, base) = match (a.scenario, a.beta0, a.beta1, a.mu) {
        (Some(id), None, None, None) => (
            id.to_string(),
            Scenario::preset(id, a.tau, a.sigma).map_err(|e| CliError::usage(e.to_string()))?,
        ),
        (None, Some(beta0), Some(beta1), Some(mu)) => (
            "custom".to_string(),
            Scenario {
                beta0,
                beta1,
                mu,
                tau: a.tau,
                sigma: a.sigma,
            },
        ),
        (None, None, None, None) => {
            return Err(CliError::usage("give --scenario or all of --beta0, --beta1, --mu"))
        }
        _ => return Err(CliError::usage("--beta0, --beta1 and --mu must be given together")),
    };
    let n_values: Vec<usize> = parse_list("n-list", &a.n_list)?;
    let axis = match (&a.tau_list, &a.sigma_list) {
        (_, Some(s)) => GridAxis::Sigma(parse_list("sigma-list", s)?),
        (Some(t), None) => GridAxis::Tau(parse_list("tau-list", t)?),
        (None, None) => GridAxis::Tau(parse_list("tau-list", DEFAULT_TAU_GRID)?),
    };
    let values = match &axis {
        GridAxis::Tau(v) | GridAxis::Sigma(v) => v,
    };
    if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(CliError::usage("grid values must be positive"));
    }
    if n_values.iter().any(|n| *n < 2) {
        return Err(CliError::usage("every n must be at least 2"));
    }
    let mut config = SimulationConfig::new(base, n_values[0], a.replicates, a.seed);
    config.workers = a.workers;
    config.level = a.level;
    config.optimizer = OptimizerConfig::default().with_max_iterations(a.maxit);
    let probe = SimulationConfig {
        scenario: match &axis {
            GridAxis::Tau(v) => base.with_tau(v[0]),
            GridAxis::Sigma(v) => base.with_sigma(v[0]),
        },
        ..config.clone()
    };
    probe.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let total = n_values.len() * values.len();
    let mut done = 0usize;
    let rows = grid_runner_with_progress(&[(label, base)], &n_values, &axis, &config, |row| {
        done += 1;
        let _ = writeln!(
            err,
            "[{done}/{total}] scenario {} n={} tau={} sigma={}",
            row.scenario, row.n, row.tau, row.sigma
        );
    })
    .map_err(|e| CliError::usage(e.to_string()))?;
    match &a.out {
        Some(path) => {
            let f = File::create(path)
                .map_err(|e| CliError::failure(format!("{}: {e}", path.display())))?;
            let mut w = BufWriter::new(f);
            write_grid_csv(&rows, &mut w).map_err(|e| CliError::failure(e.to_string()))?;
            w.flush()?;
        }
        None => write_grid_csv(&rows, &mut *out).map_err(|e| CliError::failure(e.to_string()))?,
    }
    Ok(EXIT_OK)
}

fn cmd_re_example(a: &ReArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let y: Vec<f64> = parse_list("y", &a.y)?;
    let data = ReData::new(y, a.sigma2).map_err(|e| CliError::usage(e.to_string()))?;
    let r = re_skovgaard(&data, a.upsilon_null).map_err(|e| CliError::usage(e.to_string()))?;
    let n = r_number;
    writeln!(out, "upsilon_hat\t{}", n(r.fit.upsilon_hat))?;
    writeln!(out, "omega_hat\t{}", n(r.fit.omega_hat))?;
    writeln!(out, "omega_tilde\t{}", n(r.fit.omega_tilde))?;
    writeln!(out, "r\t{}", n(r.r))?;
    writeln!(out, "r_bar\t{}", n(r.r_bar))?;
    writeln!(out, "u\t{}", n(r.u))?;
    writeln!(out, "S_upsilon_upsilon\t{}", n(r.s[0][0]))?;
    writeln!(out, "S_upsilon_omega\t{}", n(r.s[0][1]))?;
    writeln!(out, "S_omega_upsilon\t{}", n(r.s[1][0]))?;
    writeln!(out, "S_omega_omega\t{}", n(r.s[1][1]))?;
    writeln!(out, "q_upsilon\t{}", n(r.q[0]))?;
    writeln!(out, "q_omega\t{}", n(r.q[1]))?;
    for f in &r.flags {
        writeln!(out, "# {}", f.message())?;
    }
    if r.fit.floored {
        writeln!(out, "# variance estimate raised to the within-study variance")?;
    }
    Ok(EXIT_OK)
}
