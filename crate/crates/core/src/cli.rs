//! Command-line front end: `solve`, `simulate`, `sweep`, `check` and `portfolio`.
//!
//! Scenarios are read as JSON; results go to standard output (or `--out`) as
//! CSV by default, each starting with a `# seed=<n>` line. Failures print one
//! `error[CODE]: message` line on standard error and exit with 1 (invalid
//! input), 2 (numerical failure) or 3 (I/O).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::behavior::{
    decompose_distortion, monte_carlo_eu_gap, portfolio, welfare_gap, PortfolioScenario, MC_FLOOR,
};
use crate::error::{Error, Result};
use crate::klsolver::{
    brute_force_oracle, foc_residual, solve, solve_general, KlSolution, OracleMethod,
    CROSS_CHECK_TOL,
};
use crate::learner::{run_convergence, Likelihood, PriorSpec};
use crate::linalg::spd_check;
use crate::report::{fmt_g17, Csv};
use crate::scenario::{build_signal_model, Mode, Scenario};
use crate::sweep::{
    check_doom, check_scaling, check_wdoom_shock, doom_negative_control, run_sweep,
    wdoom_negative_control, SweepSpec,
};

/// Perturbations per structural check.
pub const CHECK_PERTURBATIONS: usize = 50;
/// Precision scalings tried by the scaling check.
pub const CHECK_SCALINGS: [f64; 3] = [1.5, 2.0, 10.0];

#[derive(Debug, Parser)]
#[command(name = "misspec", version, about = "Limiting beliefs of a learner with misspecified familiar sources")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the limiting belief and the induced predictor distortion.
    Solve(SolveArgs),
    /// Simulate Bayesian learning and report posterior checkpoints.
    Simulate(SimulateArgs),
    /// Sweep one parameter over a grid with finite-difference sensitivities.
    Sweep(SweepArgs),
    /// Run every invariant check that applies to the scenario's mode.
    Check(CheckArgs),
    /// Optimal holdings and welfare loss of a misread project.
    Portfolio(PortfolioArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output file (default: standard output).
    #[arg(long = "out", value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Scenario JSON file.
    #[arg(long, value_name = "PATH")]
    pub scenario: PathBuf,
    /// Monte Carlo draws for the welfare gap estimate (baseline and learned-covariance modes).
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub draws: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON file.
    #[arg(long, value_name = "PATH")]
    pub scenario: PathBuf,
    /// Number of simulated periods.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub periods: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep specification JSON file.
    #[arg(long = "sweep-spec", value_name = "PATH")]
    pub sweep_spec: PathBuf,
    /// Scenario JSON file replacing the sweep specification's base scenario.
    #[arg(long, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Scenario JSON file.
    #[arg(long, value_name = "PATH")]
    pub scenario: PathBuf,
    /// Monte Carlo draws for the welfare checks.
    #[arg(long, value_name = "N", default_value_t = 1_000_000, value_parser = clap::value_parser!(u64).range(2..))]
    pub draws: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PortfolioArgs {
    /// Portfolio JSON file.
    #[arg(long = "portfolio-spec", value_name = "PATH")]
    pub portfolio_spec: PathBuf,
    /// Scenario whose limiting metric replaces the portfolio's `metric`.
    #[arg(long, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

/// Outcome of one invariant check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    0
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                    let _ = writeln!(stderr, "error[USAGE]: {first}");
                    1
                }
            };
        }
    };
    match run(&cli, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error[{}]: {}", e.code(), single_line(&e.to_string()));
            e.exit_code()
        }
    }
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let out = std::io::stdout();
    let err = std::io::stderr();
    main_with(std::env::args_os(), &mut out.lock(), &mut err.lock())
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    Scenario::from_json_str(&read_file(path)?)
}

fn emit(common: &Common, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match &common.out {
        Some(path) => std::fs::write(path, text).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        }),
        None => Ok(stdout.write_all(text.as_bytes())?),
    }
}

fn to_json(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json values serialize");
    s.push('\n');
    s
}

fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Solve(a) => {
            let s = load_scenario(&a.scenario)?;
            let sol = solve(&s)?;
            if sol.degenerate {
                writeln!(stderr, "warning: no misspecification (perceived bias equals true bias); the limit is trivial")?;
            }
            let mc = match a.draws {
                Some(n) => Some(monte_carlo_eu_gap(&s, &sol, a.common.seed, n as usize)?),
                None => None,
            };
            let text = match a.common.format {
                Format::Csv => solve_csv(&s, &sol, a.common.seed, mc),
                Format::Json => to_json(&json!({
                    "seed": a.common.seed,
                    "mode": s.mode().name(),
                    "solution": sol,
                    "learned_sources": s.free_coords().iter().map(|c| c + 1).collect::<Vec<_>>(),
                    "eu_gap_mc": mc,
                })),
            };
            emit(&a.common, &text, stdout)?;
        }
        Command::Simulate(a) => {
            let s = load_scenario(&a.scenario)?;
            let sm = build_signal_model(&s)?;
            let dim = Likelihood::new(&sm, &s.perceived_bias)?.dim();
            let trace = run_convergence(
                &s,
                &PriorSpec::diffuse(dim),
                a.common.seed,
                a.periods as usize,
                &[],
            )?;
            let text = match a.common.format {
                Format::Csv => trace.to_csv(),
                Format::Json => to_json(&json!({
                    "seed": trace.seed,
                    "periods": trace.periods,
                    "signals_digest": trace.signals_digest,
                    "coordinates": trace.coordinates.iter().map(|c| c + 1).collect::<Vec<_>>(),
                    "checkpoints": trace.checkpoints,
                    "posterior_means": trace.posterior_means.iter().map(|m| m.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                    "posterior_sds": trace.posterior_covs.iter().map(|c| (0..c.dim()).map(|i| c[(i, i)].sqrt()).collect::<Vec<_>>()).collect::<Vec<_>>(),
                })),
            };
            emit(&a.common, &text, stdout)?;
        }
        Command::Sweep(a) => {
            let mut spec = SweepSpec::from_json_str(&read_file(&a.sweep_spec)?)?;
            if let Some(path) = &a.scenario {
                spec.base = load_scenario(path)?;
                spec.validate()?;
            }
            let table = run_sweep(&spec)?;
            let text = match a.common.format {
                Format::Csv => table.to_csv(Some(a.common.seed)),
                Format::Json => to_json(&json!({
                    "seed": a.common.seed,
                    "header": table.header,
                    "rows": table.rows,
                })),
            };
            emit(&a.common, &text, stdout)?;
        }
        Command::Check(a) => {
            let s = load_scenario(&a.scenario)?;
            let results = run_checks(&s, a.common.seed, a.draws as usize)?;
            let text = match a.common.format {
                Format::Csv => {
                    let mut csv = Csv::new(Some(a.common.seed), &["check", "result", "detail"]);
                    for r in &results {
                        let verdict = if r.passed { "pass" } else { "fail" };
                        csv.row(&[r.name.clone(), verdict.into(), r.detail.clone()]);
                    }
                    csv.finish()
                }
                Format::Json => to_json(&json!({ "seed": a.common.seed, "checks": results })),
            };
            emit(&a.common, &text, stdout)?;
            let failed: Vec<&str> =
                results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                writeln!(stderr, "error[CHECK_FAILED]: {}", failed.join(" "))?;
                return Ok(2);
            }
        }
        Command::Portfolio(a) => {
            let mut ps = PortfolioScenario::from_json_str(&read_file(&a.portfolio_spec)?)?;
            if let Some(path) = &a.scenario {
                let s = load_scenario(path)?;
                let sol = solve(&s)?;
                if sol.delta.metric.len() != 1 {
                    return Err(Error::InvalidArgument(
                        "portfolio needs a scenario with a one-dimensional state".into(),
                    ));
                }
                ps.metric = sol.delta.metric[0];
            }
            let report = portfolio(&ps)?;
            let text = match a.common.format {
                Format::Csv => report.to_csv(Some(a.common.seed)),
                Format::Json => to_json(&json!({ "seed": a.common.seed, "portfolio": report })),
            };
            emit(&a.common, &text, stdout)?;
        }
    }
    Ok(0)
}

/// Rows `quantity,value`: the metric, each learned `Δⱼ` (1-based source or
/// coordinate index), `δ` when the covariance is learned, and the distortion.
pub fn solve_csv(
    s: &Scenario,
    sol: &KlSolution,
    seed: u64,
    mc: Option<crate::behavior::Estimate>,
) -> String {
    let mut csv = Csv::new(Some(seed), &["quantity", "value"]);
    let mut row = |name: String, v: f64| csv.row(&[name, fmt_g17(v)]);
    let k = sol.delta.metric.len();
    let suffix = |name: &str, d: usize| {
        if k == 1 {
            name.to_string()
        } else {
            format!("{name}_{}", d + 1)
        }
    };
    for (d, m) in sol.delta.metric.iter().enumerate() {
        row(suffix("metric", d), *m);
    }
    for (c, v) in s.free_coords().iter().zip(&sol.delta.learned_part) {
        row(format!("delta_hat_{}", c + 1), *v);
    }
    if let Some(l) = sol.delta.latent_component {
        row(format!("delta_hat_{}", s.n_sources + 1), l);
    }
    if let Some(f) = sol.delta_factor {
        row("delta_factor".into(), f);
    }
    for (d, b) in sol.blp_distortion.iter().enumerate() {
        row(suffix("blp_distortion", d), *b);
    }
    row("kl_at_solution".into(), sol.kl_at_solution);
    row("degenerate".into(), if sol.degenerate { 1.0 } else { 0.0 });
    if let Ok(w) = welfare_gap(s, sol) {
        row("eu_gap".into(), w.eu_gap());
    }
    if let Some(e) = mc {
        row("eu_gap_mc".into(), e.mean);
        row("eu_gap_mc_se".into(), e.se);
    }
    csv.finish()
}

/// Every invariant check that applies to the scenario's mode.
pub fn run_checks(s: &Scenario, seed: u64, draws: usize) -> Result<Vec<CheckResult>> {
    let mode = s.mode();
    let mut out = Vec::new();
    let sol = solve(s)?;
    let sm = build_signal_model(s)?;
    let dt = s.delta_tilde();
    let scale = dt.iter().fold(1.0f64, |m, v| m.max(v.abs()));

    let general = solve_general(&sm, &dt)?;
    let d = general.delta.max_abs_diff(&sol.delta);
    out.push(CheckResult::new(
        "general_solver",
        d <= CROSS_CHECK_TOL * scale,
        format!("max |diff| {}", fmt_g17(d)),
    ));

    let r = foc_residual(&sm, &sol.delta).amax();
    out.push(CheckResult::new(
        "foc_residual",
        r <= CROSS_CHECK_TOL * scale,
        format!("max |gradient| {}", fmt_g17(r)),
    ));

    let oracle = brute_force_oracle(&sm, &dt, OracleMethod::Descent { start: None })?;
    let d = oracle.max_abs_diff(&sol.delta);
    out.push(CheckResult::new(
        "descent_oracle",
        d <= CROSS_CHECK_TOL * scale,
        format!("max |diff| {}", fmt_g17(d)),
    ));

    if matches!(
        mode,
        Mode::Baseline | Mode::Latent | Mode::Multidim | Mode::LearnCovariance
    ) {
        let ok = check_doom(s, CHECK_PERTURBATIONS, seed)?;
        out.push(CheckResult::new("doom", ok, format!("{CHECK_PERTURBATIONS} perturbations")));
        let moved = !doom_negative_control(s, CHECK_PERTURBATIONS, seed)?;
        out.push(CheckResult::new(
            "doom_negative_control",
            moved || sol.degenerate,
            "familiar perturbations move the limit",
        ));
    }
    if mode == Mode::Shock {
        let ok = check_wdoom_shock(s, CHECK_PERTURBATIONS, seed)?;
        out.push(CheckResult::new("wdoom_shock", ok, format!("{CHECK_PERTURBATIONS} perturbations")));
        let moved = !wdoom_negative_control(s, CHECK_PERTURBATIONS, seed)?;
        out.push(CheckResult::new(
            "wdoom_negative_control",
            moved || sol.degenerate || s.unfamiliar().is_empty(),
            "familiar shock loadings move the limit",
        ));
    }
    if mode == Mode::Baseline && sol.delta.metric_scalar() != 0.0 {
        for alpha in CHECK_SCALINGS {
            let ok = check_scaling(s, alpha)?;
            out.push(CheckResult::new("scaling", ok, format!("alpha {}", fmt_g17(alpha))));
        }
    }
    if matches!(mode, Mode::Baseline | Mode::LearnCovariance) {
        let gap = welfare_gap(s, &sol)?.eu_gap();
        let mc = monte_carlo_eu_gap(s, &sol, seed, draws)?;
        let err = (mc.mean - gap).abs();
        out.push(CheckResult::new(
            "eu_gap_monte_carlo",
            err <= 4.0 * mc.se + MC_FLOOR,
            format!("estimate {} se {} analytic {}", fmt_g17(mc.mean), fmt_g17(mc.se), fmt_g17(gap)),
        ));
    }
    if mode == Mode::LearnCovariance {
        let (ok, detail) = match decompose_distortion(s, &sol, seed, draws) {
            Ok(dec) => {
                let f = sol.delta_factor.unwrap_or(1.0);
                let err = (dec.term_iii + (1.0 - f) * dec.term_i).abs();
                (err <= 1e-10 * dec.term_i.abs().max(1.0), format!("term III residual {}", fmt_g17(err)))
            }
            Err(Error::Inconsistent { context, .. }) => (false, context),
            Err(e) => return Err(e),
        };
        out.push(CheckResult::new("distortion_decomposition", ok, detail));
        if let Some(hat) = &sol.sigma_hat {
            let floor = spd_check(&sm.sigma_star).lambda_min;
            let learned = spd_check(hat).lambda_min;
            out.push(CheckResult::new(
                "eigenvalue_floor",
                learned >= floor * (1.0 - 1e-12),
                format!("min eigenvalue {} vs true {}", fmt_g17(learned), fmt_g17(floor)),
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = main_with(
            std::iter::once("misspec").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn help_lists_every_flag() {
        let (code, top, _) = run_args(&["--help"]);
        assert_eq!(code, 0);
        for c in ["solve", "simulate", "sweep", "check", "portfolio"] {
            assert!(top.contains(c));
        }
        let mut all = String::new();
        for c in ["solve", "simulate", "sweep", "check", "portfolio"] {
            let (code, text, _) = run_args(&[c, "--help"]);
            assert_eq!(code, 0);
            all.push_str(&text);
        }
        for flag in [
            "--scenario", "--seed", "--periods", "--draws", "--out", "--format", "--sweep-spec",
            "--portfolio-spec",
        ] {
            assert!(all.contains(flag), "{flag}");
        }
    }

    #[test]
    fn usage_errors_exit_one() {
        let (code, _, err) = run_args(&["solve", "--scenario", "x.json", "--bogus"]);
        assert_eq!(code, 1);
        assert!(err.starts_with("error[USAGE]:"), "{err}");
        assert_eq!(run_args(&["solve", "--scenario", "x", "--periods", "3"]).0, 1);
        assert_eq!(run_args(&["simulate", "--scenario", "x", "--periods", "0"]).0, 1);
    }

    #[test]
    fn missing_file_exits_three() {
        let (code, _, err) = run_args(&["solve", "--scenario", "/nonexistent/s.json"]);
        assert_eq!(code, 3);
        assert!(err.starts_with("error[IO_NOT_FOUND]:"), "{err}");
        assert_eq!(err.lines().count(), 1);
    }
}
