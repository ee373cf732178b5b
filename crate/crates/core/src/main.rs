use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde::Serialize;

use bilevel_ssn::analysis::{diagnose, AnalysisTolerances, RegularityReport};
use bilevel_ssn::bench::{self, BenchmarkEntry};
use bilevel_ssn::driver::{default_start, sweep, SweepConfig, DEFAULT_LAMBDA_GRID};
use bilevel_ssn::problem::{
    check_derivatives, sample_points, DerivativeCheckReport, DERIVATIVE_CHECK_STEP,
};
use bilevel_ssn::report::{write_json, write_solve_csv, write_sweep_csv};
use bilevel_ssn::solver::{run, SolveReport, SolverConfig};
use bilevel_ssn::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Solve,
    Sweep,
    CheckDerivatives,
    Diagnose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

/// Semismooth Newton solver for bilevel programs with a value-function penalty.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    #[arg(value_enum)]
    mode: Option<Mode>,

    #[arg(long = "mode", value_enum, conflicts_with = "mode")]
    mode_flag: Option<Mode>,

    /// Benchmark name, or `all` for sweep and check-derivatives.
    #[arg(long)]
    problem: String,

    #[arg(long, default_value_t = 1.0)]
    lambda: f64,

    /// Comma-separated penalty values for sweep mode.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,

    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,

    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    y0: Option<Vec<f64>>,

    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// Run the regularity analysis at the final iterate of a solve.
    #[arg(long)]
    diagnose: bool,

    /// In diagnose mode, analyse the benchmark's certified point instead of solving.
    #[arg(long)]
    certified: bool,

    /// Run the sweep on a single thread.
    #[arg(long)]
    serial: bool,
}

enum Outcome {
    Success,
    Failure,
}

impl Cli {
    fn solver_config(&self) -> Result<SolverConfig> {
        let d = SolverConfig::default();
        let c = SolverConfig {
            lambda: self.lambda,
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            eps: self.eps.unwrap_or(d.eps),
            beta: self.beta.unwrap_or(d.beta),
            t: self.t.unwrap_or(d.t),
            rho: self.rho.unwrap_or(d.rho),
            sigma: self.sigma.unwrap_or(d.sigma),
            ..d
        };
        c.validate()?;
        Ok(c)
    }

    fn entries(&self, allow_all: bool) -> Result<Vec<BenchmarkEntry>> {
        if allow_all && self.problem == "all" {
            Ok(bench::registry())
        } else {
            Ok(vec![bench::find(&self.problem)?])
        }
    }

    fn start(&self, entry: &BenchmarkEntry) -> (Vec<f64>, Vec<f64>) {
        let (x, y) = entry.problem.start_or_ones();
        (self.x0.clone().unwrap_or(x), self.y0.clone().unwrap_or(y))
    }

    fn sink(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).map_err(|e| Error::Io(e.to_string()))?,
            )),
            None => Box::new(io::stdout().lock()),
        })
    }

    fn json_only(&self, mode: &str) -> Result<()> {
        if self.format == Format::Csv {
            return Err(Error::InvalidConfig(format!(
                "{mode} output is only available as JSON"
            )));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    solve: &'a SolveReport,
    regularity: Option<RegularityReport>,
    regularity_error: Option<String>,
}

fn solve_mode(cli: &Cli) -> Result<Outcome> {
    let entry = bench::find(&cli.problem)?;
    let config = cli.solver_config()?;
    let (x0, y0) = cli.start(&entry);
    let start = default_start(&entry.problem, &x0, &y0)?;
    let report = run(&entry.problem, &config, &start)?;
    let mut out = cli.sink()?;
    match cli.format {
        Format::Csv => write_solve_csv(&report, &mut out)?,
        Format::Json => {
            let (regularity, regularity_error) = if cli.diagnose {
                match diagnose(
                    &entry.problem,
                    config.lambda,
                    &report.final_point,
                    &AnalysisTolerances::default(),
                ) {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                }
            } else {
                (None, None)
            };
            let o = SolveOutput {
                solve: &report,
                regularity,
                regularity_error,
            };
            write_json(&o, &mut out)?;
            writeln!(out).map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    Ok(if report.solved() {
        Outcome::Success
    } else {
        Outcome::Failure
    })
}

fn sweep_mode(cli: &Cli) -> Result<Outcome> {
    let solver = cli.solver_config()?;
    let mut reports = Vec::new();
    for entry in cli.entries(true)? {
        let config = SweepConfig {
            lambda_grid: cli
                .lambda_grid
                .clone()
                .unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec()),
            solver,
            parallel: !cli.serial,
            start: Some(cli.start(&entry)),
        };
        reports.push(sweep(&entry.problem, &config)?);
    }
    let mut out = cli.sink()?;
    match cli.format {
        Format::Csv => write_sweep_csv(&reports, &mut out)?,
        Format::Json => {
            write_json(&reports, &mut out)?;
            writeln!(out).map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    Ok(if reports.iter().all(|r| r.converged) {
        Outcome::Success
    } else {
        Outcome::Failure
    })
}

#[derive(Serialize)]
struct DerivativeOutput {
    problem: String,
    report: DerivativeCheckReport,
}

fn check_mode(cli: &Cli) -> Result<Outcome> {
    cli.json_only("check-derivatives")?;
    let mut results = Vec::new();
    for entry in cli.entries(true)? {
        let points = sample_points(entry.problem.dims(), 16, 2.0, 7);
        let report = check_derivatives(&entry.problem, &points, DERIVATIVE_CHECK_STEP)?;
        results.push(DerivativeOutput {
            problem: entry.problem.name().to_string(),
            report,
        });
    }
    let mut out = cli.sink()?;
    write_json(&results, &mut out)?;
    writeln!(out).map_err(|e| Error::Io(e.to_string()))?;
    Ok(if results.iter().all(|r| r.report.passes()) {
        Outcome::Success
    } else {
        Outcome::Failure
    })
}

fn diagnose_mode(cli: &Cli) -> Result<Outcome> {
    cli.json_only("diagnose")?;
    let entry = bench::find(&cli.problem)?;
    let config = cli.solver_config()?;
    let point = if cli.certified {
        entry.certified_for(config.lambda).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no certified point for {} at lambda = {}",
                cli.problem, config.lambda
            ))
        })?
    } else {
        let (x0, y0) = cli.start(&entry);
        let start = default_start(&entry.problem, &x0, &y0)?;
        let report = run(&entry.problem, &config, &start)?;
        if !report.solved() {
            eprintln!("warning: solve ended with {}", report.status.as_str());
        }
        report.final_point
    };
    let rep = diagnose(
        &entry.problem,
        config.lambda,
        &point,
        &AnalysisTolerances::default(),
    )?;
    let mut out = cli.sink()?;
    write_json(&rep, &mut out)?;
    writeln!(out).map_err(|e| Error::Io(e.to_string()))?;
    Ok(if rep.all_hold() {
        Outcome::Success
    } else {
        Outcome::Failure
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let Some(mode) = cli.mode.or(cli.mode_flag) else {
        eprintln!("error: a mode is required (solve, sweep, check-derivatives, diagnose)");
        return ExitCode::from(1);
    };
    let result = match mode {
        Mode::Solve => solve_mode(&cli),
        Mode::Sweep => sweep_mode(&cli),
        Mode::CheckDerivatives => check_mode(&cli),
        Mode::Diagnose => diagnose_mode(&cli),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Failure) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
