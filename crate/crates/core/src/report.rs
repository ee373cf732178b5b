//! JSON and CSV output for solve and sweep reports.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::driver::{Eoc, LambdaRun, SweepReport};
use crate::error::{Error, Result};
use crate::solver::SolveReport;

pub const CSV_HEADER: [&str; 11] = [
    "problem",
    "lambda",
    "status",
    "iters",
    "final_resid",
    "F",
    "f",
    "EOC",
    "delta_F",
    "delta_f",
    "delta",
];

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

pub fn write_json<T: Serialize, W: Write>(value: &T, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, value).map_err(io_err)
}

pub fn read_json<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<T> {
    serde_json::from_reader(input).map_err(io_err)
}

/// Shortest representation that parses back to the same value. Very small
/// and very large magnitudes switch to exponent notation.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn eoc_cell(e: Eoc) -> String {
    match e {
        Eoc::Exact => "exact".to_string(),
        Eoc::Value(v) => num(v),
        Eoc::Absent => String::new(),
        Eoc::Undefined => "undefined".to_string(),
    }
}

pub fn csv_row(problem: &str, run: &LambdaRun) -> [String; 11] {
    let r = &run.report;
    let d = run.delta;
    [
        problem.to_string(),
        num(run.lambda),
        r.status.as_str().to_string(),
        r.iterations.to_string(),
        num(r.final_residual),
        opt(r.upper_objective),
        opt(r.lower_objective),
        eoc_cell(r.eoc),
        opt(d.map(|d| d.delta_upper)),
        opt(d.map(|d| d.delta_lower)),
        opt(d.and_then(|d| d.delta)),
    ]
}

pub fn write_sweep_csv<W: Write>(reports: &[SweepReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(io_err)?;
    for rep in reports {
        for run in &rep.runs {
            w.write_record(csv_row(&rep.problem, run)).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Single solve as a one-row table.
pub fn write_solve_csv<W: Write>(report: &SolveReport, out: W) -> Result<()> {
    let run = LambdaRun {
        lambda: report.lambda,
        report: report.clone(),
        delta: None,
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(io_err)?;
    w.write_record(csv_row(&report.problem, &run))
        .map_err(io_err)?;
    w.flush().map_err(io_err)
}
