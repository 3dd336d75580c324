//! Files written by `run` and `sweep`: per-cell and aggregate CSVs, run
//! metadata, traces, curves, diagnostics lines and binary artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use prunelab::diagnostics::{validate_condition_set, CheckReport, ConditionConstants};
use prunelab::fmt::float17;
use prunelab::pruner::empty_signal_probability;
use serde_json::json;

use crate::cell::{CellRun, Outcome, SweepCell};
use crate::config::{MaskMode, SweepSpec};
use crate::error::{HarnessError, Result};
use crate::sweep::{Aggregate, METRICS};

pub const CELL_COLUMNS: [&str; 13] = [
    "p",
    "sigma_n",
    "seed",
    "train_loss",
    "train_err",
    "test_loss",
    "test_err",
    "T1",
    "max_gamma_diag",
    "max_zeta",
    "recon_residual",
    "wall_time_s",
    "termination",
];

pub const CURVE_COLUMNS: [&str; 5] = ["t", "train_loss", "train_err", "test_loss", "test_err"];

fn opt(v: Option<f64>) -> String {
    v.map(float17).unwrap_or_default()
}

pub fn aggregate_columns() -> Vec<String> {
    let mut cols = vec!["p".to_owned(), "sigma_n".to_owned(), "cells".to_owned(), "completed".to_owned()];
    for m in METRICS {
        cols.push(format!("{m}_mean"));
        cols.push(format!("{m}_std"));
    }
    cols
}

pub fn write_cells<W: Write>(out: W, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CELL_COLUMNS)?;
    for c in cells {
        let o = c.outcome.as_ref();
        w.write_record([
            float17(c.p),
            float17(c.sigma_n),
            c.seed.to_string(),
            opt(o.map(|o| o.train_loss)),
            opt(o.map(|o| o.train_err)),
            opt(o.map(|o| o.test_loss)),
            opt(o.map(|o| o.test_err)),
            o.and_then(|o| o.t1).map(|t| t.to_string()).unwrap_or_default(),
            opt(o.and_then(|o| o.max_gamma_diag)),
            opt(o.and_then(|o| o.max_zeta)),
            opt(o.and_then(|o| o.recon_residual)),
            opt(c.wall_time_s),
            c.termination.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(reason: impl Into<String>) -> HarnessError {
    HarnessError::Parse { what: "cells csv", input: String::new(), reason: reason.into() }
}

fn field_f64(s: &str, col: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| csv_err(format!("column {col}: `{s}` is not a number")))
}

fn required(s: &str, col: &str) -> Result<f64> {
    field_f64(s, col)?.ok_or_else(|| csv_err(format!("column {col} is empty")))
}

/// Parses a file written by [`write_cells`]. The header must match exactly.
pub fn read_cells<R: Read>(input: R) -> Result<Vec<SweepCell>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(CELL_COLUMNS.iter().copied()) {
        return Err(csv_err(format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut cells = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let outcome = if f(3).is_empty() {
            None
        } else {
            Some(Outcome {
                train_loss: required(f(3), CELL_COLUMNS[3])?,
                train_err: required(f(4), CELL_COLUMNS[4])?,
                test_loss: required(f(5), CELL_COLUMNS[5])?,
                test_err: required(f(6), CELL_COLUMNS[6])?,
                t1: match f(7) {
                    "" => None,
                    s => Some(s.parse().map_err(|_| csv_err(format!("column T1: `{s}` is not an iteration")))?),
                },
                max_gamma_diag: field_f64(f(8), CELL_COLUMNS[8])?,
                max_zeta: field_f64(f(9), CELL_COLUMNS[9])?,
                recon_residual: field_f64(f(10), CELL_COLUMNS[10])?,
            })
        };
        cells.push(SweepCell {
            p: required(f(0), "p")?,
            sigma_n: required(f(1), "sigma_n")?,
            seed: f(2).parse().map_err(|_| csv_err(format!("column seed: `{}` is not an integer", f(2))))?,
            outcome,
            wall_time_s: field_f64(f(11), "wall_time_s")?,
            termination: f(12).to_owned(),
        });
    }
    Ok(cells)
}

pub fn write_aggregates<W: Write>(out: W, aggregates: &[Aggregate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(aggregate_columns())?;
    for a in aggregates {
        let mut row = vec![float17(a.p), float17(a.sigma_n), a.cells.to_string(), a.completed.to_string()];
        for s in &a.stats {
            row.push(opt(s.map(|s| s.mean)));
            row.push(opt(s.map(|s| s.std)));
        }
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve<W: Write>(out: W, run: &CellRun) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_COLUMNS)?;
    for pt in &run.curve {
        let Some(row) = run.trace.rows.iter().find(|r| r.t == pt.t) else { continue };
        w.write_record([
            pt.t.to_string(),
            float17(row.train_loss),
            float17(row.train_err),
            float17(pt.test_loss),
            float17(pt.test_err),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reports<W: Write>(mut out: W, reports: &[CheckReport]) -> Result<()> {
    for r in reports {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes `cells.csv`, `aggregates.csv` and `metadata.json` under `dir`.
pub fn write_sweep(dir: &Path, spec: &SweepSpec, cells: &[SweepCell], aggregates: &[Aggregate]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let paths = [dir.join("cells.csv"), dir.join("aggregates.csv"), dir.join("metadata.json")];
    write_cells(create(&paths[0])?, cells)?;
    write_aggregates(create(&paths[1])?, aggregates)?;
    let conditions = validate_condition_set(&spec.base.regime_params(), None, &ConditionConstants::default());
    let b = &spec.base;
    let conditioning = match b.mask {
        MaskMode::Bernoulli => serde_json::Value::Null,
        MaskMode::NoSignal => {
            let accept = empty_signal_probability(b.classes, b.width, b.p)?;
            json!({
                "method": "signal coordinates zeroed in an otherwise Bernoulli draw; same law as redrawing until every signal set is empty",
                "acceptance_probability": accept,
                "expected_rejections": 1.0 / accept - 1.0,
            })
        }
    };
    let meta = json!({
        "preset": spec.preset.name(),
        "cells": cells.len(),
        "completed": cells.iter().filter(|c| c.outcome.is_some()).count(),
        "conversion_note": spec.conversion_note(),
        "config": spec.to_config_string(),
        "mask_conditioning": conditioning,
        "condition_set": conditions,
    });
    let mut m = create(&paths[2])?;
    serde_json::to_writer_pretty(&mut m, &meta)?;
    writeln!(m)?;
    m.flush()?;
    Ok(paths.to_vec())
}

/// Writes a single run's artifacts under `dir`: `trace.csv`, `mask.bin`,
/// `checkpoint.bin`, plus `curve.csv`, `coefficients.csv` and
/// `diagnostics.jsonl` when the run produced them.
pub fn write_run(dir: &Path, run: &CellRun) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let mut put = |name: &str| {
        let p = dir.join(name);
        paths.push(p.clone());
        p
    };
    run.trace.write_csv(create(&put("trace.csv"))?)?;
    run.net.mask().write_to(create(&put("mask.bin"))?)?;
    run.net.checkpoint().write_to(create(&put("checkpoint.bin"))?)?;
    write_cells(create(&put("cell.csv"))?, std::slice::from_ref(&run.cell))?;
    if !run.curve.is_empty() {
        write_curve(create(&put("curve.csv"))?, run)?;
    }
    if let Some(state) = &run.decomp {
        state.write_snapshot_csv(create(&put("coefficients.csv"))?, true)?;
    }
    if !run.reports.is_empty() {
        write_reports(create(&put("diagnostics.jsonl"))?, &run.reports)?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<SweepCell> {
        vec![
            SweepCell {
                p: 0.7,
                sigma_n: 0.5,
                seed: 3,
                outcome: Some(Outcome {
                    train_loss: 0.1 + 0.2,
                    train_err: 0.0,
                    test_loss: std::f64::consts::PI,
                    test_err: 0.25,
                    t1: Some(140),
                    max_gamma_diag: Some(1.0e-300),
                    max_zeta: None,
                    recon_residual: Some(3e-17),
                }),
                wall_time_s: Some(1.5),
                termination: "loss_below_epsilon".into(),
            },
            SweepCell { p: 0.1, sigma_n: 0.5, seed: 0, outcome: None, wall_time_s: None, termination: "numeric_error".into() },
        ]
    }

    #[test]
    fn cells_round_trip_bit_exact() {
        let mut buf = Vec::new();
        write_cells(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("p,sigma_n,seed,train_loss,train_err,test_loss,test_err,T1,"));
        assert_eq!(read_cells(&buf[..]).unwrap(), sample());
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(read_cells("a,b\n1,2\n".as_bytes()).is_err());
        let bad = format!("{}\nx,1,0,,,,,,,,,,error\n", CELL_COLUMNS.join(","));
        assert!(read_cells(bad.as_bytes()).is_err());
    }

    #[test]
    fn aggregate_header_pairs_metrics() {
        let cols = aggregate_columns();
        assert_eq!(cols.len(), 4 + 2 * METRICS.len());
        assert_eq!(cols[4], "train_loss_mean");
        assert_eq!(cols.last().unwrap(), "wall_time_s_std");
    }
}
