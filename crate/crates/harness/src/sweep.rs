//! Grid execution and per-grid-point aggregation.

use log::{info, warn};
use rayon::prelude::*;

use crate::cell::{run_cell, SweepCell};
use crate::config::SweepSpec;
use crate::error::{HarnessError, Result};

/// Mean and population standard deviation over the cells where a value exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

/// Aggregated metric names, in column order.
pub const METRICS: [&str; 9] =
    ["train_loss", "train_err", "test_loss", "test_err", "T1", "max_gamma_diag", "max_zeta", "recon_residual", "wall_time_s"];

fn metric(cell: &SweepCell, name: &str) -> Option<f64> {
    if name == "wall_time_s" {
        return cell.wall_time_s;
    }
    let o = cell.outcome.as_ref()?;
    match name {
        "train_loss" => Some(o.train_loss),
        "train_err" => Some(o.train_err),
        "test_loss" => Some(o.test_loss),
        "test_err" => Some(o.test_err),
        "T1" => o.t1.map(|t| t as f64),
        "max_gamma_diag" => o.max_gamma_diag,
        "max_zeta" => o.max_zeta,
        "recon_residual" => o.recon_residual,
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub p: f64,
    pub sigma_n: f64,
    pub cells: usize,
    /// Cells that finished without a numeric error.
    pub completed: usize,
    /// One entry per name in [`METRICS`].
    pub stats: Vec<Option<Stat>>,
}

/// Groups consecutive cells sharing `(p, sigma_n)`; expects cells in sweep order.
pub fn aggregate(cells: &[SweepCell]) -> Vec<Aggregate> {
    let mut out: Vec<Aggregate> = Vec::new();
    let mut start = 0;
    while start < cells.len() {
        let key = (cells[start].p, cells[start].sigma_n);
        let end = start + cells[start..].iter().take_while(|c| (c.p, c.sigma_n) == key).count();
        let group = &cells[start..end];
        let stats = METRICS
            .iter()
            .map(|m| Stat::of(&group.iter().filter_map(|c| metric(c, m)).collect::<Vec<_>>()))
            .collect();
        out.push(Aggregate {
            p: key.0,
            sigma_n: key.1,
            cells: group.len(),
            completed: group.iter().filter(|c| c.outcome.is_some()).count(),
            stats,
        });
        start = end;
    }
    out
}

impl Aggregate {
    pub fn stat(&self, name: &str) -> Option<Stat> {
        METRICS.iter().position(|m| *m == name).and_then(|i| self.stats[i])
    }
}

/// Sorts cells by `(p, sigma_n, seed)`, all ascending.
pub fn sort_cells(cells: &mut [SweepCell]) {
    cells.sort_by(|a, b| a.p.total_cmp(&b.p).then(a.sigma_n.total_cmp(&b.sigma_n)).then(a.seed.cmp(&b.seed)));
}

/// Runs every cell of the grid on `threads` workers. A failing cell becomes a
/// row with termination `error` rather than aborting the sweep.
pub fn run_sweep(spec: &SweepSpec, threads: usize) -> Result<Vec<SweepCell>> {
    spec.validate()?;
    let mut jobs = Vec::with_capacity(spec.cell_count());
    for &p in &spec.p_values {
        for &sigma_n in &spec.sigma_n_values {
            for &seed in &spec.seeds {
                jobs.push(spec.cell_config(p, sigma_n, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Invalid(format!("thread pool: {e}")))?;
    info!("running {} cells on {} threads", jobs.len(), threads.max(1));
    let mut cells: Vec<SweepCell> = pool.install(|| {
        jobs.par_iter()
            .map(|cfg| match run_cell(cfg) {
                Ok(run) => run.cell,
                Err(e) => {
                    warn!("cell p={} sigma_n={} seed={} failed: {e}", cfg.p, cfg.sigma_n, cfg.seed);
                    SweepCell {
                        p: cfg.p,
                        sigma_n: cfg.sigma_n,
                        seed: cfg.seed,
                        outcome: None,
                        wall_time_s: None,
                        termination: "error".into(),
                    }
                }
            })
            .collect()
    });
    sort_cells(&mut cells);
    Ok(cells)
}
