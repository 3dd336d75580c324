//! One grid cell: data, mask and network from the cell's seed, training,
//! evaluation and optional diagnostics.

use std::time::Instant;

use prunelab::decomp::{coefficient_bounds_check, init_decomp, BoundsConfig, DecompState};
use prunelab::diagnostics::{
    check_class_balance, check_coefficient_bounds, check_generalization_gap, check_grad_bound,
    check_init_correlations, check_noise_geometry, check_test_noise_concentration, validate_condition_set,
    CheckReport, ConditionConstants, DiagConfig,
};
use prunelab::model::{eval_metrics, grad_bound_scale, grad_norm_bound_check, init_weights, MaskedNet};
use prunelab::pruner::{sample_mask, sample_mask_without_signal, Mask};
use prunelab::synthdata::{fresh_eval_set, generate_dataset, Dataset};
use prunelab::trainer::{train_with, Termination, TrainHooks, TrainTrace};

use crate::config::{MaskMode, RunConfig};
use crate::error::Result;

/// Outcome columns of a cell that terminated without a numeric error.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub train_loss: f64,
    pub train_err: f64,
    pub test_loss: f64,
    pub test_err: f64,
    /// Iteration by which every class crossed the phase threshold.
    pub t1: Option<u64>,
    pub max_gamma_diag: Option<f64>,
    pub max_zeta: Option<f64>,
    /// Largest relative reconstruction residual over the run.
    pub recon_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub p: f64,
    pub sigma_n: f64,
    pub seed: u64,
    pub outcome: Option<Outcome>,
    /// `None` when timing is suppressed for byte-stable output.
    pub wall_time_s: Option<f64>,
    pub termination: String,
}

/// Test metrics at a logged iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub t: u64,
    pub test_loss: f64,
    pub test_err: f64,
}

/// Everything a cell produced, for callers that need more than the summary row.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub cell: SweepCell,
    pub trace: TrainTrace,
    pub net0: MaskedNet,
    pub net: MaskedNet,
    pub decomp: Option<DecompState>,
    pub data: Dataset,
    pub eval: Dataset,
    pub curve: Vec<CurvePoint>,
    /// For conditioned masks, the probability that a plain draw has no signal sets.
    pub acceptance_probability: Option<f64>,
    pub reports: Vec<CheckReport>,
}

pub fn build_mask(cfg: &RunConfig) -> Result<(Mask, Option<f64>)> {
    Ok(match cfg.mask {
        MaskMode::Bernoulli => (sample_mask(cfg.shape(), cfg.p, cfg.seed)?, None),
        MaskMode::NoSignal => {
            let c = sample_mask_without_signal(cfg.shape(), cfg.p, cfg.seed)?;
            (c.mask, Some(c.acceptance_probability))
        }
    })
}

pub fn run_cell(cfg: &RunConfig) -> Result<CellRun> {
    cfg.validate()?;
    let started = Instant::now();
    let data = generate_dataset(&cfg.data_config())?;
    let eval = fresh_eval_set(&cfg.data_config(), cfg.n_eval)?;
    let (mask, acceptance_probability) = build_mask(cfg)?;
    let net0 = init_weights(mask, cfg.activation, cfg.sigma0, cfg.seed)?;
    let mut net = net0.clone();
    let mut decomp = if cfg.track_decomposition { Some(init_decomp(&net, &data)?) } else { None };

    let mut curve = Vec::new();
    let mut record = |t: u64, n: &MaskedNet| {
        if let Ok((test_loss, test_err)) = eval_metrics(n, &eval) {
            curve.push(CurvePoint { t, test_loss, test_err });
        }
    };
    let hooks = TrainHooks {
        observer: if cfg.eval_curve { Some(&mut record) } else { None },
        bound_scale: Some(grad_bound_scale(cfg.shape(), cfg.activation, cfg.mu, cfg.sigma_n, cfg.p)),
    };
    let trace = train_with(&mut net, &data, &cfg.train_config(), decomp.as_mut(), hooks)?;

    let outcome = match (&trace.termination, trace.last()) {
        (Termination::NumericError(_), _) | (_, None) => None,
        (_, Some(last)) => {
            let (test_loss, test_err) = eval_metrics(&net, &eval)?;
            let t1 = match &decomp {
                Some(_) => trace.t1.iter().copied().collect::<Option<Vec<u64>>>().and_then(|v| v.into_iter().max()),
                None => None,
            };
            Some(Outcome {
                train_loss: last.train_loss,
                train_err: last.train_err,
                test_loss,
                test_err,
                t1,
                max_gamma_diag: decomp.as_ref().map(DecompState::max_gamma_diag),
                max_zeta: decomp.as_ref().map(DecompState::max_zeta),
                recon_residual: trace.max_residual,
            })
        }
    };

    let reports = if cfg.diagnostics && outcome.is_some() {
        diagnostics(cfg, &net0, &net, &data, &eval, &trace, decomp.as_ref())?
    } else {
        Vec::new()
    };

    let cell = SweepCell {
        p: cfg.p,
        sigma_n: cfg.sigma_n,
        seed: cfg.seed,
        outcome,
        wall_time_s: Some(started.elapsed().as_secs_f64()),
        termination: trace.termination.label().to_owned(),
    };
    Ok(CellRun { cell, trace, net0, net, decomp, data, eval, curve, acceptance_probability, reports })
}

fn diagnostics(
    cfg: &RunConfig,
    net0: &MaskedNet,
    net: &MaskedNet,
    data: &Dataset,
    eval: &Dataset,
    trace: &TrainTrace,
    decomp: Option<&DecompState>,
) -> Result<Vec<CheckReport>> {
    let dc = DiagConfig { epsilon: cfg.epsilon, mc_seed: cfg.seed, ..Default::default() };
    let mut out = vec![
        check_init_correlations(net0, data, &dc),
        check_class_balance(data),
        check_noise_geometry(net0.mask(), data, &dc),
        validate_condition_set(&cfg.regime_params(), Some((net0, data)), &ConditionConstants::default()),
        check_test_noise_concentration(net, cfg.sigma_n, &dc)?,
        check_generalization_gap(net, eval, cfg.n_train, &dc)?.0,
        check_grad_bound(&grad_norm_bound_check(net, data)?, trace.max_bound_ratio, &dc),
    ];
    if let Some(state) = decomp {
        let bounds = BoundsConfig { t_max: cfg.t_max, ..Default::default() };
        out.push(check_coefficient_bounds(&coefficient_bounds_check(state, cfg.sigma_n, cfg.p, &bounds)));
    }
    Ok(out)
}
