//! Full-batch gradient descent with trajectory logging.

use std::io::Write;

use crate::decomp::DecompState;
use crate::error::{config_err, Result};
use crate::fmt::float17;
use crate::model::{loss_and_grad, ForwardRecord, MaskedNet, PatchBatch};
use crate::pruner::partition_neurons;
use crate::synthdata::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    /// Stop once the pre-step training loss is at or below this value.
    pub epsilon: f64,
    pub t_max: u64,
    pub log_every: u64,
    pub track_decomposition: bool,
    /// Crossing level for phase detection; `None` means `m^{-1/q}`.
    pub phase_threshold: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return config_err(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.epsilon > 0.0) {
            return config_err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.t_max == 0 {
            return config_err("t_max must be at least 1");
        }
        if self.log_every == 0 {
            return config_err("log_every must be at least 1");
        }
        Ok(())
    }

    pub fn threshold_for(&self, net: &MaskedNet) -> f64 {
        self.phase_threshold.unwrap_or_else(|| default_phase_threshold(net))
    }
}

/// `m^{-1/q}` with `q` the activation degree.
pub fn default_phase_threshold(net: &MaskedNet) -> f64 {
    (net.shape().width as f64).powf(-1.0 / net.activation().degree() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    LossBelowEpsilon,
    TMaxReached,
    NumericError(String),
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::LossBelowEpsilon => "loss_below_epsilon",
            Termination::TMaxReached => "t_max_reached",
            Termination::NumericError(_) => "numeric_error",
        }
    }
}

/// Which coefficient family drives phase detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    /// `max_r gamma_{j,r,j}` per class.
    Signal,
    /// `min_{i: y_i = j} max_r zeta_{j,r,i}` per class.
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: u64,
    pub train_loss: f64,
    pub train_err: f64,
    pub max_gamma_diag: Option<f64>,
    pub max_zeta: Option<f64>,
    pub max_abs_omega: Option<f64>,
    pub max_abs_gamma_offdiag: Option<f64>,
    pub grad_sq_norm: f64,
    pub recon_residual: Option<f64>,
    /// Per class: `max_r gamma_{j,r,j}`, or `max_r <w~_{j,r}, mu_j>` without tracking.
    pub class_signal: Vec<f64>,
    /// Per class: smallest over class-`j` samples of `max_r zeta_{j,r,i}`, or of
    /// `max_r <w~_{j,r}, xi_i>` without tracking.
    pub class_noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub termination: Termination,
    /// Iteration of the final weights.
    pub final_t: u64,
    /// Largest per-step increase of the relative reconstruction residual.
    pub max_residual_growth: Option<f64>,
    /// Largest relative reconstruction residual over all steps.
    pub max_residual: Option<f64>,
    /// Largest gradient-bound ratio over all steps.
    pub max_bound_ratio: Option<f64>,
    pub phase_threshold: f64,
    /// Signal when any class keeps its signal coordinate, noise otherwise.
    pub phase_kind: PhaseKind,
    /// First logged iteration at which each class crosses `phase_threshold`.
    pub t1: Vec<Option<u64>>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub const CSV_HEADER: &'static str =
        "t,train_loss,train_err,max_gamma_diag,max_zeta,max_abs_omega,max_abs_gamma_offdiag,grad_sq_norm,recon_residual";

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(float17).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.t,
                float17(r.train_loss),
                float17(r.train_err),
                opt(r.max_gamma_diag),
                opt(r.max_zeta),
                opt(r.max_abs_omega),
                opt(r.max_abs_gamma_offdiag),
                float17(r.grad_sq_norm),
                opt(r.recon_residual),
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StepStats {
    /// Training loss before the step.
    pub loss: f64,
    pub train_err: f64,
    pub grad_sq_norm: f64,
    /// Forward pass at the pre-step iterate.
    pub forward: ForwardRecord,
}

/// One full-batch step `w <- w - eta * grad`. On a non-finite update the
/// weights stay at the last finite iterate and the error is returned.
pub fn gd_step(net: &mut MaskedNet, batch: &PatchBatch, eta: f64) -> Result<StepStats> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return config_err(format!("eta must be non-negative, got {eta}"));
    }
    let lg = loss_and_grad(net, batch)?;
    net.apply_update(&lg.grad, eta)?;
    Ok(StepStats {
        loss: lg.loss,
        train_err: lg.forward.error_rate(),
        grad_sq_norm: lg.grad.iter().map(|g| g * g).sum(),
        forward: lg.forward,
    })
}

/// Extra per-step quantities tracked alongside the trace.
pub struct TrainHooks<'a> {
    /// Called at every logged iteration with the iterate being logged.
    pub observer: Option<&'a mut dyn FnMut(u64, &MaskedNet)>,
    /// Normalizer for the gradient-bound ratio, see [`crate::model::grad_bound_scale`].
    pub bound_scale: Option<f64>,
}

impl Default for TrainHooks<'_> {
    fn default() -> Self {
        Self { observer: None, bound_scale: None }
    }
}

pub fn train(net: &mut MaskedNet, data: &Dataset, cfg: &TrainConfig, decomp: Option<&mut DecompState>) -> Result<TrainTrace> {
    train_with(net, data, cfg, decomp, TrainHooks::default())
}

/// Runs gradient descent until the training loss reaches `epsilon` or
/// `t_max` steps have been taken. Numeric failures end the run with
/// [`Termination::NumericError`] and the partial trace.
pub fn train_with(
    net: &mut MaskedNet,
    data: &Dataset,
    cfg: &TrainConfig,
    mut decomp: Option<&mut DecompState>,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if cfg.track_decomposition && decomp.is_none() {
        return config_err("decomposition tracking requested without a decomposition state");
    }
    if !cfg.track_decomposition {
        decomp = None;
    }
    let batch = PatchBatch::new(data)?;
    let threshold = cfg.threshold_for(net);
    let mut trace = TrainTrace {
        rows: Vec::new(),
        termination: Termination::TMaxReached,
        final_t: net.iteration(),
        max_residual_growth: decomp.as_ref().map(|_| 0.0),
        max_residual: None,
        max_bound_ratio: None,
        phase_threshold: threshold,
        phase_kind: if partition_neurons(net.mask()).all_signal_sets_empty() {
            PhaseKind::Noise
        } else {
            PhaseKind::Signal
        },
        t1: Vec::new(),
    };
    let mut last_residual = match decomp.as_deref() {
        Some(state) => {
            let r = state.residual(net)?.max_rel_residual;
            trace.max_residual = Some(r);
            Some(r)
        }
        None => None,
    };

    let start = net.iteration();
    loop {
        let t = net.iteration();
        let lg = match loss_and_grad(net, &batch) {
            Ok(lg) => lg,
            Err(e) => {
                trace.termination = Termination::NumericError(e.to_string());
                break;
            }
        };
        let grad_sq_norm: f64 = lg.grad.iter().map(|g| g * g).sum();
        if let Some(scale) = hooks.bound_scale {
            if lg.loss > 0.0 {
                let ratio = grad_sq_norm / (scale * lg.loss);
                trace.max_bound_ratio = Some(trace.max_bound_ratio.map_or(ratio, |m: f64| m.max(ratio)));
            }
        }
        let done = if lg.loss <= cfg.epsilon {
            Some(Termination::LossBelowEpsilon)
        } else if t - start >= cfg.t_max {
            Some(Termination::TMaxReached)
        } else {
            None
        };
        if done.is_some() || (t - start) % cfg.log_every == 0 {
            trace.rows.push(trace_row(t, &lg.forward, grad_sq_norm, net, data, decomp.as_deref(), last_residual));
            if let Some(obs) = hooks.observer.as_mut() {
                obs(t, net);
            }
        }
        if let Some(reason) = done {
            trace.termination = reason;
            break;
        }

        if let Some(state) = decomp.as_deref_mut() {
            state.update_coefficients(&lg.forward, cfg.eta)?;
        }
        if let Err(e) = net.apply_update(&lg.grad, cfg.eta) {
            trace.termination = Termination::NumericError(e.to_string());
            break;
        }
        if let Some(state) = decomp.as_deref() {
            let r = state.residual(net)?.max_rel_residual;
            let prev = last_residual.unwrap_or(0.0);
            trace.max_residual_growth = Some(trace.max_residual_growth.unwrap_or(0.0).max(r - prev));
            trace.max_residual = Some(trace.max_residual.unwrap_or(0.0).max(r));
            last_residual = Some(r);
        }
    }
    trace.final_t = net.iteration();
    trace.t1 = detect_phase_transition(&trace, threshold, trace.phase_kind);
    Ok(trace)
}

fn trace_row(
    t: u64,
    fwd: &ForwardRecord,
    grad_sq_norm: f64,
    net: &MaskedNet,
    data: &Dataset,
    decomp: Option<&DecompState>,
    residual: Option<f64>,
) -> TraceRow {
    let shape = net.shape();
    let (class_signal, class_noise) = match decomp {
        Some(state) => (state.class_max_gamma_diag(), state.class_min_sample_max_zeta()),
        None => {
            let mu = data.config().mu;
            let signal = (0..shape.classes)
                .map(|j| (0..shape.width).map(|r| mu * net.row(j, r)[j]).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let mut noise = vec![f64::INFINITY; shape.classes];
            for (i, s) in data.samples().iter().enumerate() {
                let y = s.label;
                let best = (0..shape.width)
                    .map(|r| fwd.preactivation(i, s.noise_slot(), shape.row(y, r)))
                    .fold(f64::NEG_INFINITY, f64::max);
                noise[y] = noise[y].min(best);
            }
            (signal, noise)
        }
    };
    TraceRow {
        t,
        train_loss: fwd.mean_loss(),
        train_err: fwd.error_rate(),
        max_gamma_diag: decomp.map(DecompState::max_gamma_diag),
        max_zeta: decomp.map(DecompState::max_zeta),
        max_abs_omega: decomp.map(DecompState::max_abs_omega),
        max_abs_gamma_offdiag: decomp.map(DecompState::max_abs_gamma_offdiag),
        grad_sq_norm,
        recon_residual: residual,
        class_signal,
        class_noise,
    }
}

/// First logged iteration at which each class's tracked quantity reaches `threshold`.
pub fn detect_phase_transition(trace: &TrainTrace, threshold: f64, kind: PhaseKind) -> Vec<Option<u64>> {
    let classes = trace.rows.first().map_or(0, |r| r.class_signal.len());
    (0..classes)
        .map(|j| {
            trace
                .rows
                .iter()
                .find(|row| {
                    let v = match kind {
                        PhaseKind::Signal => row.class_signal[j],
                        PhaseKind::Noise => row.class_noise[j],
                    };
                    v >= threshold
                })
                .map(|row| row.t)
        })
        .collect()
}
