//! Runtime checks of the measurable high-probability statements about
//! initialization, data, noise geometry and trained networks.
//!
//! Every check is read-only and returns a [`CheckReport`]. Checks whose
//! hypotheses are unmet report [`Status::Informational`] instead of failing.
//! Slack entries are normalized so that a value at most 1 means the
//! corresponding bound holds: `measured / upper` for upper bounds and
//! `lower / measured` for lower bounds.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::decomp::PropReport;
use crate::error::{config_err, Result};
use crate::model::{eval_metrics, BoundReport, MaskedNet};
use crate::pruner::{partition_neurons, Mask};
use crate::rng::{self, Stream};
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Informational,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check_id: &'static str,
    pub passed: Status,
    pub measured: BTreeMap<String, f64>,
    pub bound: BTreeMap<String, f64>,
    pub slack: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl CheckReport {
    fn new(check_id: &'static str) -> Self {
        Self {
            check_id,
            passed: Status::Informational,
            measured: BTreeMap::new(),
            bound: BTreeMap::new(),
            slack: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    /// Records a measured value; non-finite values are replaced by a note.
    fn measure(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.measured.insert(name.to_owned(), value);
        } else {
            self.notes.push(format!("{name} is not finite ({value})"));
        }
    }

    fn upper(&mut self, name: &str, measured: f64, bound: f64) -> bool {
        self.measure(name, measured);
        self.bound.insert(format!("{name}_upper"), bound);
        let slack = if measured == 0.0 { 0.0 } else { measured / bound };
        if slack.is_finite() {
            self.slack.insert(format!("{name}_upper"), slack);
        }
        measured <= bound
    }

    fn lower(&mut self, name: &str, measured: f64, bound: f64) -> bool {
        self.measure(name, measured);
        self.bound.insert(format!("{name}_lower"), bound);
        let slack = if bound == 0.0 { 0.0 } else { bound / measured };
        if slack.is_finite() {
            self.slack.insert(format!("{name}_lower"), slack);
        }
        measured >= bound
    }

    fn verdict(&mut self, hypothesis: bool, holds: bool) {
        self.passed = match (hypothesis, holds) {
            (false, _) => Status::Informational,
            (true, true) => Status::Pass,
            (true, false) => Status::Fail,
        };
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report maps hold finite numbers only")
    }
}

/// Constants for the checks. Unnamed asymptotic constants default to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagConfig {
    /// Generic constant `C` in hypotheses and bound forms.
    pub c: f64,
    /// Number of `(j, r, i, i')` tuples drawn by the noise-geometry check.
    pub geometry_samples: usize,
    /// Monte-Carlo draws for the test-noise check.
    pub n_mc: usize,
    pub mc_seed: u64,
    /// Target training loss, used by the generalization reference value.
    pub epsilon: f64,
    /// Ceiling asserted on the gradient-bound ratio.
    pub grad_ratio_limit: f64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self { c: 1.0, geometry_samples: 2000, n_mc: 2000, mc_seed: 0, epsilon: 1e-2, grad_ratio_limit: 100.0 }
    }
}

fn ln(x: f64) -> f64 {
    x.ln()
}

/// Compares the largest initial noise and signal correlations with their
/// high-probability brackets.
pub fn check_init_correlations(net0: &MaskedNet, data: &Dataset, cfg: &DiagConfig) -> CheckReport {
    let mut rep = CheckReport::new("init_correlations");
    let shape = net0.shape();
    let (k, m, d) = (shape.classes as f64, shape.width as f64, shape.dim as f64);
    let p = net0.mask().p();
    let sigma0 = net0.sigma0();
    let dc = data.config();

    // per (j, i): max_r <w~_{j,r}, xi_i>
    let mut noise = Array2::<f64>::zeros((data.len(), shape.dim));
    for (mut row, s) in noise.rows_mut().into_iter().zip(data.samples()) {
        row.assign(&ndarray::ArrayView1::from(s.noise()));
    }
    let corr = noise.dot(&net0.weights().t());
    let mut noise_lo = f64::INFINITY;
    let mut noise_hi = f64::NEG_INFINITY;
    for row in corr.rows() {
        for j in 0..shape.classes {
            let best = (0..shape.width).map(|r| row[shape.row(j, r)]).fold(f64::NEG_INFINITY, f64::max);
            noise_lo = noise_lo.min(best);
            noise_hi = noise_hi.max(best);
        }
    }
    let noise_scale = sigma0 * dc.sigma_n * (p * d).sqrt();
    // a zero scale makes the lower bracket degenerate; count it as violated
    let mut holds = rep.lower("noise_max_min", noise_lo, noise_scale) && noise_scale > 0.0;
    holds &= rep.upper("noise_max_max", noise_hi, (2.0 * ln(k * m * d)).sqrt() * noise_scale);

    let partition = partition_neurons(net0.mask());
    let mut sig_lo = f64::INFINITY;
    let mut sig_hi = f64::NEG_INFINITY;
    for j in 0..shape.classes {
        if partition.signal[j].is_empty() {
            rep.notes.push(format!("class {j}: empty signal set, signal bracket not applicable"));
            continue;
        }
        let best = partition.signal[j]
            .iter()
            .map(|&r| dc.mu * net0.row(j, r)[j])
            .fold(f64::NEG_INFINITY, f64::max);
        sig_lo = sig_lo.min(best);
        sig_hi = sig_hi.max(best);
    }
    if sig_lo.is_finite() {
        holds &= rep.lower("signal_max_min", sig_lo, sigma0 * dc.mu);
        let log_arg = (8.0 * p * m * k * d).max(1.0);
        holds &= rep.upper("signal_max_max", sig_hi, (2.0 * ln(log_arg)).sqrt() * sigma0 * dc.mu);
    }

    let hypothesis = p * m >= cfg.c * ln(k * d);
    if !hypothesis {
        rep.notes.push(format!("p m = {} below C log(K d); regime outside the hypothesis", p * m));
    }
    rep.verdict(hypothesis, holds);
    rep
}

/// Per-class counts against `[0.5 n / K, 1.5 n / K]`.
pub fn check_class_balance(data: &Dataset) -> CheckReport {
    let mut rep = CheckReport::new("class_balance");
    let counts = data.class_counts();
    let (n, k, d) = (data.len() as f64, counts.len() as f64, data.dim() as f64);
    let mut holds = true;
    for (j, &c) in counts.iter().enumerate() {
        let name = format!("count_{j}");
        holds &= rep.lower(&name, c as f64, 0.5 * n / k);
        holds &= rep.upper(&name, c as f64, 1.5 * n / k);
    }
    let hypothesis = counts.len() == 1 || n >= 2.0 * k * k * ln(4.0 * k * d);
    if !hypothesis {
        rep.notes.push(format!("n = {n} below 2 K^2 log(4 K d)"));
    }
    rep.verdict(hypothesis, holds);
    rep
}

/// Empirical constants of the masked-noise geometry over sampled tuples.
pub fn check_noise_geometry(mask: &Mask, data: &Dataset, cfg: &DiagConfig) -> CheckReport {
    let mut rep = CheckReport::new("noise_geometry");
    let shape = mask.shape();
    let (n, d) = (data.len(), shape.dim as f64);
    let dc = data.config();
    let pd = mask.p() * d;
    let log_d = ln(d).max(f64::MIN_POSITIVE);
    let mut rng = rng::stream(cfg.mc_seed, Stream::Custom(1));

    let mut norm_ratios = Vec::with_capacity(cfg.geometry_samples);
    let mut norms = Vec::with_capacity(cfg.geometry_samples);
    let mut cross_max: f64 = 0.0;
    let mut signal_max: f64 = 0.0;
    let ratio = |num: f64, den: f64| if num == 0.0 { 0.0 } else { num / den };
    for _ in 0..cfg.geometry_samples {
        let j = rng.random_range(0..shape.classes);
        let r = rng.random_range(0..shape.width);
        let bits = mask.row(shape.row(j, r));
        let i = rng.random_range(0..n);
        let xi = data.samples()[i].noise();
        let norm_sq: f64 = xi.iter().zip(bits).filter(|(_, b)| **b == 1).map(|(x, _)| x * x).sum();
        norms.push(norm_sq);
        norm_ratios.push(ratio(norm_sq, dc.sigma_n * dc.sigma_n * pd));
        if n > 1 {
            let picks = sample_indices(&mut rng, n - 1, 1).index(0);
            let other = data.samples()[if picks >= i { picks + 1 } else { picks }].noise();
            let cross: f64 = xi.iter().zip(other).zip(bits).filter(|(_, b)| **b == 1).map(|((a, b), _)| a * b).sum();
            cross_max = cross_max.max(ratio(cross.abs(), dc.sigma_n * dc.sigma_n * (pd * log_d).sqrt()));
        }
        let k = rng.random_range(0..shape.classes);
        let proj = if bits[k] == 1 { dc.mu * xi[k] } else { 0.0 };
        signal_max = signal_max.max(ratio(proj.abs(), dc.sigma_n * dc.mu * log_d.sqrt()));
    }
    norms.sort_by(f64::total_cmp);
    let lo = norm_ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norm_ratios.iter().copied().fold(0.0, f64::max);
    let mut holds = rep.lower("norm_ratio_min", lo, 0.5);
    holds &= rep.upper("norm_ratio_max", hi, 1.5);
    rep.measure("norm_sq_median", norms.get(norms.len() / 2).copied().unwrap_or(0.0));
    rep.measure("cross_ratio_max", cross_max);
    rep.measure("signal_ratio_max", signal_max);

    let hypothesis = dc.sigma_n > 0.0 && pd >= cfg.c * log_d && !norms.is_empty();
    if !hypothesis {
        rep.notes.push("sigma_n = 0 or p d below C log d; norm bracket not applicable".into());
    }
    rep.verdict(hypothesis, holds);
    rep
}

/// Parameters of a run as seen by the condition set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeParams {
    pub classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub width: usize,
    pub mu: f64,
    pub sigma_n: f64,
    pub sigma0: f64,
    pub eta: f64,
    pub epsilon: f64,
    /// Retention probability.
    pub p: f64,
    /// Activation degree, 1 for relu.
    pub degree: u32,
    pub t_max: u64,
}

/// Explicit constants for the asymptotic parameter conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionConstants {
    /// `K <= c_classes log d`.
    pub c_classes: f64,
    /// `n <= (log d)^c_samples`.
    pub c_samples: f64,
    /// `d >= min_dim`.
    pub min_dim: usize,
    /// `mu / (sigma_n sqrt(d) log d)` within `[lo, hi]`.
    pub snr_window: (f64, f64),
    /// `mu` within `[lo, hi]`.
    pub mu_window: (f64, f64),
    /// `m >= (log d)^c_width`.
    pub c_width: f64,
    /// `sigma0 m^4 n mu` within `[(log d)^-s, (log d)^s]`.
    pub init_polylog: f64,
    /// `d^-c_eta_poly <= eta <= c_eta / mu^2`.
    pub c_eta: f64,
    pub c_eta_poly: f64,
    /// `d^-hi <= epsilon <= d^-lo`.
    pub eps_poly: (f64, f64),
    /// Constant `C` inside the initialization-scale inequality.
    pub c: f64,
    /// Coefficient cap; `None` means `alpha_multiplier * log^{1/q}(t_max)`.
    pub alpha: Option<f64>,
    pub alpha_multiplier: f64,
}

impl Default for ConditionConstants {
    fn default() -> Self {
        Self {
            c_classes: 1.0,
            c_samples: 3.0,
            min_dim: 1000,
            snr_window: (0.05, 20.0),
            mu_window: (0.1, 10.0),
            c_width: 2.0,
            init_polylog: 2.0,
            c_eta: 1.0,
            c_eta_poly: 3.0,
            eps_poly: (0.25, 3.0),
            c: 1.0,
            alpha: None,
            alpha_multiplier: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub name: &'static str,
    pub holds: bool,
    pub measured: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub clauses: Vec<Clause>,
    /// `4 m^{1/q}` times the largest of the four arms; must be at most 1.
    pub init_scale_value: f64,
    pub init_scale_arms: [f64; 4],
    pub alpha: f64,
}

impl ConditionSet {
    pub fn failing(&self) -> Vec<&'static str> {
        let mut out: Vec<_> = self.clauses.iter().filter(|c| !c.holds).map(|c| c.name).collect();
        if !(self.init_scale_value <= 1.0) {
            out.push("init_scale_inequality");
        }
        out
    }
}

fn clause(name: &'static str, measured: f64, lower: Option<f64>, upper: Option<f64>) -> Clause {
    let holds = lower.is_none_or(|l| measured >= l) && upper.is_none_or(|u| measured <= u);
    Clause { name, holds, measured, lower, upper }
}

/// Largest `<w~_{j,r}, mu_k>` and `<w~_{j,r}, xi_i>` at initialization.
pub fn init_correlation_maxima(net0: &MaskedNet, data: &Dataset) -> (f64, f64) {
    let shape = net0.shape();
    let mu = data.config().mu;
    let mut classes_seen = vec![false; shape.classes];
    for y in data.labels() {
        classes_seen[y] = true;
    }
    let mut signal = f64::NEG_INFINITY;
    for row in net0.weights().rows() {
        for (k, seen) in classes_seen.iter().enumerate() {
            if *seen {
                signal = signal.max(mu * row[k]);
            }
        }
    }
    let mut noise = f64::NEG_INFINITY;
    for s in data.samples() {
        let xi = ndarray::ArrayView1::from(s.noise());
        for row in net0.weights().rows() {
            noise = noise.max(row.dot(&xi));
        }
    }
    (signal, noise)
}

/// Evaluates each parameter condition and the initialization-scale inequality.
/// Without an initialized network the correlation arms use their
/// high-probability upper brackets.
pub fn evaluate_conditions(
    params: &RegimeParams,
    init: Option<(&MaskedNet, &Dataset)>,
    consts: &ConditionConstants,
) -> ConditionSet {
    let RegimeParams { classes, dim, n_train, width, mu, sigma_n, sigma0, eta, epsilon, p, degree, t_max } = *params;
    let (k, d, n, m) = (classes as f64, dim as f64, n_train as f64, width as f64);
    let q = degree.max(1) as f64;
    let log_d = ln(d);
    let s = consts.init_polylog;

    let snr = mu / (sigma_n * d.sqrt() * log_d);
    let mut signal = clause("signal_strength", snr, Some(consts.snr_window.0), Some(consts.snr_window.1));
    signal.holds &= mu >= consts.mu_window.0 && mu <= consts.mu_window.1;
    let clauses = vec![
        clause("classes", k, None, Some(consts.c_classes * log_d)),
        clause("samples", n, None, Some(log_d.powf(consts.c_samples))),
        clause("dimension", d, Some(consts.min_dim as f64), None),
        signal,
        clause("width", m, Some(log_d.powf(consts.c_width)), None),
        clause("init_scale", sigma0 * m.powi(4) * n * mu, Some(log_d.powf(-s)), Some(log_d.powf(s))),
        clause("learning_rate", eta, Some(d.powf(-consts.c_eta_poly)), Some(consts.c_eta / (mu * mu))),
        clause("target_loss", epsilon, Some(d.powf(-consts.eps_poly.1)), Some(d.powf(-consts.eps_poly.0))),
    ];

    let alpha = consts.alpha.unwrap_or_else(|| consts.alpha_multiplier * ln(t_max.max(2) as f64).powf(1.0 / q));
    let (init_signal, init_noise) = match init {
        Some((net, data)) => init_correlation_maxima(net, data),
        None => (
            (2.0 * ln((8.0 * p * m * k * d).max(1.0))).sqrt() * sigma0 * mu,
            (2.0 * ln(k * m * d)).sqrt() * sigma0 * sigma_n * (p * d).sqrt(),
        ),
    };
    let c = consts.c;
    let arms = [
        init_signal,
        c * n * alpha * mu * log_d.sqrt() / (sigma_n * p * d),
        init_noise,
        3.0 * c * n * alpha * (log_d / (p * d)).sqrt(),
    ];
    let top = arms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ConditionSet { clauses, init_scale_value: 4.0 * m.powf(1.0 / q) * top, init_scale_arms: arms, alpha }
}

/// Reports every condition; always informational, with failing clauses named in the notes.
pub fn validate_condition_set(
    params: &RegimeParams,
    init: Option<(&MaskedNet, &Dataset)>,
    consts: &ConditionConstants,
) -> CheckReport {
    let set = evaluate_conditions(params, init, consts);
    let mut rep = CheckReport::new("condition_set");
    for c in &set.clauses {
        if let Some(l) = c.lower {
            rep.lower(c.name, c.measured, l);
        }
        if let Some(u) = c.upper {
            rep.upper(c.name, c.measured, u);
        }
    }
    for (name, v) in ["arm_init_signal", "arm_offdiag", "arm_init_noise", "arm_noise"].iter().zip(set.init_scale_arms) {
        rep.measure(name, v);
    }
    rep.measure("alpha", set.alpha);
    rep.upper("init_scale_inequality", set.init_scale_value, 1.0);
    let failing = set.failing();
    if failing.is_empty() {
        rep.notes.push("all conditions hold".into());
    } else {
        rep.notes.push(format!("violated: {}", failing.join(", ")));
    }
    rep
}

/// Two-sided 95% Wilson score interval for `hits` successes in `n` trials.
pub fn wilson_interval(hits: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let (h, n) = (hits as f64, n as f64);
    let phat = h / n;
    let denom = 1.0 + z * z / n;
    let centre = (phat + z * z / (2.0 * n)) / denom;
    let half = z * (phat * (1.0 - phat) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    let lo = if hits == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if hits as f64 == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Monte-Carlo estimate of `Pr[max_{j,r} |<w~_{j,r}, xi>| >= (2m)^{-2/q}]`
/// for fresh noise `xi ~ N(0, sigma_n^2 I)`.
pub fn check_test_noise_concentration(net: &MaskedNet, sigma_n: f64, cfg: &DiagConfig) -> Result<CheckReport> {
    if cfg.n_mc < 1000 {
        return config_err(format!("n_mc must be at least 1000, got {}", cfg.n_mc));
    }
    let shape = net.shape();
    let (k, m, d) = (shape.classes as f64, shape.width as f64, shape.dim as f64);
    let q = net.activation().degree() as f64;
    let threshold = (2.0 * m).powf(-2.0 / q);
    let mut rng = rng::stream(cfg.mc_seed, Stream::MonteCarlo);

    let chunk = 256;
    let mut hits = 0;
    let mut drawn = 0;
    while drawn < cfg.n_mc {
        let rows = chunk.min(cfg.n_mc - drawn);
        let xi = Array2::from_shape_simple_fn((rows, shape.dim), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma_n * z
        });
        let corr = xi.dot(&net.weights().t());
        hits += corr.rows().into_iter().filter(|r| r.iter().any(|v| v.abs() >= threshold)).count();
        drawn += rows;
    }
    let estimate = hits as f64 / cfg.n_mc as f64;
    let (lo, hi) = wilson_interval(hits, cfg.n_mc);
    let variance = cfg.c * net.sigma0().powi(2) * sigma_n * sigma_n * net.mask().p() * d;
    let bound = 2.0 * k * m * (-(2.0 * m).powf(-4.0 / q) / variance).exp();

    let mut rep = CheckReport::new("test_noise_concentration");
    rep.measure("probability", estimate);
    rep.measure("ci_low", lo);
    rep.measure("ci_high", hi);
    rep.measure("threshold", threshold);
    rep.measure("n_mc", cfg.n_mc as f64);
    rep.upper("probability_vs_bound", estimate, bound.min(1.0));
    Ok(rep)
}

/// Which regime's prediction the measured population loss matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Mild,
    Over,
    Neither,
}

/// Population loss and error on a fresh evaluation set against the
/// small-loss reference `K eps + exp(-n^2 / p)` and the large-loss reference `0.9 log K`.
pub fn check_generalization_gap(net: &MaskedNet, eval: &Dataset, n_train: usize, cfg: &DiagConfig) -> Result<(CheckReport, Regime)> {
    let (loss, err) = eval_metrics(net, eval)?;
    let k = net.shape().classes as f64;
    let n = n_train as f64;
    let p = net.mask().p();
    let mild_ref = k * cfg.epsilon + if p > 0.0 { (-(n * n) / p).exp() } else { 0.0 };
    let over_ref = 0.9 * k.ln();
    let regime = if loss >= over_ref && over_ref > 0.0 {
        Regime::Over
    } else if loss <= cfg.c * mild_ref {
        Regime::Mild
    } else {
        Regime::Neither
    };
    let mut rep = CheckReport::new("generalization_gap");
    rep.measure("test_loss", loss);
    rep.measure("test_err", err);
    rep.upper("test_loss_vs_mild_reference", loss, cfg.c * mild_ref);
    rep.lower("test_loss_vs_over_reference", loss, over_ref);
    rep.notes.push(format!("regime: {regime:?}").to_lowercase());
    Ok((rep, regime))
}

/// Gradient-norm ratio against its regression ceiling. `run_max` is the
/// largest ratio seen along a training run, when one is available.
pub fn check_grad_bound(report: &BoundReport, run_max: Option<f64>, cfg: &DiagConfig) -> CheckReport {
    let mut rep = CheckReport::new("grad_bound");
    rep.measure("grad_sq_norm", report.grad_sq_norm);
    rep.measure("train_loss", report.loss);
    rep.measure("scale", report.scale);
    let mut holds = true;
    match report.ratio {
        Some(ratio) => holds &= rep.upper("ratio", ratio, cfg.grad_ratio_limit),
        None => rep.notes.push("training loss is zero; ratio undefined".into()),
    }
    if let Some(max) = run_max {
        holds &= rep.upper("run_max_ratio", max, cfg.grad_ratio_limit);
    }
    if report.ratio.is_some() || run_max.is_some() {
        rep.verdict(true, holds);
    }
    rep
}

/// Coefficient extremes against their caps and floors.
pub fn check_coefficient_bounds(report: &PropReport) -> CheckReport {
    let mut rep = CheckReport::new("coefficient_bounds");
    rep.measure("alpha", report.alpha);
    rep.measure("beta", report.beta);
    let mut holds = rep.upper("max_gamma_diag", report.max_gamma_diag, report.alpha);
    holds &= rep.upper("max_zeta", report.max_zeta, report.alpha);
    holds &= rep.lower("min_omega", report.min_omega, report.omega_lower);
    holds &= rep.lower("min_gamma_offdiag", report.min_gamma_offdiag, report.gamma_offdiag_lower);
    rep.verdict(true, holds);
    rep
}
