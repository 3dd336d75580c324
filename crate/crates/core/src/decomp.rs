//! Signal-noise decomposition of every neuron.
//!
//! Each masked weight row is tracked as
//!
//! ```text
//! w~_{j,r}(t) = w~_{j,r}(0)
//!             + sum_k gamma_{j,r,k} |mu_k|^-2 (mu_k . m_{j,r})
//!             + sum_i (zeta_{j,r,i} + omega_{j,r,i}) |xi~_{j,r,i}|^-2 xi~_{j,r,i}
//! ```
//!
//! with `xi~_{j,r,i} = xi_i . m_{j,r}`. The coefficients follow their own
//! recursions driven by the same forward pass as the gradient step, so the
//! reconstruction is an independent check on the weight-space update.
//! [`projection_oracle`] recovers the same coefficients a third way, by least
//! squares against the basis.

use std::io::Write;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::fmt::float17;
use crate::model::{Activation, ForwardRecord, MaskedNet};
use crate::pruner::{partition_neurons, Mask, Shape, SignalPartition};
use crate::synthdata::{Dataset, PatchSlot};

#[derive(Debug, Clone)]
pub struct DecompState {
    shape: Shape,
    activation: Activation,
    mu: f64,
    labels: Vec<usize>,
    signal_slots: Vec<PatchSlot>,
    /// Noise vectors `xi_i`, shape `(n, d)`.
    noise: Array2<f64>,
    mask: Mask,
    partition: SignalPartition,
    w0: Array2<f64>,
    /// `gamma_{j,r,k}`, shape `(K m, K)`.
    gamma: Array2<f64>,
    /// `zeta_{j,r,i}`, shape `(K m, n)`.
    zeta: Array2<f64>,
    /// `omega_{j,r,i}`, shape `(K m, n)`.
    omega: Array2<f64>,
    /// `|xi~_{j,r,i}|^2`, shape `(K m, n)`.
    xi_sq: Array2<f64>,
    iteration: u64,
}

/// Starts the decomposition at the untrained network: all coefficients zero.
pub fn init_decomp(net0: &MaskedNet, data: &Dataset) -> Result<DecompState> {
    let shape = net0.shape();
    if data.dim() != shape.dim || data.config().classes != shape.classes {
        return Err(Error::Shape("dataset does not match network".into()));
    }
    let n = data.len();
    let mut noise = Array2::<f64>::zeros((n, shape.dim));
    for (mut row, s) in noise.rows_mut().into_iter().zip(data.samples()) {
        row.assign(&ArrayView1::from(s.noise()));
    }
    let mask = net0.mask().clone();
    let mut xi_sq = Array2::<f64>::zeros((shape.neurons(), n));
    for row in 0..shape.neurons() {
        let bits = mask.row(row);
        for i in 0..n {
            xi_sq[[row, i]] = noise
                .row(i)
                .iter()
                .zip(bits)
                .filter(|(_, b)| **b == 1)
                .map(|(x, _)| x * x)
                .sum();
        }
    }
    Ok(DecompState {
        shape,
        activation: net0.activation(),
        mu: data.config().mu,
        labels: data.labels().collect(),
        signal_slots: data.samples().iter().map(|s| s.signal_patch).collect(),
        noise,
        partition: partition_neurons(&mask),
        mask,
        w0: net0.weights().clone(),
        gamma: Array2::zeros((shape.neurons(), shape.classes)),
        zeta: Array2::zeros((shape.neurons(), n)),
        omega: Array2::zeros((shape.neurons(), n)),
        xi_sq,
        iteration: net0.iteration(),
    })
}

impl DecompState {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn partition(&self) -> &SignalPartition {
        &self.partition
    }

    pub fn w0(&self) -> &Array2<f64> {
        &self.w0
    }

    pub fn noise(&self) -> &Array2<f64> {
        &self.noise
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn gamma(&self, class: usize, neuron: usize, k: usize) -> f64 {
        self.gamma[[self.shape.row(class, neuron), k]]
    }

    pub fn zeta(&self, class: usize, neuron: usize, i: usize) -> f64 {
        self.zeta[[self.shape.row(class, neuron), i]]
    }

    pub fn omega(&self, class: usize, neuron: usize, i: usize) -> f64 {
        self.omega[[self.shape.row(class, neuron), i]]
    }

    pub fn xi_tilde_sq_norm(&self, class: usize, neuron: usize, i: usize) -> f64 {
        self.xi_sq[[self.shape.row(class, neuron), i]]
    }

    pub fn gamma_matrix(&self) -> &Array2<f64> {
        &self.gamma
    }

    pub fn zeta_matrix(&self) -> &Array2<f64> {
        &self.zeta
    }

    pub fn omega_matrix(&self) -> &Array2<f64> {
        &self.omega
    }

    pub fn xi_sq_matrix(&self) -> &Array2<f64> {
        &self.xi_sq
    }

    /// Applies one step of the coefficient recursions using the forward pass
    /// of the iterate the gradient step consumed.
    pub fn update_coefficients(&mut self, fwd: &ForwardRecord, eta: f64) -> Result<()> {
        if fwd.iteration != self.iteration {
            return Err(Error::Contract(format!(
                "forward pass from iteration {} applied to decomposition at iteration {}",
                fwd.iteration, self.iteration
            )));
        }
        let n = self.n();
        if fwd.labels.len() != n || fwd.pre.dim().2 != self.shape.neurons() {
            return Err(Error::Contract("forward record does not match the tracked dataset".into()));
        }
        let step = eta / n as f64;
        let mu_sq = self.mu * self.mu;
        let act = self.activation;
        for j in 0..self.shape.classes {
            for r in 0..self.shape.width {
                let row = self.shape.row(j, r);
                for i in 0..n {
                    let y = self.labels[i];
                    let dl = fwd.dloss[[i, j]];
                    let signal_slot = self.signal_slots[i];
                    let zn = fwd.preactivation(i, signal_slot.other(), row);
                    let zs = fwd.preactivation(i, signal_slot, row);

                    let xi_sq = self.xi_sq[[row, i]];
                    if xi_sq > 0.0 {
                        let inc = -step * dl * act.derivative(zn) * xi_sq;
                        if j == y {
                            self.zeta[[row, i]] += inc;
                        } else {
                            self.omega[[row, i]] += inc;
                        }
                    }
                    // y == j: gated by r in S_signal^j; y != j: by (m_{j,r})_y.
                    if self.mask.get(j, r, y) {
                        self.gamma[[row, y]] -= step * dl * act.derivative(zs) * mu_sq;
                    }
                }
            }
        }
        self.iteration += 1;
        Ok(())
    }

    /// Weights implied by the coefficients.
    pub fn reconstruct(&self) -> Array2<f64> {
        let (neurons, n) = (self.shape.neurons(), self.n());
        let mut coef = Array2::<f64>::zeros((neurons, n));
        for row in 0..neurons {
            for i in 0..n {
                let s = self.xi_sq[[row, i]];
                if s > 0.0 {
                    coef[[row, i]] = (self.zeta[[row, i]] + self.omega[[row, i]]) / s;
                }
            }
        }
        let mut w = coef.dot(&self.noise);
        let bits = ndarray::ArrayView2::from_shape((neurons, self.shape.dim), self.mask.bits()).expect("mask shape");
        w.zip_mut_with(&bits, |v, b| {
            if *b == 0 {
                *v = 0.0;
            }
        });
        w += &self.w0;
        for row in 0..neurons {
            for k in 0..self.shape.classes {
                if bits[[row, k]] == 1 {
                    // gamma |mu|^-2 (mu e_k)_k
                    w[[row, k]] += self.gamma[[row, k]] / self.mu;
                }
            }
        }
        w
    }

    /// Compares the reconstruction with the live weights.
    pub fn residual(&self, net: &MaskedNet) -> Result<ReconReport> {
        if net.shape() != self.shape {
            return Err(Error::Shape("network does not match decomposition".into()));
        }
        Ok(recon_report(&self.reconstruct(), net.weights(), self.shape))
    }

    pub fn max_gamma_diag(&self) -> f64 {
        self.fold_gamma(|j, k| j == k, f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_gamma_offdiag(&self) -> f64 {
        self.fold_gamma(|j, k| j != k, 0.0, |a, g| a.max(g.abs()))
    }

    pub fn min_gamma_offdiag(&self) -> f64 {
        self.fold_gamma(|j, k| j != k, 0.0, f64::min)
    }

    fn fold_gamma(&self, pick: impl Fn(usize, usize) -> bool, init: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
        let mut acc = init;
        for (row, g) in self.gamma.rows().into_iter().enumerate() {
            let j = row / self.shape.width;
            for (k, v) in g.iter().enumerate() {
                if pick(j, k) {
                    acc = f(acc, *v);
                }
            }
        }
        acc
    }

    pub fn max_zeta(&self) -> f64 {
        self.zeta.fold(0.0, |a, v| a.max(*v))
    }

    pub fn min_omega(&self) -> f64 {
        self.omega.fold(0.0, |a, v| a.min(*v))
    }

    pub fn max_abs_omega(&self) -> f64 {
        -self.min_omega()
    }

    /// `max_r gamma_{j,r,j}` for each class.
    pub fn class_max_gamma_diag(&self) -> Vec<f64> {
        (0..self.shape.classes)
            .map(|j| (0..self.shape.width).map(|r| self.gamma(j, r, j)).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// For each class, the smallest over its training samples of `max_r zeta_{y_i,r,i}`.
    pub fn class_min_sample_max_zeta(&self) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; self.shape.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            let best = (0..self.shape.width).map(|r| self.zeta(y, r, i)).fold(f64::NEG_INFINITY, f64::max);
            out[y] = out[y].min(best);
        }
        out
    }

    /// `max_r zeta_{y_i,r,i}` for every training sample.
    pub fn sample_max_zeta(&self) -> Vec<f64> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &y)| (0..self.shape.width).map(|r| self.zeta(y, r, i)).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// First violated sign, gating or masking invariant, if any.
    pub fn invariant_violation(&self) -> Option<String> {
        for j in 0..self.shape.classes {
            for r in 0..self.shape.width {
                let row = self.shape.row(j, r);
                for k in 0..self.shape.classes {
                    let g = self.gamma[[row, k]];
                    if (k == j && g < 0.0) || (k != j && g > 0.0) {
                        return Some(format!("gamma[{j},{r},{k}] = {g} has the wrong sign"));
                    }
                }
                if !self.partition.contains_signal(j, r) && self.gamma[[row, j]] != 0.0 {
                    return Some(format!("gamma[{j},{r},{j}] nonzero outside the signal set"));
                }
                for (i, &y) in self.labels.iter().enumerate() {
                    let (z, o) = (self.zeta[[row, i]], self.omega[[row, i]]);
                    if z < 0.0 || o > 0.0 {
                        return Some(format!("zeta/omega[{j},{r},{i}] = {z}/{o} has the wrong sign"));
                    }
                    if (j != y && z != 0.0) || (j == y && o != 0.0) {
                        return Some(format!("coefficient [{j},{r},{i}] escaped its class gate"));
                    }
                }
            }
        }
        None
    }

    /// Writes `t, j, r, k_or_i, kind, value` rows for every coefficient.
    pub fn write_snapshot_csv<W: Write>(&self, mut out: W, header: bool) -> Result<()> {
        if header {
            writeln!(out, "t,j,r,k_or_i,kind,value")?;
        }
        let t = self.iteration;
        for j in 0..self.shape.classes {
            for r in 0..self.shape.width {
                let row = self.shape.row(j, r);
                for k in 0..self.shape.classes {
                    writeln!(out, "{t},{j},{r},{k},gamma,{}", float17(self.gamma[[row, k]]))?;
                }
                for i in 0..self.n() {
                    writeln!(out, "{t},{j},{r},{i},zeta,{}", float17(self.zeta[[row, i]]))?;
                }
                for i in 0..self.n() {
                    writeln!(out, "{t},{j},{r},{i},omega,{}", float17(self.omega[[row, i]]))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconReport {
    pub max_abs_residual: f64,
    /// Largest `|w - w_rec| / |w|` over neurons with nonzero weights.
    pub max_rel_residual: f64,
    /// `(class, neuron)` with the largest relative residual.
    pub worst: (usize, usize),
}

fn recon_report(rec: &Array2<f64>, live: &Array2<f64>, shape: Shape) -> ReconReport {
    let mut report = ReconReport { max_abs_residual: 0.0, max_rel_residual: 0.0, worst: (0, 0) };
    for (row, (a, b)) in rec.rows().into_iter().zip(live.rows()).enumerate() {
        let abs = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if abs == 0.0 { 0.0 } else if norm > 0.0 { abs / norm } else { f64::INFINITY };
        report.max_abs_residual = report.max_abs_residual.max(abs);
        if rel > report.max_rel_residual {
            report.max_rel_residual = rel;
            report.worst = (row / shape.width, row % shape.width);
        }
    }
    report
}

/// Least-squares recovery of one neuron's coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum NeuronOracle {
    Compared {
        class: usize,
        neuron: usize,
        /// Largest `|recovered - tracked|` over this neuron's coefficients.
        max_abs_diff: f64,
        /// Number of coefficients compared and how many agreed within tolerance.
        compared: usize,
        agreed: usize,
        condition: f64,
    },
    Flagged {
        class: usize,
        neuron: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub neurons: Vec<NeuronOracle>,
    /// True when `p d <= n + K`, so the basis cannot be independent in expectation.
    pub non_unique: bool,
    pub ridge: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn comparisons(&self) -> (usize, usize) {
        self.neurons.iter().fold((0, 0), |(c, a), n| match n {
            NeuronOracle::Compared { compared, agreed, .. } => (c + compared, a + agreed),
            NeuronOracle::Flagged { .. } => (c, a),
        })
    }

    pub fn agreement_fraction(&self) -> f64 {
        let (c, a) = self.comparisons();
        if c == 0 { 0.0 } else { a as f64 / c as f64 }
    }

    pub fn flagged(&self) -> usize {
        self.neurons.iter().filter(|n| matches!(n, NeuronOracle::Flagged { .. })).count()
    }
}

pub const ORACLE_RIDGE: f64 = 1e-12;
pub const ORACLE_TOLERANCE: f64 = 1e-6;
const MAX_CONDITION: f64 = 1e12;

/// Recovers the coefficients of the sampled neurons from `w(t) - w(0)` by
/// solving the normal equations against the masked signal and noise basis,
/// and compares them with the tracked values.
pub fn projection_oracle(net: &MaskedNet, state: &DecompState, neurons: &[(usize, usize)]) -> Result<OracleReport> {
    let shape = state.shape;
    if net.shape() != shape {
        return Err(Error::Shape("network does not match decomposition".into()));
    }
    let n = state.n();
    let p = net.mask().p();
    let non_unique = p * shape.dim as f64 <= (n + shape.classes) as f64;
    let mut out = Vec::with_capacity(neurons.len());
    for &(j, r) in neurons {
        if j >= shape.classes || r >= shape.width {
            return Err(Error::Shape(format!("neuron ({j}, {r}) out of range")));
        }
        out.push(oracle_neuron(net, state, j, r));
    }
    Ok(OracleReport { neurons: out, non_unique, ridge: ORACLE_RIDGE, tolerance: ORACLE_TOLERANCE })
}

enum Basis {
    Signal(usize),
    Noise(usize),
}

fn oracle_neuron(net: &MaskedNet, state: &DecompState, j: usize, r: usize) -> NeuronOracle {
    let shape = state.shape;
    let row = shape.row(j, r);
    let bits = state.mask.row(row);
    let support: Vec<usize> = (0..shape.dim).filter(|&k| bits[k] == 1).collect();
    let flag = |reason: String| NeuronOracle::Flagged { class: j, neuron: r, reason };

    let mut basis = Vec::new();
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    for k in 0..shape.classes {
        if bits[k] == 1 {
            // mu_k |mu|^-2 restricted to the support
            vectors.push(support.iter().map(|&c| if c == k { 1.0 / state.mu } else { 0.0 }).collect());
            basis.push(Basis::Signal(k));
        }
    }
    for i in 0..state.n() {
        let s = state.xi_sq[[row, i]];
        if s > 0.0 {
            vectors.push(support.iter().map(|&c| state.noise[[i, c]] / s).collect());
            basis.push(Basis::Noise(i));
        }
    }
    if basis.is_empty() {
        return flag("empty basis".into());
    }
    if support.len() < basis.len() {
        return flag(format!("{} basis vectors in {} retained coordinates", basis.len(), support.len()));
    }
    let target: Vec<f64> = support
        .iter()
        .map(|&c| net.weights()[[row, c]] - state.w0[[row, c]])
        .collect();

    let b = basis.len();
    let mut gram = vec![0.0; b * b];
    let mut rhs = vec![0.0; b];
    for a in 0..b {
        for c in a..b {
            let v: f64 = vectors[a].iter().zip(&vectors[c]).map(|(x, y)| x * y).sum();
            gram[a * b + c] = v;
            gram[c * b + a] = v;
        }
        gram[a * b + a] += ORACLE_RIDGE;
        rhs[a] = vectors[a].iter().zip(&target).map(|(x, y)| x * y).sum();
    }
    let Some((coef, condition)) = cholesky_solve(&mut gram, &mut rhs, b) else {
        return flag("Gram matrix is not positive definite".into());
    };
    if condition > MAX_CONDITION {
        return flag(format!("Gram condition estimate {condition:e}"));
    }

    let mut max_abs_diff: f64 = 0.0;
    let mut agreed = 0;
    for (basis, rec) in basis.iter().zip(&coef) {
        let tracked = match *basis {
            Basis::Signal(k) => state.gamma[[row, k]],
            Basis::Noise(i) => state.zeta[[row, i]] + state.omega[[row, i]],
        };
        let diff = (rec - tracked).abs();
        max_abs_diff = max_abs_diff.max(diff);
        if diff <= ORACLE_TOLERANCE {
            agreed += 1;
        }
    }
    NeuronOracle::Compared { class: j, neuron: r, max_abs_diff, compared: b, agreed, condition }
}

/// Solves `A x = rhs` for symmetric positive-definite `A` (row-major, `b x b`)
/// in place. Returns the solution and `(max L_ii / min L_ii)^2`, a cheap
/// estimate of the condition number of `A`.
fn cholesky_solve(a: &mut [f64], rhs: &mut [f64], b: usize) -> Option<(Vec<f64>, f64)> {
    for col in 0..b {
        let mut diag = a[col * b + col];
        for k in 0..col {
            diag -= a[col * b + k] * a[col * b + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return None;
        }
        let l = diag.sqrt();
        a[col * b + col] = l;
        for row in col + 1..b {
            let mut v = a[row * b + col];
            for k in 0..col {
                v -= a[row * b + k] * a[col * b + k];
            }
            a[row * b + col] = v / l;
        }
    }
    // forward then back substitution
    for row in 0..b {
        let mut v = rhs[row];
        for k in 0..row {
            v -= a[row * b + k] * rhs[k];
        }
        rhs[row] = v / a[row * b + row];
    }
    for row in (0..b).rev() {
        let mut v = rhs[row];
        for k in row + 1..b {
            v -= a[k * b + row] * rhs[k];
        }
        rhs[row] = v / a[row * b + row];
    }
    let diag = (0..b).map(|k| a[k * b + k]);
    let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    Some((rhs.to_vec(), (hi / lo).powi(2)))
}

/// Constants for the coefficient bound check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsConfig {
    /// Upper bound on `gamma_{j,r,j}` and `zeta`; defaults to `multiplier * log^{1/q}(t_max)`.
    pub alpha: Option<f64>,
    pub alpha_multiplier: f64,
    pub t_max: u64,
    /// Constant `C` in the lower-bound correction terms.
    pub c: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self { alpha: None, alpha_multiplier: 2.0, t_max: 1000, c: 1.0 }
    }
}

/// Measured extremes against the coefficient bounds. Slack is measured / bound
/// for the upper bounds and measured / lower bound for the lower bounds; the
/// bounds hold when every slack is at most 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropReport {
    pub alpha: f64,
    pub beta: f64,
    pub max_gamma_diag: f64,
    pub max_zeta: f64,
    pub min_omega: f64,
    pub min_gamma_offdiag: f64,
    pub omega_lower: f64,
    pub gamma_offdiag_lower: f64,
    pub slack_gamma_diag: f64,
    pub slack_zeta: f64,
    pub slack_omega: f64,
    pub slack_gamma_offdiag: f64,
}

impl PropReport {
    pub fn all_within(&self) -> bool {
        [self.slack_gamma_diag, self.slack_zeta, self.slack_omega, self.slack_gamma_offdiag]
            .iter()
            .all(|s| *s <= 1.0)
    }
}

pub fn coefficient_bounds_check(state: &DecompState, sigma_n: f64, p: f64, cfg: &BoundsConfig) -> PropReport {
    let shape = state.shape;
    let q = state.activation.degree() as f64;
    let alpha = cfg
        .alpha
        .unwrap_or_else(|| cfg.alpha_multiplier * (cfg.t_max.max(2) as f64).ln().powf(1.0 / q));

    // beta = 2 max |<w0, mu_k>|, |<w0, xi_i>|
    let mut beta: f64 = 0.0;
    for row in state.w0.rows() {
        for k in 0..shape.classes {
            beta = beta.max((row[k] * state.mu).abs());
        }
        for xi in state.noise.rows() {
            beta = beta.max(row.dot(&xi).abs());
        }
    }
    beta *= 2.0;

    let n = state.n() as f64;
    let log_d = (shape.dim as f64).ln();
    let pd = p * shape.dim as f64;
    let omega_lower = -beta - 6.0 * cfg.c * n * alpha * (log_d / pd).sqrt();
    let gamma_offdiag_lower = -beta - 2.0 * cfg.c * n * alpha * state.mu * log_d.sqrt() / (sigma_n * pd);

    let max_gamma_diag = state.max_gamma_diag().max(0.0);
    let max_zeta = state.max_zeta();
    let min_omega = state.min_omega();
    let min_gamma_offdiag = state.min_gamma_offdiag();
    let ratio = |measured: f64, bound: f64| if measured == 0.0 { 0.0 } else { measured / bound };
    PropReport {
        alpha,
        beta,
        max_gamma_diag,
        max_zeta,
        min_omega,
        min_gamma_offdiag,
        omega_lower,
        gamma_offdiag_lower,
        slack_gamma_diag: ratio(max_gamma_diag, alpha),
        slack_zeta: ratio(max_zeta, alpha),
        slack_omega: ratio(min_omega, omega_lower),
        slack_gamma_offdiag: ratio(min_gamma_offdiag, gamma_offdiag_lower),
    }
}
