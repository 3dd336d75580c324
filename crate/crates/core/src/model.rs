//! Masked two-layer convolutional network.
//!
//! Class `j` output is `F_j(x) = sum_r sigma(<w_{j,r}, x1>) + sigma(<w_{j,r}, x2>)`
//! where each weight row is multiplied by its frozen mask row. Weights are
//! stored as a `(K * m) x d` matrix, row `j * m + r` holding `w~_{j,r}`.

use std::io::{Read, Write};

use log::warn;
use ndarray::{Array2, Array3};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, Error, Result};
use crate::pruner::{Mask, Shape};
use crate::rng::{self, Stream};
use crate::synthdata::{Dataset, PatchSlot};

/// Per-sample loss ceiling. `-log logit_y` beyond this is clamped.
pub const LOSS_CLAMP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `max(0, z)^q`, `q >= 2`.
    Poly(u32),
    /// `max(0, z)` with derivative 0 at 0.
    Relu,
}

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        let z = z.max(0.0);
        match self {
            Activation::Poly(q) => z.powi(q as i32),
            Activation::Relu => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        if z <= 0.0 {
            return 0.0;
        }
        match self {
            Activation::Poly(q) => q as f64 * z.powi(q as i32 - 1),
            Activation::Relu => 1.0,
        }
    }

    /// Homogeneity degree: `q` for the polynomial, 1 for relu.
    pub fn degree(self) -> u32 {
        match self {
            Activation::Poly(q) => q,
            Activation::Relu => 1,
        }
    }

    /// Checkpoint tag: 0 for relu, `q` for the polynomial.
    pub fn tag(self) -> u64 {
        match self {
            Activation::Poly(q) => q as u64,
            Activation::Relu => 0,
        }
    }

    pub fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            q @ 2..=16 => Ok(Activation::Poly(q as u32)),
            other => config_err(format!("unknown activation tag {other}")),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Activation::Poly(q) if q < 2 => config_err(format!("polynomial degree {q} < 2")),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Poly(q) => write!(f, "poly{q}"),
            Activation::Relu => f.write_str("relu"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "relu" {
            return Ok(Activation::Relu);
        }
        let q = s
            .strip_prefix("poly")
            .and_then(|q| q.parse::<u32>().ok())
            .ok_or_else(|| Error::Config(format!("unknown activation `{s}` (expected relu or polyQ)")))?;
        let act = Activation::Poly(q);
        act.validate()?;
        Ok(act)
    }
}

/// Patches of a dataset arranged for batched inner products.
///
/// Patches with at most [`PatchBatch::SPARSE_MAX`] nonzeros (the signal
/// patches, and all-zero noise) are kept as coordinate lists; the rest are
/// rows of a dense matrix.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    n: usize,
    dim: usize,
    labels: Vec<usize>,
    dense: Array2<f64>,
    dense_at: Vec<(usize, usize)>,
    sparse: Vec<SparsePatch>,
}

#[derive(Debug, Clone)]
struct SparsePatch {
    sample: usize,
    slot: usize,
    entries: Vec<(usize, f64)>,
}

impl PatchBatch {
    pub const SPARSE_MAX: usize = 8;

    pub fn new(data: &Dataset) -> Result<Self> {
        let dim = data.dim();
        let mut dense_rows = Vec::new();
        let mut dense_at = Vec::new();
        let mut sparse = Vec::new();
        for (i, s) in data.samples().iter().enumerate() {
            for slot in [PatchSlot::First, PatchSlot::Second] {
                let patch = s.patch(slot);
                if let Some(k) = patch.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { what: "input", index: vec![i, slot.index(), k] });
                }
                let nnz = patch.iter().filter(|v| **v != 0.0).count();
                if nnz <= Self::SPARSE_MAX {
                    let entries = patch
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(k, v)| (k, *v))
                        .collect();
                    sparse.push(SparsePatch { sample: i, slot: slot.index(), entries });
                } else {
                    dense_rows.extend_from_slice(patch);
                    dense_at.push((i, slot.index()));
                }
            }
        }
        let dense = Array2::from_shape_vec((dense_at.len(), dim), dense_rows)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { n: data.len(), dim, labels: data.labels().collect(), dense, dense_at, sparse })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedNet {
    weights: Array2<f64>,
    mask: Mask,
    activation: Activation,
    sigma0: f64,
    iteration: u64,
}

/// Draws each weight from N(0, sigma0^2) on the init stream of `seed`, then zeroes masked entries.
pub fn init_weights(mask: Mask, activation: Activation, sigma0: f64, seed: u64) -> Result<MaskedNet> {
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return config_err(format!("sigma0 must be positive, got {sigma0}"));
    }
    activation.validate()?;
    let shape = mask.shape();
    let mut rng = rng::stream(seed, Stream::Init);
    let values: Vec<f64> = mask
        .bits()
        .iter()
        .map(|bit| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if *bit == 1 { sigma0 * z } else { 0.0 }
        })
        .collect();
    let weights = Array2::from_shape_vec((shape.neurons(), shape.dim), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(MaskedNet { weights, mask, activation, sigma0, iteration: 0 })
}

impl MaskedNet {
    /// Assembles a network from explicit weights; masked entries must be exactly zero.
    pub fn from_parts(weights: Array2<f64>, mask: Mask, activation: Activation, sigma0: f64, iteration: u64) -> Result<Self> {
        let shape = mask.shape();
        if weights.dim() != (shape.neurons(), shape.dim) {
            return Err(Error::Shape(format!(
                "weights {:?} do not match mask shape ({}, {})",
                weights.dim(),
                shape.neurons(),
                shape.dim
            )));
        }
        activation.validate()?;
        let net = Self { weights, mask, activation, sigma0, iteration };
        if let Some(idx) = net.mask_violation() {
            return Err(Error::Contract(format!("weight {idx:?} is nonzero on a masked coordinate")));
        }
        Ok(net)
    }

    pub fn shape(&self) -> Shape {
        self.mask.shape()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Weight row `w~_{j,r}`.
    pub fn row(&self, class: usize, neuron: usize) -> ndarray::ArrayView1<'_, f64> {
        self.weights.row(self.shape().row(class, neuron))
    }

    /// Returns a copy with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.weights.mapv_inplace(|w| w * c);
        out
    }

    /// First `(row, coord)` with a nonzero weight under a zero mask bit.
    pub fn mask_violation(&self) -> Option<(usize, usize)> {
        let d = self.shape().dim;
        self.weights
            .iter()
            .zip(self.mask.bits())
            .position(|(w, b)| *b == 0 && *w != 0.0)
            .map(|pos| (pos / d, pos % d))
    }

    /// Applies `w <- w - eta * grad`, leaving the weights untouched if any result is non-finite.
    pub(crate) fn apply_update(&mut self, grad: &Array2<f64>, eta: f64) -> Result<()> {
        let next = &self.weights - &(grad * eta);
        check_finite(&next, "updated weight")?;
        self.weights = next;
        self.iteration += 1;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            shape: self.shape(),
            activation: self.activation,
            sigma0: self.sigma0,
            iteration: self.iteration,
            weights: self.weights.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, mask: Mask) -> Result<Self> {
        if ckpt.shape != mask.shape() {
            return Err(Error::Shape(format!("checkpoint {:?} vs mask {:?}", ckpt.shape, mask.shape())));
        }
        Self::from_parts(ckpt.weights, mask, ckpt.activation, ckpt.sigma0, ckpt.iteration)
    }
}

fn check_finite(a: &Array2<f64>, what: &'static str) -> Result<()> {
    match a.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(pos) => {
            let cols = a.ncols().max(1);
            Err(Error::NonFinite { what, index: vec![pos / cols, pos % cols] })
        }
    }
}

/// Everything computed by one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    /// Iteration of the network that produced this record.
    pub iteration: u64,
    pub labels: Vec<usize>,
    /// `F_j(x_i)`, shape `(n, K)`.
    pub outputs: Array2<f64>,
    /// Softmax probabilities `logit_j`, shape `(n, K)`.
    pub probs: Array2<f64>,
    /// Per-sample cross-entropy `l_i`.
    pub losses: Vec<f64>,
    /// `l'_{j,i} = logit_j - 1{j = y_i}`, shape `(n, K)`.
    pub dloss: Array2<f64>,
    /// Pre-activations `<w~_{j,r}, x_{i,slot}>`, shape `(n, 2, K * m)`.
    pub pre: Array3<f64>,
}

impl ForwardRecord {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    /// Fraction of samples whose argmax output (smallest index on ties) differs from the label.
    pub fn error_rate(&self) -> f64 {
        let wrong = self
            .outputs
            .rows()
            .into_iter()
            .zip(&self.labels)
            .filter(|(row, y)| argmax(row.iter().copied()) != **y)
            .count();
        wrong as f64 / self.labels.len() as f64
    }

    #[inline]
    pub fn preactivation(&self, sample: usize, slot: PatchSlot, row: usize) -> f64 {
        self.pre[[sample, slot.index(), row]]
    }

    /// Largest `|sum_j logit_j - 1|` over samples.
    pub fn softmax_residual(&self) -> f64 {
        self.probs
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest violation of `sum_j l' = 0` and `sum_{j != y} |l'_j| = |l'_y|`.
    pub fn dloss_identity_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (row, &y) in self.dloss.rows().into_iter().zip(&self.labels) {
            worst = worst.max(row.sum().abs());
            let off: f64 = row.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| v.abs()).sum();
            worst = worst.max((off - row[y].abs()).abs());
        }
        worst
    }
}

/// Index of the maximum, ties broken toward the smallest index.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

pub fn forward(net: &MaskedNet, batch: &PatchBatch) -> Result<ForwardRecord> {
    let shape = net.shape();
    if batch.dim != shape.dim {
        return Err(Error::Shape(format!("batch dimension {} vs network {}", batch.dim, shape.dim)));
    }
    check_finite(&net.weights, "weight")?;
    let (n, k, neurons) = (batch.n, shape.classes, shape.neurons());

    let mut pre = Array3::<f64>::zeros((n, 2, neurons));
    if !batch.dense_at.is_empty() {
        let z = batch.dense.dot(&net.weights.t());
        for (row, &(i, slot)) in z.rows().into_iter().zip(&batch.dense_at) {
            pre.slice_mut(ndarray::s![i, slot, ..]).assign(&row);
        }
    }
    for sp in &batch.sparse {
        let mut target = pre.slice_mut(ndarray::s![sp.sample, sp.slot, ..]);
        for &(coord, val) in &sp.entries {
            target.zip_mut_with(&net.weights.column(coord), |t, w| *t += val * w);
        }
    }

    let act = net.activation;
    let mut outputs = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let mut f = 0.0;
            for r in 0..shape.width {
                let row = shape.row(j, r);
                f += act.value(pre[[i, 0, row]]) + act.value(pre[[i, 1, row]]);
            }
            outputs[[i, j]] = f;
        }
    }

    let mut probs = Array2::<f64>::zeros((n, k));
    let mut dloss = Array2::<f64>::zeros((n, k));
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let row = outputs.row(i);
        let top = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = row.iter().map(|f| (f - top).exp()).sum();
        let y = batch.labels[i];
        let mut loss = top + denom.ln() - row[y];
        if loss > LOSS_CLAMP {
            warn!("sample {i} loss {loss} clamped to {LOSS_CLAMP}");
            loss = LOSS_CLAMP;
        }
        losses.push(loss);
        for j in 0..k {
            let p = (row[j] - top).exp() / denom;
            probs[[i, j]] = p;
            dloss[[i, j]] = p - if j == y { 1.0 } else { 0.0 };
        }
    }

    Ok(ForwardRecord {
        iteration: net.iteration,
        labels: batch.labels.clone(),
        outputs,
        probs,
        losses,
        dloss,
        pre,
    })
}

/// Training loss, masked gradient and the forward pass that produced them.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array2<f64>,
    pub forward: ForwardRecord,
}

/// Gradient of the mean cross-entropy with respect to the masked weights,
/// already multiplied by the mask.
pub fn loss_and_grad(net: &MaskedNet, batch: &PatchBatch) -> Result<LossGrad> {
    let fwd = forward(net, batch)?;
    let shape = net.shape();
    let (n, neurons) = (batch.n, shape.neurons());
    let act = net.activation;
    let inv_n = 1.0 / n as f64;

    // coefficient of patch x_{i,slot} in the gradient of neuron row
    let coef = |i: usize, slot: usize, row: usize| -> f64 {
        let class = row / shape.width;
        fwd.dloss[[i, class]] * act.derivative(fwd.pre[[i, slot, row]]) * inv_n
    };

    let mut grad = if batch.dense_at.is_empty() {
        Array2::<f64>::zeros((neurons, shape.dim))
    } else {
        let mut c = Array2::<f64>::zeros((batch.dense_at.len(), neurons));
        for (mut crow, &(i, slot)) in c.rows_mut().into_iter().zip(&batch.dense_at) {
            for (row, v) in crow.iter_mut().enumerate() {
                *v = coef(i, slot, row);
            }
        }
        c.t().dot(&batch.dense)
    };
    for sp in &batch.sparse {
        for row in 0..neurons {
            let c = coef(sp.sample, sp.slot, row);
            if c != 0.0 {
                for &(coord, val) in &sp.entries {
                    grad[[row, coord]] += c * val;
                }
            }
        }
    }
    grad.zip_mut_with(
        &ndarray::ArrayView2::from_shape((neurons, shape.dim), net.mask.bits()).expect("mask shape"),
        |g, b| {
            if *b == 0 {
                *g = 0.0;
            }
        },
    );
    check_finite(&grad, "gradient")?;
    Ok(LossGrad { loss: fwd.mean_loss(), grad, forward: fwd })
}

/// Mean cross-entropy and 0-1 error on `data`.
pub fn eval_metrics(net: &MaskedNet, data: &Dataset) -> Result<(f64, f64)> {
    let fwd = forward(net, &PatchBatch::new(data)?)?;
    Ok((fwd.mean_loss(), fwd.error_rate()))
}

/// Squared gradient norm against the `K m^{2/q} max(mu^2, sigma_n^2 p d) L_S` scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub grad_sq_norm: f64,
    pub loss: f64,
    pub scale: f64,
    /// `grad_sq_norm / (scale * loss)`; `None` when the loss is exactly zero.
    pub ratio: Option<f64>,
}

/// The bound's normalizer `K m^{2/q} max(mu^2, sigma_n^2 p d)`.
pub fn grad_bound_scale(shape: Shape, activation: Activation, mu: f64, sigma_n: f64, p: f64) -> f64 {
    let q = activation.degree() as f64;
    let m = shape.width as f64;
    let size = (mu * mu).max(sigma_n * sigma_n * p * shape.dim as f64);
    shape.classes as f64 * m.powf(2.0 / q) * size
}

pub fn bound_report(grad_sq_norm: f64, loss: f64, scale: f64) -> BoundReport {
    let ratio = if loss > 0.0 { Some(grad_sq_norm / (scale * loss)) } else { None };
    BoundReport { grad_sq_norm, loss, scale, ratio }
}

pub fn grad_norm_bound_check(net: &MaskedNet, data: &Dataset) -> Result<BoundReport> {
    let lg = loss_and_grad(net, &PatchBatch::new(data)?)?;
    let cfg = data.config();
    let scale = grad_bound_scale(net.shape(), net.activation, cfg.mu, cfg.sigma_n, net.mask.p());
    Ok(bound_report(lg.grad.iter().map(|g| g * g).sum(), lg.loss, scale))
}

/// Serialized network weights (the mask travels separately).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub shape: Shape,
    pub activation: Activation,
    pub sigma0: f64,
    pub iteration: u64,
    pub weights: Array2<f64>,
}

impl Checkpoint {
    const HEADER_LEN: usize = 48;

    /// Header `K, m, d, activation tag, sigma0, iteration` as little-endian
    /// 64-bit fields, then row-major little-endian `f64` weights.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for v in [self.shape.classes, self.shape.width, self.shape.dim] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&self.activation.tag().to_le_bytes())?;
        out.write_all(&self.sigma0.to_le_bytes())?;
        out.write_all(&self.iteration.to_le_bytes())?;
        for w in self.weights.iter() {
            out.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(Self::HEADER_LEN + 8 * self.weights.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format { format: "checkpoint", reason };
        if bytes.len() < Self::HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let field = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
        let (classes, width, dim) = (field(0), field(1), field(2));
        let activation = Activation::from_tag(field(3)).map_err(|e| bad(e.to_string()))?;
        let sigma0 = f64::from_bits(field(4));
        let iteration = field(5);
        let count = classes
            .checked_mul(width)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| bad("shape overflows".into()))?;
        let body = &bytes[Self::HEADER_LEN..];
        if Some(body.len() as u64) != count.checked_mul(8) {
            return Err(bad(format!("header promises {count} weights, body has {} bytes", body.len())));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let shape = Shape::new(classes as usize, width as usize, dim as usize);
        let weights = Array2::from_shape_vec((shape.neurons(), shape.dim), values).map_err(|e| bad(e.to_string()))?;
        Ok(Self { shape, activation, sigma0, iteration, weights })
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::sample_mask;
    use crate::synthdata::{generate_dataset, DataConfig};
    use proptest::prelude::*;

    fn tiny(classes: usize, act: Activation, p: f64, seed: u64) -> (MaskedNet, Dataset) {
        let cfg = DataConfig { classes, dim: 12, n_train: 6, mu: 1.5, sigma_n: 0.8, seed };
        let data = generate_dataset(&cfg).unwrap();
        let mask = sample_mask(Shape::new(classes, 3, 12), p, seed).unwrap();
        (init_weights(mask, act, 0.7, seed).unwrap(), data)
    }

    fn loss_at(net: &MaskedNet, batch: &PatchBatch, row: usize, col: usize, delta: f64) -> f64 {
        let mut w = net.weights.clone();
        w[[row, col]] += delta;
        let probe = MaskedNet { weights: w, ..net.clone() };
        forward(&probe, batch).unwrap().mean_loss()
    }

    fn finite_difference_agrees(act: Activation) {
        for seed in 0..4 {
            let (net, data) = tiny(3, act, 0.7, seed);
            let batch = PatchBatch::new(&data).unwrap();
            let lg = loss_and_grad(&net, &batch).unwrap();
            let h = 1e-6;
            for ((row, col), g) in lg.grad.indexed_iter() {
                if net.mask.bits()[row * 12 + col] == 0 {
                    assert_eq!(*g, 0.0);
                    continue;
                }
                let fd = (loss_at(&net, &batch, row, col, h) - loss_at(&net, &batch, row, col, -h)) / (2.0 * h);
                let scale = g.abs().max(fd.abs()).max(1e-4);
                assert!((g - fd).abs() <= 1e-5 * scale, "{act} seed {seed} ({row},{col}): {g} vs {fd}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_poly() {
        finite_difference_agrees(Activation::Poly(3));
    }

    #[test]
    fn gradient_matches_finite_differences_relu() {
        finite_difference_agrees(Activation::Relu);
    }

    #[test]
    fn activation_edges() {
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::Poly(3).derivative(0.0), 0.0);
        assert_eq!(Activation::Poly(3).value(-2.0), 0.0);
        assert_eq!(Activation::Poly(3).value(2.0), 8.0);
        assert_eq!(Activation::Poly(2).derivative(1.5), 3.0);
        for act in [Activation::Relu, Activation::Poly(2), Activation::Poly(5)] {
            assert_eq!(act.to_string().parse::<Activation>().unwrap(), act);
            assert_eq!(Activation::from_tag(act.tag()).unwrap(), act);
        }
        assert!("poly1".parse::<Activation>().is_err());
        assert!("tanh".parse::<Activation>().is_err());
        assert!(Activation::from_tag(1).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax([1.0, 3.0, 3.0].into_iter()), 1);
        assert_eq!(argmax([0.0, 0.0].into_iter()), 0);
    }

    #[test]
    fn zero_mask_gives_uniform_softmax() {
        let (net, data) = tiny(4, Activation::Poly(3), 0.0, 1);
        let fwd = forward(&net, &PatchBatch::new(&data).unwrap()).unwrap();
        assert!(fwd.outputs.iter().all(|f| *f == 0.0));
        assert!((fwd.mean_loss() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(fwd.error_rate(), 1.0 - data.labels().filter(|y| *y == 0).count() as f64 / 6.0);
    }

    #[test]
    fn huge_logit_gap_is_clamped() {
        let (net, data) = tiny(2, Activation::Poly(3), 1.0, 2);
        let big = net.scaled(1e3);
        let fwd = forward(&big, &PatchBatch::new(&data).unwrap()).unwrap();
        assert!(fwd.losses.iter().all(|l| l.is_finite() && *l <= LOSS_CLAMP));
        assert!(fwd.softmax_residual() < 1e-12);
    }

    #[test]
    fn non_finite_update_keeps_weights() {
        let (mut net, _) = tiny(2, Activation::Relu, 1.0, 3);
        let before = net.clone();
        let mut grad = Array2::zeros(net.weights.dim());
        grad[[0, 0]] = f64::NAN;
        assert!(matches!(net.apply_update(&grad, 0.1), Err(Error::NonFinite { .. })));
        assert_eq!(net, before);
    }

    #[test]
    fn from_parts_rejects_masked_weight() {
        let (net, _) = tiny(2, Activation::Relu, 0.5, 4);
        let pos = net.mask.bits().iter().position(|b| *b == 0).unwrap();
        let mut w = net.weights.clone();
        w[[pos / 12, pos % 12]] = 1.0;
        assert!(MaskedNet::from_parts(w, net.mask.clone(), Activation::Relu, 0.7, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_garbage() {
        let (net, _) = tiny(3, Activation::Poly(4), 0.6, 5);
        let bytes = net.checkpoint().to_bytes();
        assert_eq!(bytes.len(), 48 + 8 * 3 * 3 * 12);
        let back = MaskedNet::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap(), net.mask.clone()).unwrap();
        assert_eq!(back, net);

        assert!(Checkpoint::from_bytes(&bytes[..47]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad_tag = bytes.clone();
        bad_tag[24] = 1;
        assert!(Checkpoint::from_bytes(&bad_tag).is_err());
        let mut huge = bytes;
        huge[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&huge).is_err());

        let other = sample_mask(Shape::new(3, 3, 11), 0.6, 5).unwrap();
        assert!(MaskedNet::from_checkpoint(net.checkpoint(), other).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn outputs_are_q_homogeneous(seed in 0u64..1000, q in 2u32..5, c in 0.1f64..3.0) {
            let (net, data) = tiny(3, Activation::Poly(q), 0.8, seed);
            let batch = PatchBatch::new(&data).unwrap();
            let base = forward(&net, &batch).unwrap().outputs;
            let scaled = forward(&net.scaled(c), &batch).unwrap().outputs;
            for (a, b) in base.iter().zip(scaled.iter()) {
                prop_assert!((b - c.powi(q as i32) * a).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn relu_outputs_are_positively_homogeneous(seed in 0u64..1000, c in 0.1f64..3.0) {
            let (net, data) = tiny(2, Activation::Relu, 0.8, seed);
            let batch = PatchBatch::new(&data).unwrap();
            let base = forward(&net, &batch).unwrap().outputs;
            let scaled = forward(&net.scaled(c), &batch).unwrap().outputs;
            for (a, b) in base.iter().zip(scaled.iter()) {
                prop_assert!((b - c * a).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn softmax_and_dloss_identities(seed in 0u64..1000, classes in 1usize..6, scale in 0.01f64..20.0) {
            let (net, data) = tiny(classes, Activation::Poly(2), 0.9, seed);
            let fwd = forward(&net.scaled(scale), &PatchBatch::new(&data).unwrap()).unwrap();
            prop_assert!(fwd.softmax_residual() <= 1e-12);
            prop_assert!(fwd.dloss_identity_residual() <= 1e-12);
            prop_assert!(fwd.probs.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!(fwd.losses.iter().all(|l| *l >= 0.0));
        }

        #[test]
        fn gradient_respects_mask(seed in 0u64..1000, p in 0.0f64..1.0) {
            let (net, data) = tiny(3, Activation::Poly(3), p, seed);
            let lg = loss_and_grad(&net, &PatchBatch::new(&data).unwrap()).unwrap();
            for (g, b) in lg.grad.iter().zip(net.mask.bits()) {
                prop_assert!(*b == 1 || *g == 0.0);
            }
        }
    }
}
