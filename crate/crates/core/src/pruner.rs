//! Bernoulli pruning masks fixed at initialization.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{Read, Write};

use rand::Rng as _;

use crate::error::{config_err, Error, Result};
use crate::rng::{self, Rng, Stream};

/// Network shape shared by masks, weights and decomposition state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub classes: usize,
    pub width: usize,
    pub dim: usize,
}

impl Shape {
    pub fn new(classes: usize, width: usize, dim: usize) -> Self {
        Self { classes, width, dim }
    }

    /// Total number of neurons, `K * m`.
    pub fn neurons(&self) -> usize {
        self.classes * self.width
    }

    pub fn len(&self) -> usize {
        self.neurons() * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat row index of neuron `(j, r)`.
    #[inline]
    pub fn row(&self, class: usize, neuron: usize) -> usize {
        class * self.width + neuron
    }
}

/// Binary mask indexed `[class][neuron][coordinate]`. Never mutated after sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Shape,
    p: f64,
    seed: u64,
    bits: Vec<u8>,
}

impl Mask {
    /// Builds a mask from explicit bits. Every entry must be 0 or 1.
    pub fn from_bits(shape: Shape, p: f64, seed: u64, bits: Vec<u8>) -> Result<Self> {
        check_probability(p)?;
        if bits.len() != shape.len() {
            return Err(Error::Shape(format!(
                "mask has {} entries, shape needs {}",
                bits.len(),
                shape.len()
            )));
        }
        if let Some(pos) = bits.iter().position(|b| *b > 1) {
            return config_err(format!("mask entry {pos} is not binary"));
        }
        Ok(Self { shape, p, seed, bits })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, class: usize, neuron: usize, coord: usize) -> bool {
        self.bits[self.shape.row(class, neuron) * self.shape.dim + coord] == 1
    }

    /// Mask row `m_{j,r}` by flat neuron index.
    #[inline]
    pub fn row(&self, row: usize) -> &[u8] {
        let d = self.shape.dim;
        &self.bits[row * d..(row + 1) * d]
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().map(|b| *b as usize).sum()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.shape.hash(&mut h);
        self.p.to_bits().hash(&mut h);
        self.bits.hash(&mut h);
        h.finish()
    }

    const HEADER_LEN: usize = 40;

    /// Header `K, m, d, p, seed` as little-endian 64-bit fields, then one byte per entry.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for v in [self.shape.classes, self.shape.width, self.shape.dim] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&self.p.to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        out.write_all(&self.bits)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(Self::HEADER_LEN + self.bits.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format { format: "mask file", reason };
        if bytes.len() < Self::HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let field = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
        let dims = [field(0), field(1), field(2)];
        let p = f64::from_bits(field(3));
        let seed = field(4);
        let len = dims
            .iter()
            .try_fold(1u64, |acc, v| acc.checked_mul(*v))
            .ok_or_else(|| bad("shape overflows".into()))?;
        let body = &bytes[Self::HEADER_LEN..];
        if body.len() as u64 != len {
            return Err(bad(format!("header promises {len} entries, found {}", body.len())));
        }
        let shape = Shape::new(dims[0] as usize, dims[1] as usize, dims[2] as usize);
        Self::from_bits(shape, p, seed, body.to_vec()).map_err(|e| bad(e.to_string()))
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return config_err(format!("retention probability {p} outside [0, 1]"));
    }
    Ok(())
}

fn draw_bits(len: usize, p: f64, rng: &mut Rng) -> Vec<u8> {
    (0..len).map(|_| (rng.random::<f64>() < p) as u8).collect()
}

/// Samples every entry i.i.d. Bernoulli(`p`) from the mask stream of `seed`.
pub fn sample_mask(shape: Shape, p: f64, seed: u64) -> Result<Mask> {
    check_probability(p)?;
    let mut rng = rng::stream(seed, Stream::Mask);
    let bits = draw_bits(shape.len(), p, &mut rng);
    Ok(Mask { shape, p, seed, bits })
}

/// Result of [`sample_mask_without_signal`].
#[derive(Debug, Clone)]
pub struct ConditionedMask {
    pub mask: Mask,
    /// Probability `(1 - p)^(K m)` that an unconditioned draw has every signal set empty.
    pub acceptance_probability: f64,
    /// Mean number of whole-mask rejections the equivalent rejection sampler would need.
    pub expected_rejections: f64,
}

/// Draws a Bernoulli(`p`) mask conditioned on no neuron of any class keeping
/// its own class-signal coordinate.
///
/// The `K * m` entries `[j][r][j]` are independent of the rest, so the
/// conditional law is the unconditioned one with those entries forced to zero.
/// This matches rejection sampling exactly, even when acceptance is
/// astronomically unlikely.
pub fn sample_mask_without_signal(shape: Shape, p: f64, seed: u64) -> Result<ConditionedMask> {
    check_probability(p)?;
    if shape.classes > shape.dim {
        return config_err("classes exceed patch dimension");
    }
    if p >= 1.0 {
        return config_err("p = 1 keeps every signal coordinate; the conditioning event is empty");
    }
    let mut mask = sample_mask(shape, p, seed)?;
    for j in 0..shape.classes {
        for r in 0..shape.width {
            mask.bits[shape.row(j, r) * shape.dim + j] = 0;
        }
    }
    let acceptance_probability = empty_signal_probability(shape.classes, shape.width, p)?;
    Ok(ConditionedMask {
        mask,
        acceptance_probability,
        expected_rejections: 1.0 / acceptance_probability - 1.0,
    })
}

/// Per-class split of neurons by whether their mask keeps the class-signal coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignalPartition {
    pub signal: Vec<Vec<usize>>,
    pub noise: Vec<Vec<usize>>,
}

impl SignalPartition {
    pub fn contains_signal(&self, class: usize, neuron: usize) -> bool {
        self.signal[class].binary_search(&neuron).is_ok()
    }

    pub fn all_signal_sets_empty(&self) -> bool {
        self.signal.iter().all(Vec::is_empty)
    }
}

pub fn partition_neurons(mask: &Mask) -> SignalPartition {
    let Shape { classes, width, .. } = mask.shape;
    let mut signal = vec![Vec::new(); classes];
    let mut noise = vec![Vec::new(); classes];
    for j in 0..classes {
        for r in 0..width {
            if mask.get(j, r, j) {
                signal[j].push(r);
            } else {
                noise[j].push(r);
            }
        }
    }
    SignalPartition { signal, noise }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskStatsReport {
    pub nnz_min: usize,
    pub nnz_max: usize,
    pub nnz_mean: f64,
    /// `sum_r (m_{j,r})_k`, laid out `[j * d + k]`.
    pub column_sums: Vec<usize>,
    pub signal_set_sizes: Vec<usize>,
    pub all_signal_sets_empty: bool,
}

impl MaskStatsReport {
    pub fn column_sum(&self, dim: usize, class: usize, coord: usize) -> usize {
        self.column_sums[class * dim + coord]
    }
}

pub fn mask_stats(mask: &Mask) -> MaskStatsReport {
    let shape = mask.shape;
    let mut nnz = Vec::with_capacity(shape.neurons());
    let mut column_sums = vec![0usize; shape.classes * shape.dim];
    for j in 0..shape.classes {
        for r in 0..shape.width {
            let row = mask.row(shape.row(j, r));
            nnz.push(row.iter().map(|b| *b as usize).sum::<usize>());
            for (k, b) in row.iter().enumerate() {
                column_sums[j * shape.dim + k] += *b as usize;
            }
        }
    }
    let partition = partition_neurons(mask);
    let nnz_mean = if nnz.is_empty() { 0.0 } else { nnz.iter().sum::<usize>() as f64 / nnz.len() as f64 };
    MaskStatsReport {
        nnz_min: nnz.iter().copied().min().unwrap_or(0),
        nnz_max: nnz.iter().copied().max().unwrap_or(0),
        nnz_mean,
        column_sums,
        signal_set_sizes: partition.signal.iter().map(Vec::len).collect(),
        all_signal_sets_empty: partition.all_signal_sets_empty(),
    }
}

/// Probability that every class-signal set is empty, `(1 - p)^(K m)`.
pub fn empty_signal_probability(classes: usize, width: usize, p: f64) -> Result<f64> {
    check_probability(p)?;
    Ok((1.0 - p).powf((classes * width) as f64))
}
