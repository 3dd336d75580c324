//! K-class sparse-signal-plus-noise data.
//!
//! Each sample carries two patches of dimension `d`: one is exactly
//! `mu * e_y`, the other an isotropic Gaussian draw with standard deviation
//! `sigma_n`. Which patch holds the signal is a fair coin per sample.

use std::io::Write;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{config_err, Result};
use crate::fmt::float17;
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Number of classes `K`.
    pub classes: usize,
    /// Patch dimension `d`.
    pub dim: usize,
    /// Training-set size `n`.
    pub n_train: usize,
    /// Signal strength `mu`.
    pub mu: f64,
    /// Noise standard deviation.
    pub sigma_n: f64,
    pub seed: u64,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return config_err("classes must be positive");
        }
        if self.classes > self.dim {
            return config_err(format!(
                "classes ({}) exceeds patch dimension ({})",
                self.classes, self.dim
            ));
        }
        if self.n_train == 0 {
            return config_err("n_train must be at least 1");
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return config_err(format!("mu must be positive and finite, got {}", self.mu));
        }
        if !(self.sigma_n >= 0.0 && self.sigma_n.is_finite()) {
            return config_err(format!("sigma_n must be non-negative, got {}", self.sigma_n));
        }
        Ok(())
    }
}

/// Which of the two patches carries the class signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatchSlot {
    First,
    Second,
}

impl PatchSlot {
    pub fn index(self) -> usize {
        match self {
            PatchSlot::First => 0,
            PatchSlot::Second => 1,
        }
    }

    pub fn other(self) -> PatchSlot {
        match self {
            PatchSlot::First => PatchSlot::Second,
            PatchSlot::Second => PatchSlot::First,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub label: usize,
    pub signal_patch: PatchSlot,
}

impl Sample {
    pub fn patch(&self, slot: PatchSlot) -> &[f64] {
        match slot {
            PatchSlot::First => &self.x1,
            PatchSlot::Second => &self.x2,
        }
    }

    pub fn signal(&self) -> &[f64] {
        self.patch(self.signal_patch)
    }

    pub fn noise(&self) -> &[f64] {
        self.patch(self.signal_patch.other())
    }

    pub fn noise_slot(&self) -> PatchSlot {
        self.signal_patch.other()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    config: DataConfig,
}

impl Dataset {
    /// Wraps pre-built samples, checking labels and patch sizes against `config`.
    /// The length check against `config.n_train` is skipped so evaluation
    /// sets of arbitrary size can share the training config.
    pub fn from_samples(samples: Vec<Sample>, config: DataConfig) -> Result<Self> {
        if samples.is_empty() {
            return config_err("dataset must not be empty");
        }
        for (i, s) in samples.iter().enumerate() {
            if s.label >= config.classes {
                return config_err(format!("sample {i} has label {} >= K", s.label));
            }
            if s.x1.len() != config.dim || s.x2.len() != config.dim {
                return config_err(format!("sample {i} patch length differs from d={}", config.dim));
            }
        }
        Ok(Self { samples, config })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn config(&self) -> &DataConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| s.label)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.config.classes];
        for y in self.labels() {
            counts[y] += 1;
        }
        counts
    }

    /// One CSV record per sample: `index, y, signal_patch (1|2), x1..., x2...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.config.dim;
        let mut header = String::from("index,y,signal_patch");
        for p in 1..=2 {
            for k in 0..d {
                header.push_str(&format!(",x{p}_{k}"));
            }
        }
        writeln!(out, "{header}")?;
        for (i, s) in self.samples.iter().enumerate() {
            write!(out, "{i},{},{}", s.label, s.signal_patch.index() + 1)?;
            for v in s.x1.iter().chain(&s.x2) {
                write!(out, ",{}", float17(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn draw_sample(cfg: &DataConfig, rng: &mut Rng) -> Sample {
    let label = rng.random_range(0..cfg.classes);
    let signal_first: bool = rng.random();
    let mut signal = vec![0.0; cfg.dim];
    signal[label] = cfg.mu;
    let noise: Vec<f64> = if cfg.sigma_n == 0.0 {
        vec![0.0; cfg.dim]
    } else {
        (0..cfg.dim)
            .map(|_| cfg.sigma_n * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let (x1, x2, signal_patch) = if signal_first {
        (signal, noise, PatchSlot::First)
    } else {
        (noise, signal, PatchSlot::Second)
    };
    Sample { x1, x2, label, signal_patch }
}

fn draw_set(cfg: &DataConfig, count: usize, which: Stream) -> Vec<Sample> {
    let mut rng = rng::stream(cfg.seed, which);
    (0..count).map(|_| draw_sample(cfg, &mut rng)).collect()
}

/// Draws the `n_train` training samples from the training stream of `cfg.seed`.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = draw_set(cfg, cfg.n_train, Stream::TrainData);
    Ok(Dataset { samples, config: cfg.clone() })
}

/// Draws `n_eval` samples from the evaluation stream, independent of the
/// training samples for the same seed.
pub fn fresh_eval_set(cfg: &DataConfig, n_eval: usize) -> Result<Dataset> {
    cfg.validate()?;
    if n_eval == 0 {
        return config_err("n_eval must be at least 1");
    }
    let samples = draw_set(cfg, n_eval, Stream::EvalData);
    Ok(Dataset { samples, config: cfg.clone() })
}
