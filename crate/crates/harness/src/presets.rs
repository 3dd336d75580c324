//! Named starting configurations.

use prunelab::model::Activation;

use crate::config::{MaskMode, Preset, RunConfig, SweepSpec};
use crate::range::tidy;

/// Two classes, 400-dimensional patches, width 150, 100 train and 100 test
/// samples, weight std 0.1, step 0.001 for 1000 iterations, relu.
fn small_scale(sigma_n: f64) -> RunConfig {
    RunConfig {
        classes: 2,
        dim: 400,
        n_train: 100,
        n_eval: 100,
        mu: 1.0,
        sigma_n,
        width: 150,
        sigma0: 0.1,
        activation: Activation::Relu,
        p: 1.0,
        mask: MaskMode::Bernoulli,
        eta: 0.001,
        // never reached: the runs use the full iteration budget
        epsilon: 1e-12,
        t_max: 1000,
        log_every: 100,
        track_decomposition: false,
        phase_threshold: None,
        eval_curve: false,
        diagnostics: false,
        seed: 0,
    }
}

/// Four classes, d = 2000, width 64, 64 samples, cubic activation.
fn theory(mask: MaskMode) -> RunConfig {
    RunConfig {
        classes: 4,
        dim: 2000,
        n_train: 64,
        n_eval: 1000,
        mu: 1.0,
        sigma_n: 0.05,
        width: 64,
        sigma0: 0.01,
        activation: Activation::Poly(3),
        p: 0.15,
        mask,
        eta: 1.0,
        epsilon: 1e-2,
        t_max: 5000,
        log_every: 1,
        track_decomposition: true,
        phase_threshold: None,
        eval_curve: false,
        diagnostics: true,
        seed: 0,
    }
}

/// Retention values for pruned fractions `0, 0.1, ..., 0.9`.
pub fn retention_grid() -> Vec<f64> {
    (0..10).map(|k| tidy(1.0 - k as f64 / 10.0)).collect()
}

pub fn preset(which: Preset) -> SweepSpec {
    let seeds10: Vec<u64> = (0..10).collect();
    let seeds5: Vec<u64> = (0..5).collect();
    let (base, p_values, seeds) = match which {
        Preset::Fig3a => (small_scale(0.5), retention_grid(), seeds10),
        Preset::Fig3b => (small_scale(1.0), retention_grid(), seeds10),
        Preset::Fig3c => {
            let base = RunConfig { p: 0.5, log_every: 10, eval_curve: true, ..small_scale(1.0) };
            (base, vec![0.5], seeds10)
        }
        Preset::MildTheory => (theory(MaskMode::Bernoulli), vec![0.15], seeds5),
        Preset::OverTheory => (theory(MaskMode::NoSignal), vec![0.15], seeds5),
        Preset::Custom => (small_scale(0.5), vec![1.0], vec![0]),
    };
    SweepSpec { preset: which, sigma_n_values: vec![base.sigma_n], base, p_values, seeds }
}
