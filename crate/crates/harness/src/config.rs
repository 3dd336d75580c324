//! Run and sweep configuration, presets and the text config format.
//!
//! ```text
//! # comment
//! preset = fig3a
//! seed = 0
//!
//! [data]
//! classes = 2
//! sigma_n = 0.5
//!
//! [sweep]
//! p = 1.0:0.1:0.1
//! seeds = 0:9
//! ```
//!
//! Keys before the first section are top-level. A `preset` key anywhere in
//! the file selects the starting values; every other key overrides one field.
//! Unknown sections, unknown keys and repeated keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use prunelab::diagnostics::RegimeParams;
use prunelab::model::Activation;
use prunelab::pruner::Shape;
use prunelab::synthdata::DataConfig;
use prunelab::trainer::TrainConfig;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::range::{parse_f64_list, parse_u64_list};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Fig3a,
    Fig3b,
    Fig3c,
    MildTheory,
    OverTheory,
    Custom,
}

impl Preset {
    pub const ALL: [Preset; 6] =
        [Preset::Fig3a, Preset::Fig3b, Preset::Fig3c, Preset::MildTheory, Preset::OverTheory, Preset::Custom];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig3a => "fig3a",
            Preset::Fig3b => "fig3b",
            Preset::Fig3c => "fig3c",
            Preset::MildTheory => "mild_theory",
            Preset::OverTheory => "over_theory",
            Preset::Custom => "custom",
        }
    }

    /// Whether the preset's grid is laid out on the pruned-fraction axis.
    pub fn uses_pruned_fraction(self) -> bool {
        matches!(self, Preset::Fig3a | Preset::Fig3b | Preset::Fig3c)
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s.trim()).ok_or_else(|| HarnessError::Parse {
            what: "preset",
            input: s.to_owned(),
            reason: "expected one of fig3a, fig3b, fig3c, mild_theory, over_theory, custom".into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Independent Bernoulli(p) entries.
    Bernoulli,
    /// Bernoulli(p) conditioned on every signal set being empty.
    NoSignal,
}

impl MaskMode {
    fn name(self) -> &'static str {
        match self {
            MaskMode::Bernoulli => "bernoulli",
            MaskMode::NoSignal => "no_signal",
        }
    }
}

impl FromStr for MaskMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bernoulli" => Ok(MaskMode::Bernoulli),
            "no_signal" => Ok(MaskMode::NoSignal),
            other => Err(HarnessError::Parse {
                what: "mask mode",
                input: other.to_owned(),
                reason: "expected bernoulli or no_signal".into(),
            }),
        }
    }
}

/// Everything needed to run one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub mu: f64,
    pub sigma_n: f64,
    pub width: usize,
    pub sigma0: f64,
    pub activation: Activation,
    /// Retention probability.
    pub p: f64,
    pub mask: MaskMode,
    pub eta: f64,
    pub epsilon: f64,
    pub t_max: u64,
    pub log_every: u64,
    pub track_decomposition: bool,
    pub phase_threshold: Option<f64>,
    /// Evaluate test metrics at every logged iteration.
    pub eval_curve: bool,
    /// Run the diagnostic checks after training.
    pub diagnostics: bool,
    pub seed: u64,
}

impl RunConfig {
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            classes: self.classes,
            dim: self.dim,
            n_train: self.n_train,
            mu: self.mu,
            sigma_n: self.sigma_n,
            seed: self.seed,
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.classes, self.width, self.dim)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            epsilon: self.epsilon,
            t_max: self.t_max,
            log_every: self.log_every,
            track_decomposition: self.track_decomposition,
            phase_threshold: self.phase_threshold,
        }
    }

    pub fn regime_params(&self) -> RegimeParams {
        RegimeParams {
            classes: self.classes,
            dim: self.dim,
            n_train: self.n_train,
            width: self.width,
            mu: self.mu,
            sigma_n: self.sigma_n,
            sigma0: self.sigma0,
            eta: self.eta,
            epsilon: self.epsilon,
            p: self.p,
            degree: self.activation.degree(),
            t_max: self.t_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data_config().validate()?;
        self.train_config().validate()?;
        self.activation.validate()?;
        if self.width == 0 {
            return Err(HarnessError::Invalid("width must be at least 1".into()));
        }
        if self.n_eval == 0 {
            return Err(HarnessError::Invalid("n_eval must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(HarnessError::Invalid(format!("p must lie in [0, 1], got {}", self.p)));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(HarnessError::Invalid(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        if self.mask == MaskMode::NoSignal && self.p >= 1.0 {
            return Err(HarnessError::Invalid("no_signal masks need p < 1".into()));
        }
        Ok(())
    }
}

/// A grid of cells sharing one base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub preset: Preset,
    pub base: RunConfig,
    pub p_values: Vec<f64>,
    pub sigma_n_values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p_values.is_empty() || self.sigma_n_values.is_empty() || self.seeds.is_empty() {
            return Err(HarnessError::Invalid("sweep lists must be non-empty".into()));
        }
        for &p in &self.p_values {
            self.cell_config(p, self.sigma_n_values[0], self.seeds[0]).validate()?;
        }
        for &s in &self.sigma_n_values {
            self.cell_config(self.p_values[0], s, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    pub fn cell_config(&self, p: f64, sigma_n: f64, seed: u64) -> RunConfig {
        RunConfig { p, sigma_n, seed, ..self.base.clone() }
    }

    pub fn cell_count(&self) -> usize {
        self.p_values.len() * self.sigma_n_values.len() * self.seeds.len()
    }

    /// Note recorded in metadata when the grid came from a pruned-fraction axis.
    pub fn conversion_note(&self) -> Option<String> {
        self.preset.uses_pruned_fraction().then(|| {
            "p is the retention probability; the preset's pruned fractions f map to p = 1 - f".to_owned()
        })
    }

    pub fn from_preset(preset: Preset) -> Self {
        crate::presets::preset(preset)
    }

    /// Full config text; parsing it back yields the same spec.
    pub fn to_config_string(&self) -> String {
        let b = &self.base;
        let mut out = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let _ = writeln!(out, "preset = {}", self.preset);
        let _ = writeln!(out, "seed = {}", b.seed);
        if let Some(note) = self.conversion_note() {
            let fractions: Vec<String> = self.p_values.iter().map(|p| format!("{:?}", crate::range::tidy(1.0 - p))).collect();
            let _ = writeln!(out, "# {note}; pruned fractions here: {}", fractions.join(", "));
        }
        let _ = writeln!(out, "\n[data]");
        let _ = writeln!(out, "classes = {}", b.classes);
        let _ = writeln!(out, "dim = {}", b.dim);
        let _ = writeln!(out, "n_train = {}", b.n_train);
        let _ = writeln!(out, "n_eval = {}", b.n_eval);
        let _ = writeln!(out, "mu = {:?}", b.mu);
        let _ = writeln!(out, "sigma_n = {:?}", b.sigma_n);
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(out, "width = {}", b.width);
        let _ = writeln!(out, "sigma0 = {:?}", b.sigma0);
        let _ = writeln!(out, "activation = {}", b.activation);
        let _ = writeln!(out, "p = {:?}", b.p);
        let _ = writeln!(out, "mask = {}", b.mask.name());
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "eta = {:?}", b.eta);
        let _ = writeln!(out, "epsilon = {:?}", b.epsilon);
        let _ = writeln!(out, "t_max = {}", b.t_max);
        let _ = writeln!(out, "log_every = {}", b.log_every);
        let _ = writeln!(out, "track_decomposition = {}", b.track_decomposition);
        match b.phase_threshold {
            Some(t) => writeln!(out, "phase_threshold = {t:?}"),
            None => writeln!(out, "phase_threshold = default"),
        }
        .ok();
        let _ = writeln!(out, "eval_curve = {}", b.eval_curve);
        let _ = writeln!(out, "diagnostics = {}", b.diagnostics);
        let _ = writeln!(out, "\n[sweep]");
        let _ = writeln!(out, "p = {}", list(&self.p_values));
        let _ = writeln!(out, "sigma_n = {}", list(&self.sigma_n_values));
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "seeds = {}", seeds.join(", "));
        out
    }
}

struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

fn entries(text: &str) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut out: Vec<Entry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| HarnessError::Config { line, reason: "unterminated section header".into() })?
                .trim();
            if !["data", "model", "train", "sweep"].contains(&name) {
                return Err(HarnessError::Config { line, reason: format!("unknown section [{name}]") });
            }
            section = name.to_owned();
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| HarnessError::Config { line, reason: "expected key = value".into() })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(HarnessError::Config { line, reason: "empty key or value".into() });
        }
        if out.iter().any(|e| e.section == section && e.key == key) {
            return Err(HarnessError::Config { line, reason: format!("duplicate key `{key}`") });
        }
        out.push(Entry { section: section.clone(), key: key.to_owned(), value: value.to_owned(), line });
    }
    Ok(out)
}

fn value<T: FromStr>(e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| HarnessError::Config {
        line: e.line,
        reason: format!("`{}` is not a valid value for {}", e.value, e.key),
    })
}

fn wrap<T>(e: &Entry, r: Result<T>) -> Result<T> {
    r.map_err(|err| HarnessError::Config { line: e.line, reason: err.to_string() })
}

/// Parses a config file into a sweep spec. Grid keys missing from `[sweep]`
/// fall back to the single values of the base config, or the preset grid.
pub fn parse_config(text: &str) -> Result<SweepSpec> {
    let entries = entries(text)?;
    let preset = match entries.iter().find(|e| e.section.is_empty() && e.key == "preset") {
        Some(e) => wrap(e, e.value.parse())?,
        None => Preset::Custom,
    };
    let mut spec = SweepSpec::from_preset(preset);
    let b = &mut spec.base;
    let (mut grid_p, mut grid_sigma) = (None, None);
    for e in &entries {
        match (e.section.as_str(), e.key.as_str()) {
            ("", "preset") => {}
            ("", "seed") => b.seed = value(e)?,
            ("data", "classes") => b.classes = value(e)?,
            ("data", "dim") => b.dim = value(e)?,
            ("data", "n_train") => b.n_train = value(e)?,
            ("data", "n_eval") => b.n_eval = value(e)?,
            ("data", "mu") => b.mu = value(e)?,
            ("data", "sigma_n") => b.sigma_n = value(e)?,
            ("model", "width") => b.width = value(e)?,
            ("model", "sigma0") => b.sigma0 = value(e)?,
            ("model", "activation") => b.activation = wrap(e, e.value.parse().map_err(HarnessError::from))?,
            ("model", "p") => b.p = value(e)?,
            ("model", "mask") => b.mask = wrap(e, e.value.parse())?,
            ("train", "eta") => b.eta = value(e)?,
            ("train", "epsilon") => b.epsilon = value(e)?,
            ("train", "t_max") => b.t_max = value(e)?,
            ("train", "log_every") => b.log_every = value(e)?,
            ("train", "track_decomposition") => b.track_decomposition = value(e)?,
            ("train", "phase_threshold") => {
                b.phase_threshold = if e.value == "default" { None } else { Some(value(e)?) }
            }
            ("train", "eval_curve") => b.eval_curve = value(e)?,
            ("train", "diagnostics") => b.diagnostics = value(e)?,
            ("sweep", "p") => grid_p = Some(wrap(e, parse_f64_list(&e.value))?),
            ("sweep", "sigma_n") => grid_sigma = Some(wrap(e, parse_f64_list(&e.value))?),
            ("sweep", "seeds") => spec.seeds = wrap(e, parse_u64_list(&e.value))?,
            (section, key) => {
                let place = if section.is_empty() { "top level".to_owned() } else { format!("[{section}]") };
                return Err(HarnessError::Config { line: e.line, reason: format!("unknown key `{key}` in {place}") });
            }
        }
    }
    let touched = |section: &str, key: &str| entries.iter().any(|e| e.section == section && e.key == key);
    spec.p_values = match grid_p {
        Some(v) => v,
        None if touched("model", "p") => vec![spec.base.p],
        None => spec.p_values,
    };
    spec.sigma_n_values = match grid_sigma {
        Some(v) => v,
        None if touched("data", "sigma_n") => vec![spec.base.sigma_n],
        None => spec.sigma_n_values,
    };
    if !touched("", "seed") && !touched("sweep", "seeds") {
        spec.base.seed = spec.seeds[0];
    }
    spec.validate()?;
    Ok(spec)
}
