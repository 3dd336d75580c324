//! Grid axis syntax: `start:stop:step` (inclusive), `start:stop` for
//! integers, or a comma-separated list.

use crate::error::{HarnessError, Result};

const MAX_POINTS: usize = 100_000;

fn bad(what: &'static str, input: &str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Parse { what, input: input.to_owned(), reason: reason.into() }
}

/// Rounds away binary noise from `start + i * step` so grid points print as typed.
pub fn tidy(v: f64) -> f64 {
    let r = (v * 1e12).round() / 1e12;
    if r == 0.0 { 0.0 } else { r }
}

pub fn parse_f64_list(input: &str) -> Result<Vec<f64>> {
    let what = "real list";
    let text = input.trim();
    if text.is_empty() {
        return Err(bad(what, input, "empty"));
    }
    let num = |s: &str| -> Result<f64> {
        let v: f64 = s.trim().parse().map_err(|_| bad(what, input, format!("`{}` is not a number", s.trim())))?;
        if v.is_finite() { Ok(v) } else { Err(bad(what, input, "non-finite value")) }
    };
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(bad(what, input, "expected start:stop:step"));
        };
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if step <= 0.0 {
            return Err(bad(what, input, "step must be positive"));
        }
        if stop < start {
            return Err(bad(what, input, "stop is below start"));
        }
        let span = ((stop - start) / step + 1e-9).floor();
        if span >= MAX_POINTS as f64 {
            return Err(bad(what, input, "too many points"));
        }
        return Ok((0..=span as usize).map(|i| tidy(start + i as f64 * step)).collect());
    }
    text.split(',').map(num).collect()
}

pub fn parse_u64_list(input: &str) -> Result<Vec<u64>> {
    let what = "integer list";
    let text = input.trim();
    if text.is_empty() {
        return Err(bad(what, input, "empty"));
    }
    let num = |s: &str| -> Result<u64> {
        s.trim().parse().map_err(|_| bad(what, input, format!("`{}` is not a non-negative integer", s.trim())))
    };
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let (start, stop, step) = match parts[..] {
            [a, b] => (num(a)?, num(b)?, 1),
            [a, b, c] => (num(a)?, num(b)?, num(c)?),
            _ => return Err(bad(what, input, "expected start:stop[:step]")),
        };
        if step == 0 {
            return Err(bad(what, input, "step must be positive"));
        }
        if stop < start {
            return Err(bad(what, input, "stop is below start"));
        }
        if (stop - start) / step >= MAX_POINTS as u64 {
            return Err(bad(what, input, "too many points"));
        }
        return Ok((start..=stop).step_by(step as usize).collect());
    }
    text.split(',').map(num).collect()
}
