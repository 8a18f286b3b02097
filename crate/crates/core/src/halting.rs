//! Stability-based halting.
//!
//! The refinement loop summarizes the anchors by their mean row, measures the
//! cosine distance between successive means, and stops once that distance has
//! stayed strictly below `tau` for `patience` consecutive steps (or the budget
//! `k_max` runs out). [`halting_time`] is the same rule written as a scan over
//! a complete delta sequence; both must agree on every input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{cosine_similarity, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HaltingConfig {
    pub tau: f64,
    pub patience: usize,
    pub k_max: usize,
}

impl Default for HaltingConfig {
    fn default() -> Self {
        HaltingConfig {
            tau: 0.01,
            patience: 2,
            k_max: 8,
        }
    }
}

impl HaltingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::Config(format!("tau {} must be >= 0", self.tau)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if self.patience > self.k_max {
            return Err(Error::Config(format!(
                "patience {} exceeds k_max {}; early halting would be impossible",
                self.patience, self.k_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepPolicy {
    Fixed { k: usize },
    Adaptive(HaltingConfig),
}

impl StepPolicy {
    pub fn budget(&self) -> usize {
        match self {
            StepPolicy::Fixed { k } => *k,
            StepPolicy::Adaptive(c) => c.k_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StepPolicy::Fixed { k: 0 } => Err(Error::Config("fixed K must be at least 1".into())),
            StepPolicy::Fixed { .. } => Ok(()),
            StepPolicy::Adaptive(c) => c.validate(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HaltingTrace {
    pub deltas: Vec<f64>,
    pub counters: Vec<usize>,
    pub halt_step: usize,
    pub halted_early: bool,
}

/// Mean anchor row.
pub fn mean_anchor<T: Scalar>(a: &Tensor<T>) -> Result<Vec<T>> {
    let (m, d) = a.matrix_dims("mean_anchor")?;
    if m == 0 || d == 0 {
        return Err(Error::DegenerateInput("mean_anchor needs m >= 1"));
    }
    let mut acc = vec![T::zero(); d];
    for row in a.values().chunks(d) {
        for (s, &v) in acc.iter_mut().zip(row) {
            *s += v;
        }
    }
    let inv = T::one() / T::lit(m as f64);
    acc.iter_mut().for_each(|s| *s *= inv);
    Ok(acc)
}

/// `1 - cos(current, previous)`, in `[0, 2]`.
pub fn stability_delta<T: Scalar>(current: &[T], previous: &[T]) -> Result<T> {
    let c = cosine_similarity(current, previous)?;
    Ok(T::one() - c)
}

pub fn update_counter(c: usize, delta: f64, tau: f64) -> usize {
    if delta < tau {
        c + 1
    } else {
        0
    }
}

pub fn should_halt(c: usize, patience: usize) -> bool {
    c >= patience
}

/// Closed-form halting step over a full delta sequence.
///
/// `T` is the first `t` in `1..=k_max` whose window of the last `patience`
/// deltas is entirely below `tau`; otherwise `T = k_max`, not early.
pub fn halting_time(deltas: &[f64], config: &HaltingConfig) -> Result<(usize, bool)> {
    if deltas.is_empty() {
        return Err(Error::DegenerateInput("halting_time needs at least one delta"));
    }
    let s = config.patience.max(1);
    let horizon = deltas.len().min(config.k_max);
    for t in s..=horizon {
        if deltas[t - s..t].iter().all(|&d| d < config.tau) {
            return Ok((t, t < config.k_max));
        }
    }
    Ok((config.k_max, false))
}

/// A refinement loop stopped by a step error. `trace` covers the steps that
/// completed.
#[derive(Debug)]
pub struct Interrupted<E> {
    pub trace: HaltingTrace,
    pub error: E,
}

/// Drives `step` under `policy`. `step(t)` performs refinement step `t`
/// (0-based) and returns its delta.
pub fn run_policy<E>(
    policy: &StepPolicy,
    mut step: impl FnMut(usize) -> Result<f64, E>,
) -> Result<HaltingTrace, Interrupted<E>> {
    let mut trace = HaltingTrace::default();
    let (budget, adaptive) = match policy {
        StepPolicy::Fixed { k } => (*k, None),
        StepPolicy::Adaptive(c) => (c.k_max, Some(*c)),
    };
    let mut c = 0;
    for t in 0..budget {
        let delta = match step(t) {
            Ok(d) => d,
            Err(error) => {
                trace.halt_step = trace.deltas.len();
                return Err(Interrupted { trace, error });
            }
        };
        trace.deltas.push(delta);
        trace.halt_step = t + 1;
        if let Some(cfg) = adaptive {
            c = update_counter(c, delta, cfg.tau);
            trace.counters.push(c);
            if should_halt(c, cfg.patience) {
                trace.halted_early = trace.halt_step < cfg.k_max;
                break;
            }
        } else {
            c = 0;
            trace.counters.push(c);
        }
    }
    Ok(trace)
}

/// Scalar-operation tally for the halting check, used to show its cost
/// depends only on the anchor shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount(pub usize);

/// Delta between two anchor matrices, counting arithmetic operations.
pub fn counted_delta<T: Scalar>(current: &Tensor<T>, previous: &Tensor<T>, ops: &mut OpCount) -> Result<T> {
    let (m, d) = current.matrix_dims("counted_delta")?;
    let a = mean_anchor(current)?;
    let b = mean_anchor(previous)?;
    // two means (m*d adds + d scalings each), three dot products, one ratio
    ops.0 += 2 * (m * d + d) + 3 * 2 * d + 4;
    stability_delta(&a, &b)
}
