//! Client-level confidence maxima and the server's decaying global threshold.

use std::collections::BTreeMap;

use crate::data::UnlabeledExample;
use crate::error::{Error, Result};
use crate::federation::EVAL_CHUNK;
use crate::nn::{forward_chunked, NetworkArchitecture, ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    /// `max(1/2, (100 - 2t)/100)` between the breakpoints: never increases.
    Clamped,
    /// The three-branch formula as written, including its jump back to 1/2.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThresholdSchedule {
    pub mode: ScheduleMode,
    /// Rounds at which the decay starts and the floor of 1/2 begins.
    pub breakpoints: (usize, usize),
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        ThresholdSchedule {
            mode: ScheduleMode::Clamped,
            breakpoints: (10, 35),
        }
    }
}

impl ThresholdSchedule {
    /// Multiplier applied to `alpha * theta_bar` at pseudo-label round `t`.
    pub fn factor(&self, t: usize) -> f64 {
        let (start, floor) = self.breakpoints;
        let linear = (100.0 - 2.0 * t as f64) / 100.0;
        if t < start {
            1.0
        } else if t < floor {
            match self.mode {
                ScheduleMode::Literal => linear,
                ScheduleMode::Clamped => linear.max(0.5),
            }
        } else {
            0.5
        }
    }
}

/// Global threshold for pseudo-label round `t` (1-based).
pub fn global_threshold(theta_bar: f64, t: usize, alpha: f64, schedule: &ThresholdSchedule) -> f64 {
    schedule.factor(t) * alpha * theta_bar
}

/// Largest global-model confidence over precomputed probability rows.
pub fn max_confidence(probs: &Tensor) -> f64 {
    let rows = probs.shape()[0];
    (0..rows)
        .map(|i| probs.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Global-model probabilities over a client's unlabeled images.
pub fn global_unlabeled_probs(
    arch: &NetworkArchitecture,
    global: &ParameterSet,
    unlabeled: &[UnlabeledExample],
) -> Result<Tensor> {
    let images: Vec<&Tensor> = unlabeled.iter().map(|e| &*e.image).collect();
    forward_chunked(arch, global, &images, EVAL_CHUNK)
}

/// theta^k: the largest global-model confidence over the client's unlabeled data.
pub fn client_threshold(
    arch: &NetworkArchitecture,
    global: &ParameterSet,
    unlabeled: &[UnlabeledExample],
) -> Result<f64> {
    if unlabeled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(max_confidence(&global_unlabeled_probs(arch, global, unlabeled)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    pub client_maxima: BTreeMap<usize, f64>,
    pub mean: f64,
    pub alpha_threshold: f64,
    pub schedule: ThresholdSchedule,
    pub current: f64,
}

impl ThresholdState {
    pub fn from_maxima(
        client_maxima: BTreeMap<usize, f64>,
        alpha_threshold: f64,
        schedule: ThresholdSchedule,
        t: usize,
    ) -> Result<Self> {
        if client_maxima.is_empty() {
            return Err(Error::EmptyAggregation);
        }
        let mean = client_maxima.values().sum::<f64>() / client_maxima.len() as f64;
        Ok(ThresholdState {
            current: global_threshold(mean, t, alpha_threshold, &schedule),
            client_maxima,
            mean,
            alpha_threshold,
            schedule,
        })
    }
}
