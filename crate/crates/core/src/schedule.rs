//! How often the fine model is fed the coarse prediction instead of ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Piecewise-linear `t`: `t0` until `hold_iters`, linear up to 1 at
/// `ramp_end_iter`, then 1. Past `total_iters` it is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    t0: f64,
    hold_iters: usize,
    ramp_end_iter: usize,
    total_iters: usize,
}

impl Schedule {
    pub fn new(t0: f64, hold_iters: usize, ramp_end_iter: usize, total_iters: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&t0) {
            return Err(Error::InvalidSchedule(format!("t0 = {t0} is outside [0, 1]")));
        }
        if hold_iters > ramp_end_iter {
            return Err(Error::InvalidSchedule(format!(
                "hold_iters {hold_iters} exceeds ramp_end_iter {ramp_end_iter}"
            )));
        }
        if ramp_end_iter > total_iters {
            return Err(Error::InvalidSchedule(format!(
                "ramp_end_iter {ramp_end_iter} exceeds total_iters {total_iters}"
            )));
        }
        Ok(Self {
            t0,
            hold_iters,
            ramp_end_iter,
            total_iters,
        })
    }

    /// `t` fixed at `t` for the whole run.
    pub fn constant(t: f64, total_iters: usize) -> Result<Self> {
        Self::new(t, total_iters, total_iters, total_iters)
    }

    /// Schedule from fractions of the run length, rounded to whole iterations.
    pub fn from_fractions(t0: f64, hold: f64, ramp_end: f64, total_iters: usize) -> Result<Self> {
        for (name, f) in [("hold", hold), ("ramp_end", ramp_end)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidSchedule(format!("{name} fraction {f} is outside [0, 1]")));
            }
        }
        let at = |f: f64| (f * total_iters as f64).round() as usize;
        Self::new(t0, at(hold), at(ramp_end), total_iters)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn hold_iters(&self) -> usize {
        self.hold_iters
    }

    pub fn ramp_end_iter(&self) -> usize {
        self.ramp_end_iter
    }

    pub fn total_iters(&self) -> usize {
        self.total_iters
    }

    pub fn t(&self, iter: usize) -> f64 {
        if iter >= self.total_iters || iter >= self.ramp_end_iter {
            1.0
        } else if iter < self.hold_iters {
            self.t0
        } else {
            let span = (self.ramp_end_iter - self.hold_iters) as f64;
            let frac = (iter - self.hold_iters) as f64 / span;
            self.t0 + (1.0 - self.t0) * frac
        }
    }
}

/// How the fine model's prediction input is formed during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    /// Coarse model only.
    Baseline,
    /// Fine model always sees ground truth.
    Individual,
    /// Fine model always sees the coarse prediction.
    Joint,
    Progressive(Schedule),
}

impl Strategy {
    /// Short lowercase name used in files and tables.
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Baseline => "bl",
            Strategy::Individual => "ind",
            Strategy::Joint => "jnt",
            Strategy::Progressive(_) => "pt",
        }
    }

    pub fn trains_fine(&self) -> bool {
        !matches!(self, Strategy::Baseline)
    }

    /// Probability of feeding the coarse prediction at `iter`.
    pub fn t(&self, iter: usize) -> f64 {
        match self {
            Strategy::Baseline | Strategy::Individual => 0.0,
            Strategy::Joint => 1.0,
            Strategy::Progressive(s) => s.t(iter),
        }
    }
}

/// Per-draw choice between ground truth and coarse prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// One uniform draw per sample: coarse when it falls below `t`.
    Hard,
    /// `(1 - t) * y_star + t * y_coarse`, no draw.
    Weighted,
}

/// Returns `y_coarse` with probability `t`, else `y_star`, plus whether the
/// coarse one was chosen. Consumes exactly one uniform draw.
pub fn sample_mixed<T>(y_star: T, y_coarse: T, t: f64, rng: &mut Rng) -> (T, bool) {
    let a = rng.uniform();
    if a < t {
        (y_coarse, true)
    } else {
        (y_star, false)
    }
}
