//! Entropy of the ground-truth/coarse mixture the fine model is trained on.
//!
//! With ground truth drawn from `P_gt` and coarse predictions from `P_c`, the
//! fine model's prediction input at mixing level `t` follows
//! `P_t = (1 - t) P_gt + t P_c`. When the components barely overlap,
//! `H[P_t] ~ (1 - t) H_gt + t H_c + H(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::train::StepTrace;

/// `-t ln t - (1 - t) ln(1 - t)`, with `0 ln 0 = 0`.
pub fn binary_entropy(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("t = {t} is outside [0, 1]")));
    }
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    Ok(term(t) + term(1.0 - t))
}

/// Differential entropy of an isotropic Gaussian in `d` dimensions.
pub fn gaussian_entropy(sigma: f64, d: usize) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    if d == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    Ok(d as f64 / 2.0 * (1.0 + (2.0 * std::f64::consts::PI * sigma * sigma).ln()))
}

/// Scale of a 1-D Gaussian with entropy `h`.
pub fn sigma_for_entropy(h: f64) -> f64 {
    (h - 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln())).exp()
}

/// `1 / (1 + exp(-(h_c - h_gt)))`: where the approximation peaks.
pub fn peak_t(h_gt: f64, h_c: f64) -> f64 {
    1.0 / (1.0 + (-(h_c - h_gt)).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionModel {
    /// Length unit for component separation.
    pub sigma: f64,
    pub dim: usize,
    pub h_gt: f64,
    pub h_c: f64,
}

impl DistributionModel {
    pub fn new(sigma: f64, dim: usize, h_gt: f64, h_c: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        if dim == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        if !(h_gt.is_finite() && h_c.is_finite()) {
            return Err(invalid("entropies must be finite"));
        }
        Ok(Self {
            sigma,
            dim,
            h_gt,
            h_c,
        })
    }

    /// Both components are Gaussians of scale `sigma`.
    pub fn shared_sigma(sigma: f64) -> Result<Self> {
        let h = gaussian_entropy(sigma, 1)?;
        Self::new(sigma, 1, h, h)
    }
}

/// `(1 - t) H_gt + t H_c + H(t)`.
pub fn mixture_entropy_approx(model: &DistributionModel, t: f64) -> Result<f64> {
    let h = binary_entropy(t)?;
    Ok((1.0 - t) * model.h_gt + t * model.h_c + h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub entropy: f64,
    pub stderr: f64,
}

pub const MIN_MC_SAMPLES: usize = 10_000;

/// Monte-Carlo entropy of the 1-D mixture `(1 - t) N(0, s_gt) + t N(mu, s_c)`
/// with `mu = separation * sigma` and component scales chosen so their
/// entropies are `h_gt` and `h_c`.
pub fn mixture_entropy_montecarlo(
    model: &DistributionModel,
    t: f64,
    separation: f64,
    rng: &mut Rng,
    n_samples: usize,
) -> Result<McEstimate> {
    if model.dim != 1 {
        return Err(invalid("Monte-Carlo estimate is one-dimensional"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("t = {t} is outside [0, 1]")));
    }
    if n_samples < MIN_MC_SAMPLES {
        return Err(invalid(format!("need at least {MIN_MC_SAMPLES} samples, got {n_samples}")));
    }
    let (s_gt, s_c) = (sigma_for_entropy(model.h_gt), sigma_for_entropy(model.h_c));
    let mu = separation * model.sigma;
    let log_norm = |u: f64, m: f64, s: f64| {
        -0.5 * ((u - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let coarse = rng.uniform() < t;
        let u = if coarse {
            mu + s_c * rng.normal()
        } else {
            s_gt * rng.normal()
        };
        let mut terms = Vec::with_capacity(2);
        if t < 1.0 {
            terms.push((1.0 - t).ln() + log_norm(u, 0.0, s_gt));
        }
        if t > 0.0 {
            terms.push(t.ln() + log_norm(u, mu, s_c));
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lp = m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        sum += -lp;
        sum_sq += lp * lp;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(McEstimate {
        entropy: mean,
        stderr: (var / n).sqrt(),
    })
}

/// One row of the diagnostics table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub t: f64,
    pub h_approx: f64,
    pub h_mc: f64,
    pub mc_stderr: f64,
}

/// Approximation and Monte-Carlo estimate over a grid of `t` values.
pub fn diagnose_grid(
    model: &DistributionModel,
    ts: &[f64],
    separation: f64,
    rng: &mut Rng,
    n_samples: usize,
) -> Result<Vec<DiagnosticRow>> {
    ts.iter()
        .map(|&t| {
            let mc = mixture_entropy_montecarlo(model, t, separation, rng, n_samples)?;
            Ok(DiagnosticRow {
                t,
                h_approx: mixture_entropy_approx(model, t)?,
                h_mc: mc.entropy,
                mc_stderr: mc.stderr,
            })
        })
        .collect()
}

/// Windowed summary of a training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow {
    pub start_iter: usize,
    pub mean_t: f64,
    pub coarse_fraction: f64,
    pub mean_loss_fine: f64,
}

/// Means of `t`, the coarse-fed share and the fine loss over consecutive
/// windows; the last window may be shorter.
pub fn difficulty_trace(traces: &[StepTrace], window: usize) -> Result<Vec<DifficultyRow>> {
    if traces.is_empty() {
        return Err(Error::Empty("traces"));
    }
    if window == 0 {
        return Err(invalid("window must be at least 1"));
    }
    Ok(traces
        .chunks(window)
        .map(|w| {
            let n = w.len() as f64;
            DifficultyRow {
                start_iter: w[0].iter,
                mean_t: w.iter().map(|s| s.t).sum::<f64>() / n,
                coarse_fraction: w.iter().map(|s| s.chose_coarse).sum::<f64>() / n,
                mean_loss_fine: w.iter().map(|s| s.loss_fine).sum::<f64>() / n,
            }
        })
        .collect())
}
