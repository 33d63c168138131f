//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;

/// Steps dropped from the start of the horizon by default.
pub const DEFAULT_WARMUP_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Density RMSE over the grand mean of the true densities (fraction).
    pub cv_rho: f64,
    /// Same, over the full horizon including warm-up.
    pub cv_rho_full: f64,
    /// Mean conservation-error covariance due to speed errors, veh²/km².
    pub speed_error_covariance_w: f64,
    /// RMSE of estimated unmeasured ramp flows, veh/h (None without ramp truth).
    pub ramp_flow_rmse: Option<f64>,
    /// Lag (steps) minimizing the ramp-flow RMSE.
    pub ramp_flow_best_lag: Option<usize>,
    pub warmup_steps: usize,
    /// Number of steps the metrics are computed over.
    pub horizon_steps: usize,
}

fn check_shapes(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "metric horizon",
            expected: b.len(),
            got: a.len(),
        });
    }
    if let Some((x, y)) = a.iter().zip(b).find(|(x, y)| x.len() != y.len()) {
        return Err(Error::Dimension {
            what: "metric segments",
            expected: y.len(),
            got: x.len(),
        });
    }
    Ok(())
}

/// CV_ρ = sqrt(mean (ρ̂ − ρ)²) / mean ρ over all (k, i).
pub fn cv_rho(est: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    check_shapes(est, truth)?;
    let mut sq = 0.0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (e, t) in est.iter().zip(truth) {
        for (a, b) in e.iter().zip(t) {
            sq += (a - b) * (a - b);
            sum += b;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("empty metric horizon".into()));
    }
    let mean = sum / count as f64;
    if !(mean > 0.0) {
        return Err(Error::InvalidInput(format!("true density mean must be positive, got {mean}")));
    }
    Ok((sq / count as f64).sqrt() / mean)
}

/// w = mean over (k, i) of (T/Δ_i)² ρ_i² (v̂_i − v̄_i)².
pub fn speed_error_covariance(
    cfg: &NetworkConfig,
    truth: &[Vec<f64>],
    v_hat: &[Vec<f64>],
    v_bar: &[Vec<f64>],
) -> Result<f64> {
    check_shapes(v_hat, truth)?;
    check_shapes(v_bar, truth)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((rho, vh), vb) in truth.iter().zip(v_hat).zip(v_bar) {
        for (i, ((r, a), b)) in rho.iter().zip(vh).zip(vb).enumerate() {
            let c = cfg.time_step_h / cfg.segments[i].length_km;
            acc += c * c * r * r * (a - b) * (a - b);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}

/// Mean of `speed_error_covariance` over several runs (the expectation
/// realized empirically).
pub fn mean_speed_error_covariance(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn ramp_flow_rmse(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::Dimension {
            what: "ramp flow series",
            expected: truth.len(),
            got: est.len(),
        });
    }
    if est.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = est.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / est.len() as f64).sqrt())
}

/// RMSE of `est[k + lag]` against `truth[k]` for each lag in `0..=max_lag`;
/// returns (best lag, its RMSE).
pub fn best_lag(est: &[f64], truth: &[f64], max_lag: usize) -> Result<(usize, f64)> {
    ramp_flow_rmse(est, truth)?;
    let mut best = (0, f64::INFINITY);
    for lag in 0..=max_lag.min(est.len().saturating_sub(1)) {
        let rmse = ramp_flow_rmse(&est[lag..], &truth[..truth.len() - lag])?;
        if rmse < best.1 {
            best = (lag, rmse);
        }
    }
    Ok(best)
}
