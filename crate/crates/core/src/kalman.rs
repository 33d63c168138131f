//! Kalman filter over the augmented density model, in one-step-ahead
//! predictor form (the correction is propagated through A(k)):
//!
//! ```text
//! K(k)   = P Cᵀ (C P Cᵀ + R)⁻¹
//! x̂(k+1) = A x̂ + B u + A K (z − C x̂)
//! P(k+1) = A (I − K C) P Aᵀ + Q
//! ```
//!
//! plus a numerical observability check through the windowed Gramian.

use std::collections::BTreeMap;

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltv_model::{build_a, build_b, build_u, theta_to_flow, MeasurementModel, StateIndex};
use crate::network::NetworkConfig;
use crate::sensing::{MeasurementFrame, DEFAULT_SPEED_FLOOR_KMH};

/// Innovation covariances with a larger condition estimate are rejected.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// Relative singular-value threshold for the Gramian rank.
pub const GRAMIAN_RANK_EPS: f64 = 1e-10;

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-12 * scale
}

fn check_spd(m: &DMatrix<f64>, which: &'static str) -> Result<()> {
    if is_symmetric(m) && Cholesky::new(m.clone()).is_some() {
        Ok(())
    } else {
        Err(Error::NotPositiveDefinite { which })
    }
}

/// Scalar knobs for diagonal tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagonalTuning {
    /// Process-noise weight for density states.
    pub q_density: f64,
    /// Process-noise weight for ramp (θ) states.
    pub q_ramp: f64,
    /// Measurement-noise weight.
    pub r: f64,
    /// Initial mean for density states; θ states start at 0.
    pub mu: f64,
    /// Initial covariance diagonal.
    pub h: f64,
}

impl DiagonalTuning {
    /// Short congested stretch with 50 m segments.
    pub fn ngsim() -> Self {
        Self {
            q_density: 1.0,
            q_ramp: 0.01,
            r: 10.0,
            mu: 40.0,
            h: 1.0,
        }
    }

    /// Long stretch with detector-spaced segments.
    pub fn a20() -> Self {
        Self {
            r: 100.0,
            mu: 4.0,
            ..Self::ngsim()
        }
    }
}

impl Default for DiagonalTuning {
    fn default() -> Self {
        Self::ngsim()
    }
}

/// Filter weights and initial conditions. Q, R and H must be symmetric
/// positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTuning {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub h: DMatrix<f64>,
}

impl FilterTuning {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, mu: DVector<f64>, h: DMatrix<f64>) -> Result<Self> {
        let n1 = mu.len();
        for (what, m) in [("Q", &q), ("H", &h)] {
            if m.shape() != (n1, n1) {
                return Err(Error::Dimension {
                    what,
                    expected: n1,
                    got: m.nrows(),
                });
            }
        }
        check_spd(&q, "Q")?;
        check_spd(&r, "R")?;
        check_spd(&h, "H")?;
        Ok(Self { q, r, mu, h })
    }

    pub fn diagonal(idx: &StateIndex, d: &DiagonalTuning) -> Result<Self> {
        let n = idx.n_segments;
        let n1 = idx.total_dim();
        let q = DMatrix::from_fn(n1, n1, |i, j| match (i == j, i < n) {
            (true, true) => d.q_density,
            (true, false) => d.q_ramp,
            _ => 0.0,
        });
        let r = DMatrix::identity(idx.output_dim(), idx.output_dim()) * d.r;
        let mu = DVector::from_fn(n1, |i, _| if i < n { d.mu } else { 0.0 });
        let h = DMatrix::identity(n1, n1) * d.h;
        Self::new(q, r, mu, h)
    }

    pub fn state_dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: usize,
}

pub fn init_filter(tuning: &FilterTuning) -> FilterState {
    FilterState {
        x_hat: tuning.mu.clone(),
        p: tuning.h.clone(),
        k: 0,
    }
}

/// K = P Cᵀ (C P Cᵀ + R)⁻¹, solved through a Cholesky factor of the
/// innovation covariance.
pub fn kalman_gain(p: &DMatrix<f64>, c: &DMatrix<f64>, r: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    let cp = c * p;
    let s = &cp * c.transpose() + r;
    let chol: Cholesky<f64, Dyn> = Cholesky::new(s).ok_or(Error::SingularInnovation {
        step,
        condition: f64::INFINITY,
    })?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &d| (lo.min(d.abs()), hi.max(d.abs())));
    let condition = (hi / lo).powi(2);
    if !condition.is_finite() || condition > MAX_INNOVATION_CONDITION {
        return Err(Error::SingularInnovation { step, condition });
    }
    // S Kᵀ = C P  (S and P symmetric)
    Ok(chol.solve(&cp).transpose())
}

/// One predictor step. P is re-symmetrized afterwards.
pub fn kf_step(
    st: &FilterState,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: &DVector<f64>,
    c: &DMatrix<f64>,
    z: &DVector<f64>,
    tuning: &FilterTuning,
) -> Result<FilterState> {
    let n1 = st.x_hat.len();
    let dims = [
        ("A", a.nrows() == n1 && a.ncols() == n1, a.nrows()),
        ("B", b.nrows() == n1 && b.ncols() == u.len(), b.nrows()),
        ("C", c.ncols() == n1 && c.nrows() == z.len(), c.ncols()),
        ("P", st.p.shape() == (n1, n1), st.p.nrows()),
        ("R", tuning.r.shape() == (z.len(), z.len()), tuning.r.nrows()),
        ("Q", tuning.q.shape() == (n1, n1), tuning.q.nrows()),
    ];
    if let Some(&(what, _, got)) = dims.iter().find(|d| !d.1) {
        return Err(Error::Dimension {
            what,
            expected: n1,
            got,
        });
    }

    let gain = kalman_gain(&st.p, c, &tuning.r, st.k)?;
    let innovation = z - c * &st.x_hat;
    let corrected = &st.x_hat + &gain * innovation;
    let x_hat = a * corrected + b * u;

    let i_kc = DMatrix::identity(n1, n1) - &gain * c;
    let mut p = a * i_kc * &st.p * a.transpose() + &tuning.q;
    symmetrize(&mut p);

    Ok(FilterState {
        x_hat,
        p,
        k: st.k + 1,
    })
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Used for a segment whose speed has never been observed, km/h.
    pub fallback_speed_kmh: f64,
    /// Below this speed a flow sensor cannot be turned into a density.
    pub speed_floor_kmh: f64,
    /// Report densities clamped at zero. The filter state is never clamped.
    pub clamp_output: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            fallback_speed_kmh: 100.0,
            speed_floor_kmh: DEFAULT_SPEED_FLOOR_KMH,
            clamp_output: false,
        }
    }
}

/// Filter output for one step: the estimate of the state at step k, built
/// from measurements up to k-1, and the speeds used for the transition
/// from k to k+1.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateStep {
    pub k: usize,
    /// veh/km per segment.
    pub densities: Vec<f64>,
    /// Estimated unmeasured ramp flows by segment, veh/h.
    pub ramp_flows: BTreeMap<usize, f64>,
    pub speeds_used: Vec<f64>,
    /// Densities fed to the filter for each measurement row.
    pub z: Vec<f64>,
}

/// Summary of fallbacks taken during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    /// (step, segment) pairs that fell back to the default speed.
    pub fallback_speed_cells: usize,
    /// (step, sensor) pairs whose density conversion was held.
    pub held_measurements: usize,
}

/// Runs the filter over a sequence of frames.
///
/// Missing segment speeds hold the last used speed, or the fallback speed
/// when never observed. Sensor flows are converted to densities with the
/// speed used at that segment; below the speed floor the previous converted
/// value is held (or the current prediction when there is none).
pub fn run_filter(
    cfg: &NetworkConfig,
    idx: &StateIndex,
    measurement: &MeasurementModel,
    tuning: &FilterTuning,
    frames: &[MeasurementFrame],
    opts: &RunOptions,
) -> Result<(Vec<EstimateStep>, RunDiagnostics)> {
    let n = idx.n_segments;
    let b = build_b(idx, cfg)?;
    let c = &measurement.c;
    let mut state = init_filter(tuning);
    let mut last_speed: Vec<Option<f64>> = vec![None; n];
    let mut last_z: Vec<Option<f64>> = vec![None; measurement.segments.len()];
    let mut diag = RunDiagnostics::default();
    let mut out = Vec::with_capacity(frames.len());

    for frame in frames {
        if frame.segment_speeds.len() != n {
            return Err(Error::Dimension {
                what: "frame segment speeds",
                expected: n,
                got: frame.segment_speeds.len(),
            });
        }
        let speeds: Vec<f64> = frame
            .segment_speeds
            .iter()
            .zip(last_speed.iter_mut())
            .map(|(reported, last)| {
                if let Some(v) = reported {
                    *last = Some(*v);
                }
                last.unwrap_or_else(|| {
                    diag.fallback_speed_cells += 1;
                    opts.fallback_speed_kmh
                })
            })
            .collect();

        let prediction = c * &state.x_hat;
        let z: Vec<f64> = measurement
            .segments
            .iter()
            .enumerate()
            .map(|(row, &seg)| {
                let v = speeds[seg - 1];
                let q = frame.sensor_flows.get(&seg).copied();
                let fresh = match q {
                    Some(q) if v >= opts.speed_floor_kmh => Some(q / v),
                    _ => None,
                };
                match fresh {
                    Some(z) => {
                        last_z[row] = Some(z);
                        z
                    }
                    None => {
                        diag.held_measurements += 1;
                        last_z[row].unwrap_or(prediction[row])
                    }
                }
            })
            .collect();

        let mut densities: Vec<f64> = state.x_hat.rows(0, n).iter().copied().collect();
        if opts.clamp_output {
            densities.iter_mut().for_each(|d| *d = d.max(0.0));
        }
        let ramp_flows = idx
            .unmeasured
            .iter()
            .enumerate()
            .map(|(j, r)| (r.segment, theta_to_flow(cfg, r.segment, state.x_hat[n + j])))
            .collect();
        out.push(EstimateStep {
            k: frame.k,
            densities,
            ramp_flows,
            speeds_used: speeds.clone(),
            z: z.clone(),
        });

        let a = build_a(idx, cfg, &speeds)?;
        let u = build_u(idx, frame.q0, &frame.measured_ramp_flows)?;
        let z = DVector::from_vec(z);
        state = kf_step(&state, &a, &b, &u, c, &z, tuning).map_err(|e| match e {
            Error::SingularInnovation { condition, .. } => Error::SingularInnovation {
                step: frame.k,
                condition,
            },
            other => other,
        })?;
    }
    if diag.fallback_speed_cells > 0 {
        debug!(
            "{} step/segment cells had no speed report and used the fallback {} km/h",
            diag.fallback_speed_cells, opts.fallback_speed_kmh
        );
    }
    Ok((out, diag))
}

/// Windowed observability Gramian Σ_{j<M} Φ(j)ᵀ Cᵀ C Φ(j) with
/// Φ(0) = I and Φ(j+1) = A(j) Φ(j), where M is the number of matrices
/// given. Returns the Gramian and its numerical rank (singular values at or
/// above `GRAMIAN_RANK_EPS · σ_max`).
pub fn observability_gramian(a_seq: &[DMatrix<f64>], c: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let n1 = c.ncols();
    if a_seq.len() < n1 {
        return Err(Error::InvalidInput(format!(
            "observability window {} is shorter than the state dimension {n1}",
            a_seq.len()
        )));
    }
    let ctc = c.transpose() * c;
    let mut phi = DMatrix::<f64>::identity(n1, n1);
    let mut gram = DMatrix::<f64>::zeros(n1, n1);
    for a in a_seq {
        if a.shape() != (n1, n1) {
            return Err(Error::Dimension {
                what: "A in observability window",
                expected: n1,
                got: a.nrows(),
            });
        }
        gram += phi.transpose() * &ctc * &phi;
        phi = a * phi;
    }
    let sv = gram.clone().singular_values();
    let max = sv.max();
    let rank = if max > 0.0 {
        sv.iter().filter(|&&s| s >= GRAMIAN_RANK_EPS * max).count()
    } else {
        0
    };
    Ok((gram, rank))
}
