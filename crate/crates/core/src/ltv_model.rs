//! Augmented linear time-varying density model.
//!
//! The state is `(ρ_1, …, ρ_N, θ_1, …, θ_l)` where each θ is the density
//! increment per step caused by one unmeasured ramp (`θ = T/Δ · flow`),
//! ordered by ascending segment. Segment speeds are exogenous and enter the
//! transition matrix as time-varying parameters:
//!
//! ```text
//! ρ_i(k+1) = T/Δ_i·v_{i-1}·ρ_{i-1} + (1 - T/Δ_i·v_i)·ρ_i ± θ_j + T/Δ_i·u
//! θ_j(k+1) = θ_j(k)
//! ```
//!
//! The input vector carries raw flows in veh/h (entry flow first, then the
//! measured ramps in ascending segment order); B carries the T/Δ factors.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{validate_network, NetworkConfig, RampKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RampSlot {
    /// 1-based segment index.
    pub segment: usize,
    pub kind: RampKind,
}

/// Layout of the augmented state vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateIndex {
    pub n_segments: usize,
    /// Unmeasured ramps, strictly increasing by segment. Entry j occupies
    /// state position `n_segments + j` (0-based).
    pub unmeasured: Vec<RampSlot>,
    /// Measured ramps, strictly increasing by segment. Entry j feeds input
    /// position `j + 1`.
    pub measured: Vec<RampSlot>,
}

impl StateIndex {
    pub fn total_dim(&self) -> usize {
        self.n_segments + self.unmeasured.len()
    }

    pub fn input_dim(&self) -> usize {
        1 + self.measured.len()
    }

    /// Rows of C: one per unmeasured ramp, or one when there are none.
    pub fn output_dim(&self) -> usize {
        self.unmeasured.len().max(1)
    }

    pub fn unmeasured_segments(&self) -> Vec<usize> {
        self.unmeasured.iter().map(|r| r.segment).collect()
    }

    /// 0-based state position of the θ belonging to the unmeasured ramp at `segment`.
    pub fn theta_position(&self, segment: usize) -> Option<usize> {
        self.unmeasured
            .iter()
            .position(|r| r.segment == segment)
            .map(|j| self.n_segments + j)
    }
}

/// Builds the state layout for a network. Fails when the network does not pass validation.
pub fn build_state_index(cfg: &NetworkConfig) -> Result<StateIndex> {
    let report = validate_network(cfg);
    if !report.ok {
        return Err(Error::InvalidNetwork(report.to_string()));
    }
    let slot = |(segment, kind)| RampSlot { segment, kind };
    Ok(StateIndex {
        n_segments: cfg.n_segments(),
        unmeasured: cfg.unmeasured_ramps().into_iter().map(slot).collect(),
        measured: cfg.measured_ramps().into_iter().map(slot).collect(),
    })
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, got })
    }
}

/// Transition matrix for one step given the segment speeds (km/h, 0-based).
pub fn build_a(idx: &StateIndex, cfg: &NetworkConfig, speeds_kmh: &[f64]) -> Result<DMatrix<f64>> {
    let n = idx.n_segments;
    check_len("segment speeds", n, speeds_kmh.len())?;
    check_len("network segments", n, cfg.n_segments())?;
    let n1 = idx.total_dim();
    let mut a = DMatrix::zeros(n1, n1);
    for i in 0..n {
        let c = cfg.time_step_h / cfg.segments[i].length_km;
        a[(i, i)] = 1.0 - c * speeds_kmh[i];
        if i > 0 {
            a[(i, i - 1)] = c * speeds_kmh[i - 1];
        }
    }
    for (j, ramp) in idx.unmeasured.iter().enumerate() {
        a[(ramp.segment - 1, n + j)] = ramp.kind.sign();
        a[(n + j, n + j)] = 1.0;
    }
    Ok(a)
}

/// Input matrix: column 0 injects q0 into segment 1, column j+1 injects the
/// j-th measured ramp into its segment.
pub fn build_b(idx: &StateIndex, cfg: &NetworkConfig) -> Result<DMatrix<f64>> {
    check_len("network segments", idx.n_segments, cfg.n_segments())?;
    let mut b = DMatrix::zeros(idx.total_dim(), idx.input_dim());
    b[(0, 0)] = cfg.t_over_dx(1);
    for (j, ramp) in idx.measured.iter().enumerate() {
        b[(ramp.segment - 1, j + 1)] = cfg.t_over_dx(ramp.segment);
    }
    Ok(b)
}

/// Input vector. `measured_ramp_flows` maps segment to the (nonnegative)
/// ramp flow in veh/h; off-ramp flows enter with a negative sign.
pub fn build_u(idx: &StateIndex, q0_vph: f64, measured_ramp_flows: &BTreeMap<usize, f64>) -> Result<DVector<f64>> {
    let mut u = DVector::zeros(idx.input_dim());
    u[0] = q0_vph;
    for (j, ramp) in idx.measured.iter().enumerate() {
        let flow = measured_ramp_flows
            .get(&ramp.segment)
            .ok_or(Error::MissingRampFlow(ramp.segment))?;
        u[j + 1] = ramp.kind.sign() * flow;
    }
    Ok(u)
}

/// How the mid-stretch measurement row is chosen for each pair of
/// consecutive unmeasured ramps.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum SensorChoice {
    /// The configured sensor closest to (at or upstream of) the segment
    /// immediately before the downstream ramp.
    #[default]
    NearestUpstream,
    /// One segment per consecutive pair, in order.
    Explicit(Vec<usize>),
}

/// Which density each measurement row observes.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    /// 1-based measured segment per row; the last row is always segment N.
    pub segments: Vec<usize>,
    pub c: DMatrix<f64>,
}

/// Selection matrix with a single 1 per row at the given 1-based columns.
pub fn selection_matrix(n_cols: usize, columns: &[usize]) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(columns.len(), n_cols);
    for (row, &col) in columns.iter().enumerate() {
        c[(row, col - 1)] = 1.0;
    }
    c
}

/// Output matrix: one row per consecutive unmeasured-ramp pair selecting a
/// sensor segment j with n_i ≤ j ≤ n_{i+1}-1, then the exit row. With no
/// unmeasured ramps only the exit row remains.
pub fn build_c(idx: &StateIndex, cfg: &NetworkConfig, choice: &SensorChoice) -> Result<MeasurementModel> {
    let ramps = idx.unmeasured_segments();
    let pairs: Vec<(usize, usize)> = ramps.windows(2).map(|w| (w[0], w[1])).collect();
    let mut segments = Vec::with_capacity(pairs.len() + 1);
    match choice {
        SensorChoice::NearestUpstream => {
            for &(lo, next) in &pairs {
                let j = cfg
                    .flow_sensor_segments
                    .range(lo..next)
                    .next_back()
                    .copied()
                    .ok_or(Error::MissingIntervalSensor {
                        upstream: lo,
                        downstream: next,
                    })?;
                segments.push(j);
            }
        }
        SensorChoice::Explicit(chosen) => {
            check_len("explicit sensor choice", pairs.len(), chosen.len())?;
            for (&(lo, next), &j) in pairs.iter().zip(chosen) {
                if j < lo || j + 1 > next {
                    return Err(Error::SensorOutsideInterval {
                        sensor: j,
                        lo,
                        hi: next - 1,
                    });
                }
                if !cfg.flow_sensor_segments.contains(&j) {
                    return Err(Error::InvalidInput(format!(
                        "segment {j} chosen for C has no configured flow sensor"
                    )));
                }
                segments.push(j);
            }
        }
    }
    segments.push(idx.n_segments);
    let c = selection_matrix(idx.total_dim(), &segments);
    Ok(MeasurementModel { segments, c })
}

/// All matrices of the model at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvSnapshot {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub u: DVector<f64>,
    pub c: DMatrix<f64>,
}

impl LtvSnapshot {
    pub fn build(
        idx: &StateIndex,
        cfg: &NetworkConfig,
        measurement: &MeasurementModel,
        speeds_kmh: &[f64],
        q0_vph: f64,
        measured_ramp_flows: &BTreeMap<usize, f64>,
    ) -> Result<Self> {
        Ok(Self {
            a: build_a(idx, cfg, speeds_kmh)?,
            b: build_b(idx, cfg)?,
            u: build_u(idx, q0_vph, measured_ramp_flows)?,
            c: measurement.c.clone(),
        })
    }
}

/// x(k+1) = A·x + B·u.
pub fn step_dynamics(x: &DVector<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("A rows vs state", a.nrows(), x.len())?;
    check_len("A columns vs state", a.ncols(), x.len())?;
    check_len("B rows vs state", b.nrows(), x.len())?;
    check_len("B columns vs input", b.ncols(), u.len())?;
    Ok(a * x + b * u)
}

/// q = ρ·v (veh/h).
pub fn density_to_flow(density_vpkm: f64, speed_kmh: f64) -> f64 {
    density_vpkm * speed_kmh
}

/// Ramp flow (veh/h) encoded by a θ state at the given segment.
pub fn theta_to_flow(cfg: &NetworkConfig, segment: usize, theta: f64) -> f64 {
    theta * cfg.segment(segment).length_km / cfg.time_step_h
}

pub fn flow_to_theta(cfg: &NetworkConfig, segment: usize, flow_vph: f64) -> f64 {
    flow_vph * cfg.time_step_h / cfg.segment(segment).length_km
}
