//! Highway stretch topology: segments, ramps, flow-sensor placement, and the
//! discretization accuracy check.
//!
//! Units are fixed throughout the crate: km, hours, km/h, veh/km, veh/h.
//! Segment indices are 1-based everywhere a segment is named (configs,
//! reports, CSV output); internal vectors are 0-based.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RampKind {
    #[default]
    None,
    OnRamp,
    OffRamp,
}

impl RampKind {
    /// Sign of the ramp term in the conservation equation.
    pub fn sign(self) -> f64 {
        match self {
            RampKind::None => 0.0,
            RampKind::OnRamp => 1.0,
            RampKind::OffRamp => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RampKind::None => "none",
            RampKind::OnRamp => "on_ramp",
            RampKind::OffRamp => "off_ramp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length_km: f64,
    #[serde(default)]
    pub ramp: RampKind,
    /// Only meaningful when `ramp` is not `None`.
    #[serde(default)]
    pub ramp_measured: bool,
}

impl Segment {
    pub fn plain(length_km: f64) -> Self {
        Self {
            length_km,
            ramp: RampKind::None,
            ramp_measured: false,
        }
    }

    pub fn with_ramp(length_km: f64, ramp: RampKind, measured: bool) -> Self {
        Self {
            length_km,
            ramp,
            ramp_measured: measured,
        }
    }

    pub fn has_unmeasured_ramp(&self) -> bool {
        self.ramp != RampKind::None && !self.ramp_measured
    }

    pub fn has_measured_ramp(&self) -> bool {
        self.ramp != RampKind::None && self.ramp_measured
    }
}

fn default_true() -> bool {
    true
}

/// A single linear highway stretch.
///
/// `flow_sensors` holds the 1-based indices of segments whose exit flow is
/// measured. The entry flow q0 is an input, not a member of this set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub time_step_h: f64,
    pub segments: Vec<Segment>,
    #[serde(rename = "flow_sensors")]
    pub flow_sensor_segments: BTreeSet<usize>,
    #[serde(default = "default_true")]
    pub entry_flow_measured: bool,
}

impl NetworkConfig {
    pub fn new(time_step_h: f64, segments: Vec<Segment>, flow_sensors: impl IntoIterator<Item = usize>) -> Self {
        Self {
            time_step_h,
            segments,
            flow_sensor_segments: flow_sensors.into_iter().collect(),
            entry_flow_measured: true,
        }
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Segment by 1-based index.
    pub fn segment(&self, index: usize) -> &Segment {
        &self.segments[index - 1]
    }

    /// T/Δ_i in h/km for a 1-based segment index.
    pub fn t_over_dx(&self, index: usize) -> f64 {
        self.time_step_h / self.segment(index).length_km
    }

    pub fn total_length_km(&self) -> f64 {
        self.segments.iter().map(|s| s.length_km).sum()
    }

    /// Unmeasured ramps as `(segment, kind)`, ascending by segment.
    pub fn unmeasured_ramps(&self) -> Vec<(usize, RampKind)> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.has_unmeasured_ramp())
            .map(|(i, s)| (i + 1, s.ramp))
            .collect()
    }

    /// Measured ramps as `(segment, kind)`, ascending by segment.
    pub fn measured_ramps(&self) -> Vec<(usize, RampKind)> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.has_measured_ramp())
            .map(|(i, s)| (i + 1, s.ramp))
            .collect()
    }

    /// Upstream boundary of each segment in km, plus the stretch end.
    pub fn boundaries_km(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut acc = 0.0;
        out.push(acc);
        for s in &self.segments {
            acc += s.length_km;
            out.push(acc);
        }
        out
    }

    /// 1-based segment containing position `x_km`, or `None` outside the stretch.
    /// Segments are half-open `[start, end)` except the last, which includes its end.
    pub fn segment_at(&self, x_km: f64) -> Option<usize> {
        if !(x_km >= 0.0) {
            return None;
        }
        let mut start = 0.0;
        let n = self.segments.len();
        for (i, s) in self.segments.iter().enumerate() {
            let end = start + s.length_km;
            if x_km < end || (i + 1 == n && x_km <= end) {
                return Some(i + 1);
            }
            start = end;
        }
        None
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("network config serializes")
    }

    /// Validates and converts the report into an error when anything is violated.
    pub fn validated(self) -> Result<Self> {
        let report = validate_network(&self);
        if report.ok {
            Ok(self)
        } else {
            Err(Error::InvalidNetwork(report.to_string()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    EmptyNetwork,
    NonPositiveTimeStep,
    NonPositiveLength,
    EntryFlowUnmeasured,
    ExitSensorMissing,
    SensorOutOfRange,
    PlacementRule,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::EmptyNetwork => "empty-network",
            Rule::NonPositiveTimeStep => "non-positive-time-step",
            Rule::NonPositiveLength => "non-positive-length",
            Rule::EntryFlowUnmeasured => "entry-flow-unmeasured",
            Rule::ExitSensorMissing => "exit-sensor-missing",
            Rule::SensorOutOfRange => "sensor-out-of-range",
            Rule::PlacementRule => "placement-rule",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub description: String,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            ok: violations.is_empty(),
            violations,
        }
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            return write!(f, "ok");
        }
        for (n, v) in self.violations.iter().enumerate() {
            if n > 0 {
                writeln!(f)?;
            }
            write!(f, "[{}] {}", v.rule.id(), v.description)?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of a network and the sensor placement
/// rule: between each pair of consecutive unmeasured ramps at segments a < b
/// there must be a mainstream sensor at some segment j with a <= j <= b-1.
/// Problems are collected, never raised.
pub fn validate_network(cfg: &NetworkConfig) -> ValidationReport {
    let mut violations = Vec::new();
    let n = cfg.n_segments();

    if n == 0 {
        violations.push(Violation {
            rule: Rule::EmptyNetwork,
            description: "network has no segments".into(),
            indices: vec![],
        });
    }
    if !(cfg.time_step_h > 0.0) || !cfg.time_step_h.is_finite() {
        violations.push(Violation {
            rule: Rule::NonPositiveTimeStep,
            description: format!("time step must be positive, got {} h", cfg.time_step_h),
            indices: vec![],
        });
    }
    let bad_lengths: Vec<usize> = cfg
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| !(s.length_km > 0.0) || !s.length_km.is_finite())
        .map(|(i, _)| i + 1)
        .collect();
    if !bad_lengths.is_empty() {
        violations.push(Violation {
            rule: Rule::NonPositiveLength,
            description: format!("segment lengths must be positive: segments {}", join(&bad_lengths)),
            indices: bad_lengths,
        });
    }
    if !cfg.entry_flow_measured {
        violations.push(Violation {
            rule: Rule::EntryFlowUnmeasured,
            description: "entry flow q0 must be measured".into(),
            indices: vec![],
        });
    }
    let out_of_range: Vec<usize> = cfg
        .flow_sensor_segments
        .iter()
        .copied()
        .filter(|&s| s == 0 || s > n)
        .collect();
    if !out_of_range.is_empty() {
        violations.push(Violation {
            rule: Rule::SensorOutOfRange,
            description: format!("flow sensors outside 1..={n}: {}", join(&out_of_range)),
            indices: out_of_range,
        });
    }
    if n > 0 && !cfg.flow_sensor_segments.contains(&n) {
        violations.push(Violation {
            rule: Rule::ExitSensorMissing,
            description: format!("exit flow sensor at segment {n} is required"),
            indices: vec![n],
        });
    }

    let ramps = cfg.unmeasured_ramps();
    for pair in ramps.windows(2) {
        let (a, b) = (pair[0].0, pair[1].0);
        let covered = cfg.flow_sensor_segments.range(a..b).next().is_some();
        if !covered {
            violations.push(Violation {
                rule: Rule::PlacementRule,
                description: format!("no sensor between consecutive unmeasured ramps {a},{b}"),
                indices: vec![a, b],
            });
        }
    }

    ValidationReport::from_violations(violations)
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CflViolation {
    pub k: usize,
    /// 1-based segment index.
    pub segment: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CflReport {
    pub max_ratio: f64,
    pub violations: Vec<CflViolation>,
}

impl CflReport {
    pub fn is_satisfied(&self) -> bool {
        self.violations.is_empty()
    }

    /// Strict mode: the first violation becomes an error.
    pub fn enforce(&self) -> Result<()> {
        match self.violations.first() {
            None => Ok(()),
            Some(v) => Err(Error::Cfl {
                step: v.k,
                segment: v.segment,
                ratio: v.ratio,
            }),
        }
    }
}

/// Evaluates T·v_i(k)/Δ_i for every step and segment. `speeds[k][i]` is the
/// 0-based segment speed in km/h. A cell is a violation iff T·v ≥ Δ.
pub fn check_cfl(cfg: &NetworkConfig, speeds: &[Vec<f64>]) -> CflReport {
    let t = cfg.time_step_h;
    let mut max_ratio = 0.0_f64;
    let mut violations = Vec::new();
    for (k, row) in speeds.iter().enumerate() {
        for (i, (&v, seg)) in row.iter().zip(&cfg.segments).enumerate() {
            let ratio = t * v / seg.length_km;
            max_ratio = max_ratio.max(ratio);
            if t * v >= seg.length_km {
                violations.push(CflViolation {
                    k,
                    segment: i + 1,
                    ratio,
                });
            }
        }
    }
    CflReport {
        max_ratio,
        violations,
    }
}
