//! Synthetic ground truth from the conservation dynamics with exogenous
//! speed tables, and the two built-in congestion presets.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::DiagonalTuning;
use crate::network::{check_cfl, CflReport, NetworkConfig, RampKind, Segment};
use crate::sensing::{seeded_rng, streams, DetectorSample, MeasurementFrame, TruthRecord};

/// Everything needed to reproduce a synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub network: NetworkConfig,
    pub horizon_steps: usize,
    /// `speeds_kmh[k][i]`, km/h.
    pub speeds_kmh: Vec<Vec<f64>>,
    /// Entry flow per step, veh/h.
    pub inflow_vph: Vec<f64>,
    /// Ramp demand per segment (1-based) per step, veh/h. Off-ramp demand is
    /// capped by the vehicles available in the segment.
    pub ramp_demand_vph: BTreeMap<usize, Vec<f64>>,
    pub initial_densities: Vec<f64>,
    /// Speed assumed for segments that have never reported, km/h.
    #[serde(default)]
    pub fallback_speed_kmh: Option<f64>,
    /// Filter tuning suited to this scenario.
    #[serde(default)]
    pub tuning: Option<DiagonalTuning>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let n = self.network.n_segments();
        let k = self.horizon_steps;
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.speeds_kmh.len() != k || self.speeds_kmh.iter().any(|r| r.len() != n) {
            return bad(format!("speed table must be {k}x{n}"));
        }
        if self.inflow_vph.len() != k {
            return bad(format!("inflow series must have {k} steps"));
        }
        if self.initial_densities.len() != n || self.initial_densities.iter().any(|&d| !(d >= 0.0)) {
            return bad(format!("initial densities must be {n} nonnegative values"));
        }
        for (&seg, q) in &self.ramp_demand_vph {
            if seg == 0 || seg > n || self.network.segment(seg).ramp == RampKind::None {
                return bad(format!("ramp demand given for segment {seg} which has no ramp"));
            }
            if q.len() != k {
                return bad(format!("ramp demand at segment {seg} must have {k} steps"));
            }
        }
        for (i, s) in self.network.segments.iter().enumerate() {
            if s.ramp != RampKind::None && !self.ramp_demand_vph.contains_key(&(i + 1)) {
                return bad(format!("missing ramp demand for segment {}", i + 1));
            }
        }
        let negative = self.inflow_vph.iter().chain(self.ramp_demand_vph.values().flatten()).any(|&q| !(q >= 0.0));
        if negative || self.speeds_kmh.iter().flatten().any(|&v| !(v >= 0.0)) {
            return bad("demands and speeds must be nonnegative".into());
        }
        Ok(())
    }

    pub fn cfl_report(&self) -> CflReport {
        check_cfl(&self.network, &self.speeds_kmh)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_pretty()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    /// Densities at k = 0..K-1 with the ramp flows realized during (k, k+1].
    pub truth: Vec<TruthRecord>,
    /// Densities after the last step.
    pub final_densities: Vec<f64>,
    pub q0_vph: Vec<f64>,
    pub q_exit_vph: Vec<f64>,
    /// Segment exit flows q_i(k) = ρ_i(k)·v_i(k).
    pub segment_flows_vph: Vec<Vec<f64>>,
    pub speeds_kmh: Vec<Vec<f64>>,
}

impl SimulationOutput {
    pub fn densities(&self) -> Vec<Vec<f64>> {
        self.truth.iter().map(|t| t.densities.clone()).collect()
    }

    /// Densities at k = 0..=K.
    pub fn density_path(&self) -> Vec<Vec<f64>> {
        let mut out = self.densities();
        out.push(self.final_densities.clone());
        out
    }
}

/// Iterates ρ_i(k+1) = ρ_i + T/Δ_i (q_{i-1} − q_i + r_i − s_i) with
/// q_i = ρ_i·v_i. In strict mode any CFL violation is an error.
pub fn simulate_truth(sc: &Scenario, strict_cfl: bool) -> Result<SimulationOutput> {
    sc.validate()?;
    if strict_cfl {
        sc.cfl_report().enforce()?;
    }
    let cfg = &sc.network;
    let n = cfg.n_segments();
    let t = cfg.time_step_h;
    let mut rho = sc.initial_densities.clone();
    let mut out = SimulationOutput {
        truth: Vec::with_capacity(sc.horizon_steps),
        final_densities: vec![],
        q0_vph: Vec::with_capacity(sc.horizon_steps),
        q_exit_vph: Vec::with_capacity(sc.horizon_steps),
        segment_flows_vph: Vec::with_capacity(sc.horizon_steps),
        speeds_kmh: sc.speeds_kmh.clone(),
    };
    for k in 0..sc.horizon_steps {
        let v = &sc.speeds_kmh[k];
        let q: Vec<f64> = rho.iter().zip(v).map(|(r, v)| r * v).collect();
        let q0 = sc.inflow_vph[k];
        let mut ramp_flows = BTreeMap::new();
        let mut next = vec![0.0; n];
        for i in 0..n {
            let seg = &cfg.segments[i];
            let upstream = if i == 0 { q0 } else { q[i - 1] };
            let mut net = upstream - q[i];
            match seg.ramp {
                RampKind::None => {}
                RampKind::OnRamp => {
                    let r = sc.ramp_demand_vph[&(i + 1)][k];
                    net += r;
                    ramp_flows.insert(i + 1, r);
                }
                RampKind::OffRamp => {
                    let available = (rho[i] * seg.length_km / t + net).max(0.0);
                    let s = sc.ramp_demand_vph[&(i + 1)][k].min(available);
                    net -= s;
                    ramp_flows.insert(i + 1, s);
                }
            }
            next[i] = (rho[i] + t / seg.length_km * net).max(0.0);
        }
        out.q0_vph.push(q0);
        out.q_exit_vph.push(q[n - 1]);
        out.segment_flows_vph.push(q);
        out.truth.push(TruthRecord {
            k,
            densities: std::mem::replace(&mut rho, next),
            ramp_flows,
            speeds: v.iter().map(|&v| Some(v)).collect(),
        });
    }
    out.final_densities = rho;
    Ok(out)
}

/// Largest relative violation of Σ Δ_i ρ_i(k+1) − Σ Δ_i ρ_i(k) =
/// T (q0 − q_N + Σ r − Σ s) over all steps, relative to the stored vehicles
/// plus the boundary/ramp exchange of the step.
pub fn conservation_residual(cfg: &NetworkConfig, sim: &SimulationOutput) -> f64 {
    let path = sim.density_path();
    let mass = |rho: &[f64]| rho.iter().zip(&cfg.segments).map(|(r, s)| r * s.length_km).sum::<f64>();
    let t = cfg.time_step_h;
    let mut worst = 0.0_f64;
    for (k, rec) in sim.truth.iter().enumerate() {
        let ramps: f64 = rec
            .ramp_flows
            .iter()
            .map(|(&seg, q)| cfg.segment(seg).ramp.sign() * q)
            .sum();
        let exchange = t * (sim.q0_vph[k] - sim.q_exit_vph[k] + ramps);
        let change = mass(&path[k + 1]) - mass(&path[k]);
        let scale = mass(&path[k]).abs() + mass(&path[k + 1]).abs() + t * (sim.q0_vph[k] + sim.q_exit_vph[k]);
        worst = worst.max((change - exchange).abs() / scale.max(f64::MIN_POSITIVE));
    }
    worst
}

/// Exact filter inputs from a simulation: true speeds, boundary flows,
/// sensor exit flows and measured ramp flows.
pub fn frames_from_simulation(cfg: &NetworkConfig, sim: &SimulationOutput) -> Vec<MeasurementFrame> {
    sim.truth
        .iter()
        .enumerate()
        .map(|(k, rec)| MeasurementFrame {
            k,
            segment_speeds: sim.speeds_kmh[k].iter().map(|&v| Some(v)).collect(),
            q0: sim.q0_vph[k],
            sensor_flows: cfg
                .flow_sensor_segments
                .iter()
                .map(|&s| (s, sim.segment_flows_vph[k][s - 1]))
                .collect(),
            measured_ramp_flows: rec
                .ramp_flows
                .iter()
                .filter(|(&seg, _)| cfg.segment(seg).ramp_measured)
                .map(|(&seg, &q)| (seg, q))
                .collect(),
        })
        .collect()
}

/// Point detectors at every segment boundary, sampled once per step.
/// Detector 0 reports the entry flow and the speed of segment 1; detector i
/// reports the exit flow and speed of segment i.
pub fn detector_samples_from_simulation(cfg: &NetworkConfig, sim: &SimulationOutput) -> Vec<DetectorSample> {
    let step_s = cfg.time_step_h * 3600.0;
    let positions_m: Vec<f64> = cfg.boundaries_km().iter().map(|x| x * 1000.0).collect();
    let mut out = Vec::with_capacity(sim.truth.len() * positions_m.len());
    for k in 0..sim.truth.len() {
        let t_s = k as f64 * step_s;
        for (d, &pos) in positions_m.iter().enumerate() {
            let (flow, speed) = if d == 0 {
                (sim.q0_vph[k], sim.speeds_kmh[k][0])
            } else {
                (sim.segment_flows_vph[k][d - 1], sim.speeds_kmh[k][d - 1])
            };
            out.push(DetectorSample {
                detector_pos_m: pos,
                t_s,
                flow_vph: flow,
                speed_kmh: speed,
            });
        }
    }
    out
}

/// Densities in equilibrium with the given entry flow, ramp flows and speeds.
pub fn equilibrium_densities(cfg: &NetworkConfig, q0: f64, ramp_flows: &BTreeMap<usize, f64>, speeds: &[f64]) -> Vec<f64> {
    let mut q = q0;
    cfg.segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            q += s.ramp.sign() * ramp_flows.get(&(i + 1)).copied().unwrap_or(0.0);
            q.max(0.0) / speeds[i]
        })
        .collect()
}

pub const PRESETS: [&str; 2] = ["ngsim_like", "a20_like"];

pub fn make_congestion_scenario(preset: &str, seed: u64) -> Result<Scenario> {
    match preset {
        "ngsim_like" => Ok(ngsim_like(seed)),
        "a20_like" => Ok(a20_like(seed)),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// Smooth 0→1→0 bump over [start, end] (raised cosine).
fn bump(k: f64, start: f64, end: f64) -> f64 {
    if k <= start || k >= end {
        0.0
    } else {
        0.5 * (1.0 - (2.0 * PI * (k - start) / (end - start)).cos())
    }
}

/// Logistic step from 0 to 1 around `x0` with width `w`.
fn smooth_step(x: f64, x0: f64, w: f64) -> f64 {
    1.0 / (1.0 + (-(x - x0) / w).exp())
}

/// 400 m congested stretch, 8 × 50 m segments, T = 5 s, one unmeasured
/// on-ramp in segment 4, stop-and-go waves entering from downstream.
fn ngsim_like(seed: u64) -> Scenario {
    const N: usize = 8;
    const K: usize = 180;
    const DX: f64 = 0.05;
    const T_S: f64 = 5.0;
    const WAVE_KMH: f64 = -18.0;
    const V_MAX: f64 = 30.0;
    let mut rng = seeded_rng(seed, streams::SCENARIO);

    let mut segments: Vec<Segment> = (0..N).map(|_| Segment::plain(DX)).collect();
    segments[3] = Segment::with_ramp(DX, RampKind::OnRamp, false);
    let network = NetworkConfig::new(T_S / 3600.0, segments, [N]);
    let centers: Vec<f64> = (0..N).map(|i| (i as f64 + 0.5) * DX).collect();
    let length = N as f64 * DX;

    // waves enter at the downstream end and travel upstream
    let mut waves = Vec::new();
    let mut t_h = -rng.random_range(0.0..60.0) / 3600.0;
    while t_h < K as f64 * T_S / 3600.0 {
        let low = rng.random_range(4.0..10.0);
        let half_width = rng.random_range(0.04..0.07);
        waves.push((t_h, low, half_width));
        t_h += rng.random_range(80.0..140.0) / 3600.0;
    }
    let base_phase = rng.random_range(0.0..2.0 * PI);
    let demand_phase = rng.random_range(0.0..2.0 * PI);
    let ramp_phase = rng.random_range(0.0..2.0 * PI);

    let speeds_kmh: Vec<Vec<f64>> = (0..K)
        .map(|k| {
            let t = k as f64 * T_S / 3600.0;
            let base = 24.0 + 3.0 * (2.0 * PI * k as f64 / 150.0 + base_phase).sin();
            centers
                .iter()
                .map(|&x| {
                    let mut v = base;
                    for &(t0, low, w) in &waves {
                        let front = length + WAVE_KMH * (t - t0);
                        let d = (x - front) / w;
                        v -= (base - low) * (-d * d).exp();
                    }
                    v.clamp(0.5, V_MAX)
                })
                .collect()
        })
        .collect();
    let inflow_vph: Vec<f64> = (0..K)
        .map(|k| 4000.0 + 300.0 * (2.0 * PI * k as f64 / 120.0 + demand_phase).sin())
        .collect();
    let ramp: Vec<f64> = (0..K)
        .map(|k| 600.0 + 150.0 * (2.0 * PI * k as f64 / 160.0 + ramp_phase).sin())
        .collect();
    // start from the wave-free equilibrium; a wave already on the stretch
    // builds its queue during the run
    let base0 = vec![24.0 + 3.0 * base_phase.sin(); N];
    let initial_densities = equilibrium_densities(&network, inflow_vph[0], &BTreeMap::from([(4, ramp[0])]), &base0);

    Scenario {
        name: "ngsim_like".into(),
        network,
        horizon_steps: K,
        speeds_kmh,
        inflow_vph,
        ramp_demand_vph: BTreeMap::from([(4, ramp)]),
        initial_densities,
        fallback_speed_kmh: Some(25.0),
        tuning: Some(DiagonalTuning::ngsim()),
    }
}

/// ~12 km stretch, 31 segments of 0.32–0.42 km, T = 10 s, unmeasured
/// on-ramps in 3/17/25 and off-ramps in 14/21. A bottleneck downstream of
/// the on-ramp in 17 activates under peak demand; the queue grows upstream
/// and later dissolves, after which demand returns to its initial level.
fn a20_like(seed: u64) -> Scenario {
    const N: usize = 31;
    const K: usize = 900;
    const T_S: f64 = 10.0;
    const HEAD_SEGMENT: usize = 18;
    const TAIL_KMH: f64 = -12.0;
    const RECOVERY_KMH: f64 = -20.0;
    let mut rng = seeded_rng(seed, streams::SCENARIO);

    let lengths: Vec<f64> = (0..N).map(|_| rng.random_range(0.32..0.42)).collect();
    let mut segments: Vec<Segment> = lengths.iter().map(|&l| Segment::plain(l)).collect();
    for (seg, kind) in [
        (3, RampKind::OnRamp),
        (14, RampKind::OffRamp),
        (17, RampKind::OnRamp),
        (21, RampKind::OffRamp),
        (25, RampKind::OnRamp),
    ] {
        segments[seg - 1] = Segment::with_ramp(lengths[seg - 1], kind, false);
    }
    let network = NetworkConfig::new(T_S / 3600.0, segments, [13, 16, 20, 24, 31]);
    let bounds = network.boundaries_km();
    let centers: Vec<f64> = (0..N).map(|i| 0.5 * (bounds[i] + bounds[i + 1])).collect();
    let head = bounds[HEAD_SEGMENT];
    let max_tail = bounds[4];

    let onset = 200.0 + rng.random_range(-20.0..20.0);
    let release = 520.0 + rng.random_range(-20.0..20.0);
    let v_ff: Vec<f64> = (0..N).map(|_| rng.random_range(95.0..105.0)).collect();
    let v_cong = rng.random_range(30.0..40.0);
    let step_h = T_S / 3600.0;

    let speeds_kmh: Vec<Vec<f64>> = (0..K)
        .map(|k| {
            let kf = k as f64;
            let since_onset = (kf - onset).max(0.0) * step_h;
            let tail = (head + TAIL_KMH * since_onset).max(max_tail);
            let recovery = if kf > release {
                head + RECOVERY_KMH * (kf - release) * step_h
            } else {
                f64::INFINITY
            };
            // congestion spans [tail, min(head, recovery)] while tail < recovery
            let upper = head.min(recovery);
            let active = kf > onset && tail < upper;
            centers
                .iter()
                .zip(&v_ff)
                .map(|(&x, &vf)| {
                    if !active {
                        return vf;
                    }
                    let inside = smooth_step(x, tail, 0.15) * (1.0 - smooth_step(x, upper, 0.15));
                    let ramp_up = ((kf - onset) / 20.0).min(1.0);
                    vf - (vf - v_cong) * inside * ramp_up
                })
                .collect()
        })
        .collect();

    let peak = |k: usize| bump(k as f64, 100.0, 700.0);
    let inflow_vph: Vec<f64> = (0..K).map(|k| 3000.0 + 1200.0 * peak(k)).collect();
    let profile = |base: f64, extra: f64| -> Vec<f64> { (0..K).map(|k| base + extra * peak(k)).collect() };
    let ramp_demand_vph = BTreeMap::from([
        (3, profile(400.0, 300.0)),
        (14, profile(300.0, 200.0)),
        (17, profile(500.0, 500.0)),
        (21, profile(400.0, 200.0)),
        (25, profile(400.0, 200.0)),
    ]);
    let first: BTreeMap<usize, f64> = ramp_demand_vph.iter().map(|(&s, q)| (s, q[0])).collect();
    let initial_densities = equilibrium_densities(&network, inflow_vph[0], &first, &speeds_kmh[0]);

    Scenario {
        name: "a20_like".into(),
        network,
        horizon_steps: K,
        speeds_kmh,
        inflow_vph,
        ramp_demand_vph,
        initial_densities,
        fallback_speed_kmh: Some(100.0),
        tuning: Some(DiagonalTuning::a20()),
    }
}
