//! End-to-end runs: load a data source, derive filter inputs, estimate,
//! score, and write outputs. The CLI is a thin layer over this module.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{run_filter, DiagonalTuning, EstimateStep, FilterTuning, RunDiagnostics, RunOptions};
use crate::ltv_model::{build_c, build_state_index, SensorChoice};
use crate::metrics::{best_lag, cv_rho, ramp_flow_rmse, speed_error_covariance, RunMetrics, DEFAULT_WARMUP_STEPS};
use crate::network::{check_cfl, NetworkConfig, RampKind};
use crate::sensing::{
    apply_noise, assign_connected, attach_ramp_series, emulate_probe_speeds, frames_from_detectors,
    frames_from_trajectories, ground_truth_from_trajectories, read_detector_csv, read_ramp_csv, smooth_frames,
    write_detector_csv, write_ramp_csv, RampSample,
    DetectorOptions, MeasurementFrame, NoiseSettings, ProbeDispersion, TrajectoryOptions, Trajectories,
    TruthRecord,
};
use crate::simulate::{
    detector_samples_from_simulation, frames_from_simulation, make_congestion_scenario, simulate_truth, Scenario,
    SimulationOutput,
};

/// Window of the smoothed sweep variant unless the run config asks for more.
pub const DEFAULT_SWEEP_WINDOW: usize = 3;

/// Largest lag considered by the ramp-flow lag diagnostic.
pub const MAX_DIAGNOSTIC_LAG: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Preset { name: String },
    Scenario { path: PathBuf },
    Trajectories { path: PathBuf },
    Detectors {
        path: PathBuf,
        #[serde(default)]
        ramp_flows: Option<PathBuf>,
    },
}

/// Fully resolved settings of one estimation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Required for trajectory and detector sources.
    pub network: Option<PathBuf>,
    pub source: DataSource,
    pub penetration: f64,
    pub seed: u64,
    /// Speed smoothing window in steps; 1 feeds the latest report.
    pub window: usize,
    /// Filled from the scenario (or the defaults) when absent.
    pub tuning: Option<DiagonalTuning>,
    pub noise: NoiseSettings,
    pub strict_cfl: bool,
    pub clamp_output: bool,
    pub warmup_steps: usize,
    /// Filled from the scenario (or 100 km/h) when absent.
    pub fallback_speed_kmh: Option<f64>,
    pub probe_dispersion: ProbeDispersion,
    pub trajectory: TrajectoryOptions,
}

impl RunConfig {
    pub fn preset(name: &str) -> Self {
        Self {
            network: None,
            source: DataSource::Preset { name: name.into() },
            penetration: 1.0,
            seed: 0,
            window: 1,
            tuning: None,
            noise: NoiseSettings::default(),
            strict_cfl: false,
            clamp_output: false,
            warmup_steps: DEFAULT_WARMUP_STEPS,
            fallback_speed_kmh: None,
            probe_dispersion: ProbeDispersion::default(),
            trajectory: TrajectoryOptions::default(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.penetration) {
            return Err(Error::InvalidInput(format!("penetration {} outside [0, 1]", self.penetration)));
        }
        if self.window == 0 {
            return Err(Error::InvalidInput("smoothing window must be at least 1".into()));
        }
        if self.noise.flow_std < 0.0 || self.noise.speed_std < 0.0 {
            return Err(Error::InvalidInput("noise standard deviations must be nonnegative".into()));
        }
        let needs_network = matches!(self.source, DataSource::Trajectories { .. } | DataSource::Detectors { .. });
        if needs_network && self.network.is_none() {
            return Err(Error::InvalidInput("trajectory and detector sources need a network file".into()));
        }
        Ok(())
    }
}

/// Data loaded once and reused across repetitions.
#[derive(Debug, Clone)]
pub struct PreparedSource {
    pub network: NetworkConfig,
    pub truth: Vec<TruthRecord>,
    /// Exact filter inputs (all vehicles connected, no noise).
    pub frames: Vec<MeasurementFrame>,
    pub scenario: Option<Scenario>,
    trajectories: Option<(Trajectories, f64)>,
    pub ingest_events: Vec<String>,
}

fn load_network(cfg: &RunConfig) -> Result<NetworkConfig> {
    let path = cfg.network.as_ref().expect("checked by RunConfig::check");
    NetworkConfig::from_json_file(path)?.validated()
}

pub fn prepare_source(cfg: &RunConfig) -> Result<PreparedSource> {
    cfg.check()?;
    let from_scenario = |sc: Scenario| -> Result<PreparedSource> {
        if !sc.cfl_report().is_satisfied() {
            warn!("scenario `{}` violates the CFL condition", sc.name);
        }
        let sim = simulate_truth(&sc, cfg.strict_cfl)?;
        let network = sc.network.clone().validated()?;
        Ok(PreparedSource {
            frames: frames_from_simulation(&network, &sim),
            truth: sim.truth,
            network,
            scenario: Some(sc),
            trajectories: None,
            ingest_events: vec![],
        })
    };
    match &cfg.source {
        DataSource::Preset { name } => from_scenario(make_congestion_scenario(name, cfg.seed)?),
        DataSource::Scenario { path } => from_scenario(Scenario::from_json_file(path)?),
        DataSource::Trajectories { path } => {
            let network = load_network(cfg)?;
            let traj = Trajectories::read_csv(path)?;
            let (t0, t1) = traj
                .time_span()
                .ok_or_else(|| Error::InvalidInput(format!("{}: no trajectory records", path.display())))?;
            let step_s = network.time_step_h * 3600.0;
            let n_steps = ((t1 - t0) / step_s).floor() as usize;
            let opts = &cfg.trajectory;
            let truth = ground_truth_from_trajectories(&traj, &network, opts, t0, n_steps);
            let frames = frames_from_trajectories(&traj, &network, opts, None, t0, n_steps);
            Ok(PreparedSource {
                network,
                truth,
                frames,
                scenario: None,
                trajectories: Some((traj, t0)),
                ingest_events: vec![],
            })
        }
        DataSource::Detectors { path, ramp_flows } => {
            let network = load_network(cfg)?;
            let samples = read_detector_csv(path)?;
            let (mut frames, mut truth, log) = frames_from_detectors(&samples, &network, &DetectorOptions::default())?;
            if let Some(ramp_path) = ramp_flows {
                let t0 = samples.iter().map(|s| s.t_s).fold(f64::INFINITY, f64::min);
                attach_ramp_series(&read_ramp_csv(ramp_path)?, &network, t0, &mut frames, &mut truth)?;
            }
            if cfg.penetration < 1.0 {
                warn!("detector speeds are used as reported; penetration is ignored");
            }
            Ok(PreparedSource {
                network,
                truth,
                frames,
                scenario: None,
                trajectories: None,
                ingest_events: log.events,
            })
        }
    }
}

impl PreparedSource {
    /// Filter inputs for one repetition: connected-vehicle sampling at the
    /// configured penetration, noise, then speed smoothing.
    pub fn realize_frames(&self, cfg: &RunConfig, seed: u64) -> Vec<MeasurementFrame> {
        let mut frames = match (&self.trajectories, cfg.penetration < 1.0) {
            (Some((traj, t0)), true) => {
                let connected = assign_connected(&traj.vehicle_ids(), cfg.penetration, seed);
                frames_from_trajectories(traj, &self.network, &cfg.trajectory, Some(&connected), *t0, self.frames.len())
            }
            (None, true) if self.scenario.is_some() => {
                let densities: Vec<Vec<f64>> = self.truth.iter().map(|t| t.densities.clone()).collect();
                let speeds = self.true_speeds();
                let reports =
                    emulate_probe_speeds(&self.network, &densities, &speeds, cfg.penetration, cfg.probe_dispersion, seed);
                let mut frames = self.frames.clone();
                for (f, r) in frames.iter_mut().zip(reports) {
                    f.segment_speeds = r;
                }
                frames
            }
            _ => self.frames.clone(),
        };
        apply_noise(&mut frames, &cfg.noise, seed);
        smooth_frames(&mut frames, cfg.window);
        frames
    }

    /// True segment speeds; unknown cells are 0.
    pub fn true_speeds(&self) -> Vec<Vec<f64>> {
        self.truth
            .iter()
            .map(|t| t.speeds.iter().map(|v| v.unwrap_or(0.0)).collect())
            .collect()
    }

    pub fn resolved_tuning(&self, cfg: &RunConfig) -> DiagonalTuning {
        cfg.tuning
            .or_else(|| self.scenario.as_ref().and_then(|s| s.tuning))
            .unwrap_or_default()
    }

    pub fn resolved_fallback_speed(&self, cfg: &RunConfig) -> f64 {
        cfg.fallback_speed_kmh
            .or_else(|| self.scenario.as_ref().and_then(|s| s.fallback_speed_kmh))
            .unwrap_or(RunOptions::default().fallback_speed_kmh)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub estimates: Vec<EstimateStep>,
    pub metrics: RunMetrics,
    pub diagnostics: RunDiagnostics,
    pub frames: Vec<MeasurementFrame>,
}

/// Runs the filter for one repetition and scores it against the truth.
pub fn run_once(src: &PreparedSource, cfg: &RunConfig, seed: u64) -> Result<RunResult> {
    let frames = src.realize_frames(cfg, seed);
    let network = &src.network;
    let idx = build_state_index(network)?;
    let measurement = build_c(&idx, network, &SensorChoice::default())?;
    let tuning = FilterTuning::diagonal(&idx, &src.resolved_tuning(cfg))?;
    let opts = RunOptions {
        fallback_speed_kmh: src.resolved_fallback_speed(cfg),
        clamp_output: cfg.clamp_output,
        ..RunOptions::default()
    };
    if cfg.strict_cfl {
        let used: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| f.segment_speeds.iter().map(|v| v.unwrap_or(0.0)).collect())
            .collect();
        check_cfl(network, &used).enforce()?;
    }
    let (estimates, diagnostics) = run_filter(network, &idx, &measurement, &tuning, &frames, &opts)?;
    let metrics = score(network, &src.truth, &estimates, cfg.warmup_steps)?;
    Ok(RunResult {
        estimates,
        metrics,
        diagnostics,
        frames,
    })
}

/// Metrics over the horizon after `warmup` steps, plus the full-horizon CV.
pub fn score(network: &NetworkConfig, truth: &[TruthRecord], est: &[EstimateStep], warmup: usize) -> Result<RunMetrics> {
    let true_rho: Vec<Vec<f64>> = truth.iter().map(|t| t.densities.clone()).collect();
    let est_rho: Vec<Vec<f64>> = est.iter().map(|e| e.densities.clone()).collect();
    let v_used: Vec<Vec<f64>> = est.iter().map(|e| e.speeds_used.clone()).collect();
    // unknown true speeds contribute no speed error
    let v_true: Vec<Vec<f64>> = truth
        .iter()
        .zip(&v_used)
        .map(|(t, used)| t.speeds.iter().zip(used).map(|(v, u)| v.unwrap_or(*u)).collect())
        .collect();
    let from = warmup.min(truth.len().saturating_sub(1));
    let cv = cv_rho(&est_rho[from..], &true_rho[from..])?;
    let cv_full = cv_rho(&est_rho, &true_rho)?;
    let w = speed_error_covariance(network, &true_rho[from..], &v_used[from..], &v_true[from..])?;

    let unmeasured: Vec<usize> = network.unmeasured_ramps().into_iter().map(|(s, _)| s).collect();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = unmeasured
        .iter()
        .filter(|s| truth.iter().all(|t| t.ramp_flows.contains_key(s)))
        .map(|s| {
            let e: Vec<f64> = est[from..].iter().map(|x| x.ramp_flows[s]).collect();
            let t: Vec<f64> = truth[from..].iter().map(|x| x.ramp_flows[s]).collect();
            (e, t)
        })
        .collect();
    let (ramp_rmse, lag) = if pairs.is_empty() {
        (None, None)
    } else {
        let est_all: Vec<f64> = pairs.iter().flat_map(|p| p.0.iter().copied()).collect();
        let truth_all: Vec<f64> = pairs.iter().flat_map(|p| p.1.iter().copied()).collect();
        let rmse = ramp_flow_rmse(&est_all, &truth_all)?;
        // pooled lag diagnostic: shift each ramp series separately
        let mut best = (0usize, f64::INFINITY);
        let len = pairs[0].0.len();
        for l in 0..=MAX_DIAGNOSTIC_LAG.min(len.saturating_sub(1)) {
            let e: Vec<f64> = pairs.iter().flat_map(|p| p.0[l..].iter().copied()).collect();
            let t: Vec<f64> = pairs.iter().flat_map(|p| p.1[..len - l].iter().copied()).collect();
            let r = ramp_flow_rmse(&e, &t)?;
            if r < best.1 {
                best = (l, r);
            }
        }
        if pairs.len() == 1 {
            debug_assert_eq!(best.0, best_lag(&pairs[0].0, &pairs[0].1, MAX_DIAGNOSTIC_LAG)?.0);
        }
        (Some(rmse), Some(best.0))
    };

    Ok(RunMetrics {
        cv_rho: cv,
        cv_rho_full: cv_full,
        speed_error_covariance_w: w,
        ramp_flow_rmse: ramp_rmse,
        ramp_flow_best_lag: lag,
        warmup_steps: from,
        horizon_steps: truth.len() - from,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub metrics: RunMetrics,
    pub config: RunConfig,
    pub network: NetworkConfig,
    pub resolved_tuning: DiagonalTuning,
    pub fallback_speed_kmh: f64,
    pub diagnostics: RunDiagnostics,
    pub cfl_max_ratio: f64,
    pub ingest_events: usize,
}

pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const RAMPS_FILE: &str = "ramps.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn estimates_csv(src: &PreparedSource, result: &RunResult) -> String {
    let mut out = String::from("k,segment,rho_true,rho_est,v_used,v_true,q_sensor\n");
    for ((est, truth), frame) in result.estimates.iter().zip(&src.truth).zip(&result.frames) {
        for i in 0..src.network.n_segments() {
            let seg = i + 1;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                est.k,
                seg,
                truth.densities[i],
                est.densities[i],
                est.speeds_used[i],
                opt(truth.speeds[i]),
                opt(frame.sensor_flows.get(&seg).copied()),
            )
            .expect("string write");
        }
    }
    out
}

pub fn ramps_csv(src: &PreparedSource, result: &RunResult) -> String {
    let mut out = String::from("k,segment,kind,flow_true,flow_est\n");
    for (est, truth) in result.estimates.iter().zip(&src.truth) {
        for (&seg, &q) in &est.ramp_flows {
            let kind = src.network.segment(seg).ramp;
            writeln!(out, "{},{},{},{},{}", est.k, seg, kind.as_str(), opt(truth.ramp_flows.get(&seg).copied()), q)
                .expect("string write");
        }
    }
    out
}

/// Runs a single estimation and writes `estimates.csv`, `ramps.csv` and
/// `summary.json` into `out_dir`.
pub fn estimate(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    let src = prepare_source(cfg)?;
    let result = run_once(&src, cfg, cfg.seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summary = RunSummary {
        metrics: result.metrics,
        config: cfg.clone(),
        network: src.network.clone(),
        resolved_tuning: src.resolved_tuning(cfg),
        fallback_speed_kmh: src.resolved_fallback_speed(cfg),
        diagnostics: result.diagnostics.clone(),
        cfl_max_ratio: check_cfl(&src.network, &src.true_speeds()).max_ratio,
        ingest_events: src.ingest_events.len(),
    };
    write_file(&out_dir.join(ESTIMATES_FILE), &estimates_csv(&src, &result))?;
    write_file(&out_dir.join(RAMPS_FILE), &ramps_csv(&src, &result))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out_dir.join(SUMMARY_FILE), &json)?;
    info!("cv_rho = {:.4} over {} steps", summary.metrics.cv_rho, summary.metrics.horizon_steps);
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedVariant {
    Instantaneous,
    MovingAverage,
}

impl SpeedVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            SpeedVariant::Instantaneous => "instantaneous",
            SpeedVariant::MovingAverage => "moving_average",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub variant: SpeedVariant,
    pub mean_cv_rho: f64,
    pub std_cv_rho: f64,
    pub mean_w: f64,
}

/// Seed of repetition `rep`; repetition 0 uses the root seed itself.
pub fn repetition_seed(root: u64, rep: usize) -> u64 {
    root.wrapping_add(rep as u64)
}

/// Penetration sweep: for each p and each speed variant (latest report, and
/// the moving average over `cfg.window` steps, or `DEFAULT_SWEEP_WINDOW`
/// when that is 1), `reps` seeded repetitions.
/// Repetitions run in parallel; aggregation order is fixed.
pub fn sweep(cfg: &RunConfig, p_values: &[f64], reps: usize) -> Result<Vec<SweepRow>> {
    if reps == 0 {
        return Err(Error::InvalidInput("repetitions must be at least 1".into()));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("penetration {p} outside [0, 1]")));
    }
    let src = prepare_source(cfg)?;
    let variants = [(SpeedVariant::Instantaneous, 1), (SpeedVariant::MovingAverage, if cfg.window > 1 { cfg.window } else { DEFAULT_SWEEP_WINDOW })];
    let jobs: Vec<(usize, usize, usize)> = (0..p_values.len())
        .flat_map(|pi| (0..variants.len()).flat_map(move |vi| (0..reps).map(move |r| (pi, vi, r))))
        .collect();
    let results: Vec<Result<RunMetrics>> = jobs
        .par_iter()
        .map(|&(pi, vi, r)| {
            let run_cfg = RunConfig {
                penetration: p_values[pi],
                window: variants[vi].1,
                ..cfg.clone()
            };
            run_once(&src, &run_cfg, repetition_seed(cfg.seed, r)).map(|res| res.metrics)
        })
        .collect();
    let mut grouped: BTreeMap<(usize, usize), Vec<RunMetrics>> = BTreeMap::new();
    for (&(pi, vi, _), res) in jobs.iter().zip(results) {
        grouped.entry((pi, vi)).or_default().push(res?);
    }
    Ok(grouped
        .into_iter()
        .map(|((pi, vi), runs)| {
            let cvs: Vec<f64> = runs.iter().map(|m| m.cv_rho).collect();
            let n = cvs.len() as f64;
            let mean = cvs.iter().sum::<f64>() / n;
            let std = if cvs.len() > 1 {
                (cvs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SweepRow {
                p: p_values[pi],
                variant: variants[vi].0,
                mean_cv_rho: mean,
                std_cv_rho: std,
                mean_w: runs.iter().map(|m| m.speed_error_covariance_w).sum::<f64>() / n,
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("p,variant,mean_cv_rho,std_cv_rho,mean_w\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.p, r.variant.as_str(), r.mean_cv_rho, r.std_cv_rho, r.mean_w).expect("string write");
    }
    out
}

pub fn write_sweep(rows: &[SweepRow], out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("sweep.csv");
    write_file(&path, &sweep_csv(rows))?;
    Ok(path)
}

#[derive(Debug, Deserialize)]
struct EstimateRow {
    k: usize,
    segment: usize,
    rho_true: f64,
    rho_est: f64,
    v_used: f64,
    v_true: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct RampRow {
    k: usize,
    segment: usize,
    flow_true: Option<f64>,
    flow_est: f64,
}

/// Recomputes the metrics of a finished run from its output directory.
pub fn recompute_metrics(run_dir: &Path, warmup: Option<usize>) -> Result<RunMetrics> {
    let summary_path = run_dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| Error::parse(&summary_path, e))?;
    let network = summary.network;
    let n = network.n_segments();

    let est_path = run_dir.join(ESTIMATES_FILE);
    let mut reader = csv::Reader::from_path(&est_path).map_err(|e| Error::parse(&est_path, e))?;
    let mut truth: Vec<TruthRecord> = Vec::new();
    let mut est: Vec<EstimateStep> = Vec::new();
    for (line, row) in reader.deserialize::<EstimateRow>().enumerate() {
        let row = row.map_err(|e| Error::parse(&est_path, format!("line {}: {e}", line + 2)))?;
        if row.segment == 0 || row.segment > n {
            return Err(Error::parse(&est_path, format!("line {}: segment {} out of range", line + 2, row.segment)));
        }
        if row.segment == 1 {
            truth.push(TruthRecord {
                k: row.k,
                densities: vec![0.0; n],
                ramp_flows: BTreeMap::new(),
                speeds: vec![None; n],
            });
            est.push(EstimateStep {
                k: row.k,
                densities: vec![0.0; n],
                ramp_flows: BTreeMap::new(),
                speeds_used: vec![0.0; n],
                z: vec![],
            });
        }
        let (t, e) = match (truth.last_mut(), est.last_mut()) {
            (Some(t), Some(e)) if t.k == row.k => (t, e),
            _ => return Err(Error::parse(&est_path, format!("line {}: rows out of order", line + 2))),
        };
        let i = row.segment - 1;
        t.densities[i] = row.rho_true;
        t.speeds[i] = row.v_true;
        e.densities[i] = row.rho_est;
        e.speeds_used[i] = row.v_used;
    }

    let ramp_path = run_dir.join(RAMPS_FILE);
    let mut reader = csv::Reader::from_path(&ramp_path).map_err(|e| Error::parse(&ramp_path, e))?;
    let by_k: BTreeMap<usize, usize> = est.iter().enumerate().map(|(pos, e)| (e.k, pos)).collect();
    for (line, row) in reader.deserialize::<RampRow>().enumerate() {
        let row = row.map_err(|e| Error::parse(&ramp_path, format!("line {}: {e}", line + 2)))?;
        let pos = *by_k
            .get(&row.k)
            .ok_or_else(|| Error::parse(&ramp_path, format!("line {}: unknown step {}", line + 2, row.k)))?;
        est[pos].ramp_flows.insert(row.segment, row.flow_est);
        if let Some(q) = row.flow_true {
            truth[pos].ramp_flows.insert(row.segment, q);
        }
    }
    score(&network, &truth, &est, warmup.unwrap_or(summary.metrics.warmup_steps))
}

/// Ramp kinds present in the network, for reporting.
pub fn describe_network(network: &NetworkConfig) -> String {
    let ramps: Vec<String> = network
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.ramp != RampKind::None)
        .map(|(i, s)| format!("{}:{}{}", i + 1, s.ramp.as_str(), if s.ramp_measured { "(measured)" } else { "" }))
        .collect();
    format!(
        "{} segments, {:.3} km, T = {:.1} s, ramps [{}], flow sensors {:?}",
        network.n_segments(),
        network.total_length_km(),
        network.time_step_h * 3600.0,
        ramps.join(", "),
        network.flow_sensor_segments
    )
}

pub const TRUTH_FILE: &str = "truth.csv";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const DETECTORS_FILE: &str = "detectors.csv";
pub const RAMP_FLOWS_FILE: &str = "ramp_flows.csv";

pub fn truth_csv(sim: &SimulationOutput) -> String {
    let mut out = String::from("k,segment,rho,v_kmh,q_vph\n");
    for (k, rec) in sim.truth.iter().enumerate() {
        for (i, rho) in rec.densities.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", k, i + 1, rho, sim.speeds_kmh[k][i], sim.segment_flows_vph[k][i])
                .expect("string write");
        }
    }
    out
}

/// Simulates a scenario and writes the truth, the scenario itself, boundary
/// detector readings and ramp flow series into `out_dir`. The detector and
/// ramp files can be fed back through the detector data source.
pub fn simulate_to_dir(sc: &Scenario, strict_cfl: bool, out_dir: &Path) -> Result<SimulationOutput> {
    let sim = simulate_truth(sc, strict_cfl)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join(TRUTH_FILE), &truth_csv(&sim))?;
    sc.write_json(out_dir.join(SCENARIO_FILE))?;
    let network_path = out_dir.join("network.json");
    write_file(&network_path, &sc.network.to_json_pretty())?;
    write_detector_csv(out_dir.join(DETECTORS_FILE), &detector_samples_from_simulation(&sc.network, &sim))?;
    let step_s = sc.network.time_step_h * 3600.0;
    let ramps: Vec<RampSample> = sim
        .truth
        .iter()
        .enumerate()
        .flat_map(|(k, rec)| {
            rec.ramp_flows.iter().map(move |(&segment, &flow_vph)| RampSample {
                segment,
                t_s: k as f64 * step_s,
                flow_vph,
            })
        })
        .collect();
    write_ramp_csv(out_dir.join(RAMP_FLOWS_FILE), &ramps)?;
    Ok(sim)
}
