use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, warn};

use probe_density::error::Error;
use probe_density::kalman::DiagonalTuning;
use probe_density::network::{validate_network, NetworkConfig};
use probe_density::pipeline::{self, DataSource, RunConfig};
use probe_density::sensing::{NoiseSettings, RampLaneSpec};
use probe_density::simulate::{make_congestion_scenario, Scenario, PRESETS};

#[derive(Parser)]
#[command(name = "probe-density", version, about = "Segment density and ramp-flow estimation from probe speeds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the filter once and write estimates.csv, ramps.csv and summary.json.
    Estimate(RunArgs),
    /// Penetration-rate sweep over seeded repetitions.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated penetration rates.
        #[arg(long, value_delimiter = ',', default_value = "0.02,0.05,0.1,0.2,0.5,1.0")]
        p_list: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Simulate a preset or scenario file and write truth and detector data.
    Simulate {
        #[arg(long, conflicts_with = "scenario")]
        preset: Option<String>,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        strict_cfl: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from a finished run directory.
    Metrics {
        run_dir: PathBuf,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Check a network file; exit 0 if valid, 1 on rule violations, 2 if unreadable.
    Validate { network: PathBuf },
    /// List the built-in scenario presets.
    Presets,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Network JSON (required with --trajectories and --detectors).
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long, group = "source")]
    preset: Option<String>,
    #[arg(long, group = "source")]
    scenario: Option<PathBuf>,
    /// Trajectory CSV: vehicle_id,t_s,x_m,lane,speed_mps.
    #[arg(long, group = "source")]
    trajectories: Option<PathBuf>,
    /// Detector CSV: detector_pos_m,t_s,flow_vph,speed_kmh.
    #[arg(long, group = "source")]
    detectors: Option<PathBuf>,
    /// Ramp flow CSV (segment,t_s,flow_vph) used with --detectors.
    #[arg(long, requires = "detectors")]
    ramp_flows: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    penetration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Speed smoothing window in steps (1 = latest report). In a sweep,
    /// the smoothed variant uses this when above 1, else 3.
    #[arg(long, default_value_t = 1)]
    window: usize,
    #[arg(long, default_value_t = 0.0)]
    flow_noise_std: f64,
    #[arg(long, default_value_t = 0.0)]
    speed_noise_std: f64,
    #[arg(long)]
    clip_noise: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Abort when any step violates the CFL condition.
    #[arg(long)]
    strict_cfl: bool,
    /// Clamp reported densities and ramp flows at zero.
    #[arg(long)]
    clamp_output: bool,
    #[arg(long, default_value_t = probe_density::metrics::DEFAULT_WARMUP_STEPS)]
    warmup: usize,
    /// Speed used for segments that never had a report, km/h.
    #[arg(long)]
    fallback_speed: Option<f64>,
    #[arg(long)]
    q_density: Option<f64>,
    #[arg(long)]
    q_ramp: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    h: Option<f64>,
    /// Lanes dropped from trajectory data.
    #[arg(long, value_delimiter = ',')]
    exclude_lanes: Vec<i64>,
    /// Ramp lanes as SEGMENT:LANE[+LANE...][:FROM_M:TO_M], repeatable.
    #[arg(long, value_parser = parse_ramp_lane)]
    ramp_lane: Vec<RampLaneSpec>,
    /// Data position (m) where segment 1 begins.
    #[arg(long, default_value_t = 0.0)]
    origin_m: f64,
    /// Relative spread of emulated probe speeds around the segment mean.
    #[arg(long)]
    probe_spread_rel: Option<f64>,
    /// Absolute spread floor of emulated probe speeds, km/h.
    #[arg(long)]
    probe_spread_kmh: Option<f64>,
}

fn parse_ramp_lane(s: &str) -> Result<RampLaneSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 && parts.len() != 4 {
        return Err(format!("expected SEGMENT:LANES[:FROM_M:TO_M], got `{s}`"));
    }
    let segment = parts[0].parse().map_err(|e| format!("segment: {e}"))?;
    let lanes = parts[1]
        .split('+')
        .map(|l| l.parse::<i64>().map_err(|e| format!("lane: {e}")))
        .collect::<Result<BTreeSet<_>, _>>()?;
    let merge_window_m = if parts.len() == 4 {
        let a = parts[2].parse::<f64>().map_err(|e| format!("window: {e}"))?;
        let b = parts[3].parse::<f64>().map_err(|e| format!("window: {e}"))?;
        Some((a, b))
    } else {
        None
    };
    Ok(RampLaneSpec {
        segment,
        lanes,
        merge_window_m,
    })
}

fn resolve_tuning(a: &RunArgs) -> Result<Option<DiagonalTuning>, Error> {
    let any = [a.q_density, a.q_ramp, a.r, a.mu, a.h].iter().any(Option::is_some);
    if !any {
        return Ok(None);
    }
    // overrides start from the preset tuning when there is one
    let base = match &a.preset {
        Some(p) => make_congestion_scenario(p, a.seed)?.tuning.unwrap_or_default(),
        None => DiagonalTuning::default(),
    };
    Ok(Some(DiagonalTuning {
        q_density: a.q_density.unwrap_or(base.q_density),
        q_ramp: a.q_ramp.unwrap_or(base.q_ramp),
        r: a.r.unwrap_or(base.r),
        mu: a.mu.unwrap_or(base.mu),
        h: a.h.unwrap_or(base.h),
    }))
}

fn run_config(a: &RunArgs) -> Result<RunConfig, Error> {
    let source = if let Some(name) = &a.preset {
        DataSource::Preset { name: name.clone() }
    } else if let Some(path) = &a.scenario {
        DataSource::Scenario { path: path.clone() }
    } else if let Some(path) = &a.trajectories {
        DataSource::Trajectories { path: path.clone() }
    } else if let Some(path) = &a.detectors {
        DataSource::Detectors {
            path: path.clone(),
            ramp_flows: a.ramp_flows.clone(),
        }
    } else {
        return Err(Error::InvalidInput(
            "one of --preset, --scenario, --trajectories or --detectors is required".into(),
        ));
    };
    let mut cfg = RunConfig::preset("");
    cfg.network = a.network.clone();
    cfg.source = source;
    cfg.penetration = a.penetration;
    cfg.seed = a.seed;
    cfg.window = a.window;
    cfg.tuning = resolve_tuning(a)?;
    cfg.noise = NoiseSettings {
        flow_std: a.flow_noise_std,
        speed_std: a.speed_noise_std,
        clip: a.clip_noise,
    };
    cfg.strict_cfl = a.strict_cfl;
    cfg.clamp_output = a.clamp_output;
    cfg.warmup_steps = a.warmup;
    cfg.fallback_speed_kmh = a.fallback_speed;
    cfg.trajectory.excluded_lanes = a.exclude_lanes.iter().copied().collect();
    cfg.trajectory.ramps = a.ramp_lane.clone();
    cfg.trajectory.origin_m = a.origin_m;
    if let Some(rel) = a.probe_spread_rel {
        cfg.probe_dispersion.relative = rel;
    }
    if let Some(abs) = a.probe_spread_kmh {
        cfg.probe_dispersion.absolute_kmh = abs;
    }
    cfg.check()?;
    if cfg.penetration == 0.0 {
        warn!("penetration 0: no speed reports, every segment runs on the fallback speed");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Estimate(a) => {
            let cfg = run_config(&a)?;
            let summary = pipeline::estimate(&cfg, &a.out)?;
            if summary.diagnostics.fallback_speed_cells > 0 {
                warn!(
                    "{} segment-steps used the fallback speed of {} km/h",
                    summary.diagnostics.fallback_speed_cells, summary.fallback_speed_kmh
                );
            }
            println!("{}", serde_json::to_string_pretty(&summary.metrics).expect("metrics serialize"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { run, p_list, reps } => {
            let cfg = run_config(&run)?;
            if p_list.contains(&0.0) {
                warn!("penetration 0 in the sweep: those runs use only the fallback speed");
            }
            let rows = pipeline::sweep(&cfg, &p_list, reps)?;
            let path = pipeline::write_sweep(&rows, &run.out)?;
            print!("{}", pipeline::sweep_csv(&rows));
            eprintln!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            preset,
            scenario,
            seed,
            strict_cfl,
            out,
        } => {
            let sc = match (preset, scenario) {
                (Some(p), _) => make_congestion_scenario(&p, seed)?,
                (None, Some(path)) => Scenario::from_json_file(path)?,
                (None, None) => return Err(Error::InvalidInput("--preset or --scenario is required".into())),
            };
            let report = sc.cfl_report();
            if !report.is_satisfied() {
                warn!("CFL condition violated in {} cells (max ratio {:.3})", report.violations.len(), report.max_ratio);
            }
            pipeline::simulate_to_dir(&sc, strict_cfl, &out)?;
            eprintln!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { run_dir, warmup } => {
            let m = pipeline::recompute_metrics(&run_dir, warmup)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { network } => {
            let cfg = match NetworkConfig::from_json_file(&network) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(ExitCode::from(2));
                }
            };
            let report = validate_network(&cfg);
            println!("{report}");
            println!("{}", pipeline::describe_network(&cfg));
            Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Presets => {
            for p in PRESETS {
                let sc = make_congestion_scenario(p, 0)?;
                println!("{p}: {} steps, {}", sc.horizon_steps, pipeline::describe_network(&sc.network));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } | Error::Parse { .. } | Error::InvalidInput(_) | Error::UnknownPreset(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
