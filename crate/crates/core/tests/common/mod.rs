#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probe_density::network::{NetworkConfig, RampKind, Segment};
use probe_density::simulate::{equilibrium_densities, Scenario};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random network with up to `max_unmeasured` unmeasured ramps, some measured
/// ramps, and one sensor per interval between consecutive unmeasured ramps
/// plus the exit sensor.
pub fn random_observable_network(rng: &mut ChaCha8Rng, max_n: usize, max_unmeasured: usize) -> NetworkConfig {
    let n = rng.random_range(2..=max_n);
    let t_h = rng.random_range(5.0..15.0) / 3600.0;
    let mut segments: Vec<Segment> = (0..n).map(|_| Segment::plain(rng.random_range(0.3..0.6))).collect();
    let n_unmeasured = rng.random_range(0..=max_unmeasured.min(n));
    let mut slots: Vec<usize> = (1..=n).collect();
    // partial shuffle to pick distinct ramp segments
    for i in 0..slots.len() {
        let j = rng.random_range(i..slots.len());
        slots.swap(i, j);
    }
    let mut unmeasured: Vec<usize> = slots[..n_unmeasured].to_vec();
    unmeasured.sort_unstable();
    for &s in &unmeasured {
        let kind = if rng.random_bool(0.6) { RampKind::OnRamp } else { RampKind::OffRamp };
        segments[s - 1] = Segment::with_ramp(segments[s - 1].length_km, kind, false);
    }
    for &s in &slots[n_unmeasured..] {
        if rng.random_bool(0.2) {
            let kind = if rng.random_bool(0.5) { RampKind::OnRamp } else { RampKind::OffRamp };
            segments[s - 1] = Segment::with_ramp(segments[s - 1].length_km, kind, true);
        }
    }
    let mut sensors = vec![n];
    for w in unmeasured.windows(2) {
        sensors.push(rng.random_range(w[0]..w[1]));
    }
    NetworkConfig::new(t_h, segments, sensors)
}

/// Speeds keeping T·v/Δ in [0.05, 0.95].
pub fn random_cfl_speeds(rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Vec<f64> {
    cfg.segments
        .iter()
        .map(|s| rng.random_range(0.05..0.95) * s.length_km / cfg.time_step_h)
        .collect()
}

/// Random SPD matrix M Mᵀ + εI.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Mat {
    let m: Mat = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = scale * (0..n).map(|k| m[i][k] * m[j][k]).sum::<f64>() / n as f64;
        }
        out[i][i] += 0.1 * scale;
    }
    out
}

pub fn random_scenario(rng: &mut ChaCha8Rng, steps: usize) -> Scenario {
    let network = random_observable_network(rng, 10, 3);
    let n = network.n_segments();
    let speeds_kmh: Vec<Vec<f64>> = (0..steps).map(|_| random_cfl_speeds(rng, &network)).collect();
    let inflow_vph: Vec<f64> = (0..steps).map(|_| rng.random_range(500.0..4000.0)).collect();
    let ramp_demand_vph: BTreeMap<usize, Vec<f64>> = network
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.ramp != RampKind::None)
        .map(|(i, _)| (i + 1, (0..steps).map(|_| rng.random_range(0.0..1200.0)).collect()))
        .collect();
    let initial_densities = (0..n).map(|_| rng.random_range(0.0..120.0)).collect();
    Scenario {
        name: "random".into(),
        network,
        horizon_steps: steps,
        speeds_kmh,
        inflow_vph,
        ramp_demand_vph,
        initial_densities,
        fallback_speed_kmh: None,
        tuning: None,
    }
}

// ---------------------------------------------------------------------------
// Naive reference filter on plain vectors.

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..m {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn sub(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect()
}

pub fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn col(v: &[f64]) -> Mat {
    v.iter().map(|x| vec![*x]).collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a.iter().zip(identity(n)).map(|(r, e)| r.iter().copied().chain(e).collect()).collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        let d = m[c][c];
        assert!(d.abs() > 1e-300, "singular matrix in oracle");
        for x in m[c].iter_mut() {
            *x /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for k in 0..2 * n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// A(k) written out from the conservation law, independent of the library.
pub fn naive_a(cfg: &NetworkConfig, speeds: &[f64]) -> Mat {
    let n = cfg.n_segments();
    let unmeasured: Vec<(usize, f64)> = cfg
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.ramp != RampKind::None && !s.ramp_measured)
        .map(|(i, s)| (i, if s.ramp == RampKind::OnRamp { 1.0 } else { -1.0 }))
        .collect();
    let dim = n + unmeasured.len();
    let mut a = identity(dim);
    for i in 0..n {
        let c = cfg.time_step_h / cfg.segments[i].length_km;
        a[i][i] = 1.0 - c * speeds[i];
        if i > 0 {
            a[i][i - 1] = c * speeds[i - 1];
        }
    }
    for (pos, (i, sign)) in unmeasured.iter().enumerate() {
        a[*i][n + pos] = *sign;
    }
    a
}

/// B(k) with columns q0 then measured ramps in ascending segment order.
pub fn naive_b(cfg: &NetworkConfig) -> Mat {
    let n = cfg.n_segments();
    let measured: Vec<(usize, f64)> = cfg
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.ramp != RampKind::None && s.ramp_measured)
        .map(|(i, s)| (i, if s.ramp == RampKind::OnRamp { 1.0 } else { -1.0 }))
        .collect();
    let l = cfg.segments.iter().filter(|s| s.ramp != RampKind::None && !s.ramp_measured).count();
    let mut b = vec![vec![0.0; 1 + measured.len()]; n + l];
    b[0][0] = cfg.time_step_h / cfg.segments[0].length_km;
    for (col, (i, sign)) in measured.iter().enumerate() {
        b[*i][col + 1] = sign * cfg.time_step_h / cfg.segments[*i].length_km;
    }
    b
}

/// Selection rows for the given 1-based segments.
pub fn naive_c(dim: usize, rows: &[usize]) -> Mat {
    rows.iter()
        .map(|&s| (0..dim).map(|j| if j + 1 == s { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub struct NaiveFilter {
    pub x: Mat,
    pub p: Mat,
}

impl NaiveFilter {
    /// x⁺ = A(x + K(z − Cx)) + Bu, P⁺ = A(I − KC)PAᵀ + Q, K = PCᵀ(CPCᵀ + R)⁻¹.
    pub fn step(&mut self, a: &Mat, b: &Mat, u: &[f64], c: &Mat, z: &[f64], q: &Mat, r: &Mat) {
        let ct = transpose(c);
        let s = add(&matmul(&matmul(c, &self.p), &ct), r);
        let k = matmul(&matmul(&self.p, &ct), &invert(&s));
        let innov = sub(&col(z), &matmul(c, &self.x));
        let corrected = add(&self.x, &matmul(&k, &innov));
        self.x = add(&matmul(a, &corrected), &matmul(b, &col(u)));
        let n = self.p.len();
        let i_kc = sub(&identity(n), &matmul(&k, c));
        self.p = add(&matmul(&matmul(&matmul(a, &i_kc), &self.p), &transpose(a)), q);
    }
}

/// Runs the library filter and the naive one side by side on a random
/// observable system; returns the largest absolute difference in x̂ and P.
pub fn filter_oracle_case(seed: u64, steps: usize) -> f64 {
    use nalgebra::{DMatrix, DVector};
    use probe_density::kalman::{init_filter, kf_step, FilterTuning};
    use probe_density::ltv_model::{build_a, build_b, build_c, build_state_index, build_u, SensorChoice};

    let mut rng = rng(seed);
    let cfg = random_observable_network(&mut rng, 10, 3);
    let idx = build_state_index(&cfg).expect("observable by construction");
    let meas = build_c(&idx, &cfg, &SensorChoice::default()).expect("placement rule holds");
    let dim = idx.total_dim();
    let m = meas.segments.len();

    let q = random_spd(&mut rng, dim, 1.0);
    let r = random_spd(&mut rng, m, 10.0);
    let h = random_spd(&mut rng, dim, 5.0);
    let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..80.0)).collect();
    let to_dm = |a: &Mat| DMatrix::from_fn(a.len(), a[0].len(), |i, j| a[i][j]);
    let tuning = FilterTuning::new(to_dm(&q), to_dm(&r), DVector::from_vec(mu.clone()), to_dm(&h)).expect("SPD tuning");

    let mut lib = init_filter(&tuning);
    let mut naive = NaiveFilter { x: col(&mu), p: h.clone() };
    let c_naive = naive_c(dim, &meas.segments);
    let b_naive = naive_b(&cfg);
    let b_lib = build_b(&idx, &cfg).unwrap();
    let mut worst = 0.0_f64;
    for _ in 0..steps {
        let speeds = random_cfl_speeds(&mut rng, &cfg);
        let q0 = rng.random_range(500.0..4000.0);
        let measured: BTreeMap<usize, f64> = idx.measured.iter().map(|s| (s.segment, rng.random_range(0.0..900.0))).collect();
        let z: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..150.0)).collect();
        let u_lib = build_u(&idx, q0, &measured).unwrap();
        let u_naive: Vec<f64> = std::iter::once(q0).chain(measured.values().copied()).collect();

        lib = kf_step(&lib, &build_a(&idx, &cfg, &speeds).unwrap(), &b_lib, &u_lib, &meas.c, &DVector::from_vec(z.clone()), &tuning)
            .expect("well-conditioned step");
        naive.step(&naive_a(&cfg, &speeds), &b_naive, &u_naive, &c_naive, &z, &q, &r);

        for i in 0..dim {
            worst = worst.max((lib.x_hat[i] - naive.x[i][0]).abs());
            for j in 0..dim {
                worst = worst.max((lib.p[(i, j)] - naive.p[i][j]).abs());
            }
        }
    }
    worst
}

/// Five 0.5 km segments, T = 10 s, constant speeds, unmeasured on-ramp in
/// segment 3 with a constant 600 veh/h, exit sensor only; starts in
/// equilibrium.
pub fn constant_ramp_scenario(steps: usize) -> Scenario {
    let segments = vec![
        Segment::plain(0.5),
        Segment::plain(0.5),
        Segment::with_ramp(0.5, RampKind::OnRamp, false),
        Segment::plain(0.5),
        Segment::plain(0.5),
    ];
    let network = NetworkConfig::new(10.0 / 3600.0, segments, [5]);
    let speeds = vec![90.0, 85.0, 80.0, 75.0, 80.0];
    let initial_densities = equilibrium_densities(&network, 2000.0, &BTreeMap::from([(3, 600.0)]), &speeds);
    Scenario {
        name: "constant_ramp".into(),
        network,
        horizon_steps: steps,
        speeds_kmh: vec![speeds; steps],
        inflow_vph: vec![2000.0; steps],
        ramp_demand_vph: BTreeMap::from([(3, vec![600.0; steps])]),
        initial_densities,
        fallback_speed_kmh: None,
        tuning: None,
    }
}

pub struct GramianCase {
    pub n1: usize,
    pub full_rank: usize,
    /// Rank after removing each mid-stretch sensor in turn.
    pub reduced_ranks: Vec<usize>,
}

/// Random observable network with at least two unmeasured ramps and
/// constant random speeds; Gramian rank with all sensors and with each
/// required mid-stretch sensor removed.
pub fn gramian_case(seed: u64) -> GramianCase {
    use nalgebra::DMatrix;
    use probe_density::kalman::observability_gramian;
    use probe_density::ltv_model::{build_a, build_c, build_state_index, selection_matrix, SensorChoice};

    let mut rng = rng(seed);
    let cfg = loop {
        let c = random_observable_network(&mut rng, 10, 3);
        if c.unmeasured_ramps().len() >= 2 {
            break c;
        }
    };
    let idx = build_state_index(&cfg).unwrap();
    let meas = build_c(&idx, &cfg, &SensorChoice::default()).unwrap();
    let n1 = idx.total_dim();
    let speeds = random_cfl_speeds(&mut rng, &cfg);
    let a = build_a(&idx, &cfg, &speeds).unwrap();
    let window: Vec<DMatrix<f64>> = vec![a; 2 * n1];
    let (_, full_rank) = observability_gramian(&window, &meas.c).unwrap();
    let mid = &meas.segments[..meas.segments.len() - 1];
    let reduced_ranks = (0..mid.len())
        .map(|drop| {
            let rows: Vec<usize> = meas.segments.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, s)| *s).collect();
            observability_gramian(&window, &selection_matrix(n1, &rows)).unwrap().1
        })
        .collect();
    GramianCase {
        n1,
        full_rank,
        reduced_ranks,
    }
}
