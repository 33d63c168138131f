//! Segment density and unmeasured ramp-flow estimation for a highway
//! stretch, from connected-vehicle speeds and a sparse set of flow sensors.
//!
//! The stretch is a chain of cells with known per-step speeds, so the
//! vehicle-conservation dynamics are linear time-varying in the densities.
//! Unmeasured ramp flows are appended to the state as random walks and a
//! Kalman filter estimates both from flow-sensor readings.

pub mod error;
pub mod kalman;
pub mod ltv_model;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod sensing;
pub mod simulate;

pub use error::{Error, Result};
pub use kalman::{kf_step, run_filter, DiagonalTuning, FilterState, FilterTuning, RunOptions};
pub use ltv_model::{build_a, build_b, build_c, build_state_index, build_u, StateIndex};
pub use metrics::RunMetrics;
pub use network::{check_cfl, validate_network, NetworkConfig, RampKind, Segment};
pub use pipeline::{DataSource, RunConfig};
pub use simulate::{make_congestion_scenario, simulate_truth, Scenario};
