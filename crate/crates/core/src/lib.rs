//! Per-slice DDQN agents allocating shared PRBs in simulated gNB cells,
//! with a federated averaging layer across cells.
//!
//! Module map:
//!
//! * [`traffic`]: offered load and channel quality per slice.
//! * [`env`]: the slicing environment of one cell (observations, arbitration, rewards).
//! * [`neural`]: a small feedforward Q-network with hand-written backprop and Adam.
//! * [`agent`]: the DDQN decision agent with uniform replay.
//! * [`federation`]: model snapshots, the `.fdrl` file format and weighted averaging.
//! * [`harness`]: training/evaluation loops, baselines, fairness and tabular oracles.
//! * [`config`] and [`telemetry`]: experiment configuration and KPI CSV export.

pub mod agent;
pub mod config;
pub mod env;
pub mod federation;
pub mod harness;
pub mod neural;
pub mod parallel;
pub mod seed;
pub mod telemetry;
pub mod traffic;

pub use agent::{AgentConfig, AgentState, EpsilonSchedule, ReplayBuffer, Transition};
pub use config::{parse_config, ConfigError, ExperimentConfig, FederationConfig};
pub use env::{CellConfig, CellEnv, EnvState, KpiRecord, Observation};
pub use federation::{AgentId, ModelSnapshot, Weighting};
pub use harness::{BaselineKind, EvalReport};
pub use parallel::Execution;
pub use traffic::{ChannelState, TrafficProfile, TrafficShape};
