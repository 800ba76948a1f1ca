//! Experiment orchestration: training and evaluation loops, baseline
//! policies, fairness and the tabular oracles used to check the agent.

mod baseline;
mod eval;
mod tabular;
mod training;

pub use baseline::{BaselineKind, UnknownBaseline};
pub use eval::{evaluate_policy, evaluate_policy_with, jain_fairness, CellReport, EvalReport, Policy, SliceReport};
pub use tabular::{
    run_toy_ddqn, toy_agent_config, toy_mdp, value_iteration_oracle, Outcome, QTable, TabularMdp, ToyRun,
};
pub use training::{run_training, run_training_with, TrainingOutcome};

use thiserror::Error;

use crate::agent::AgentError;
use crate::config::FieldError;
use crate::env::EnvError;
use crate::federation::{AgentId, FederationError};

#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error("invalid configuration at {0}")]
    Config(#[from] FieldError),
    #[error("cell {cell_id} at step {step}: {source}")]
    Env {
        cell_id: u16,
        step: u64,
        #[source]
        source: EnvError,
    },
    #[error("agent {agent:?} at step {step}: {source}")]
    Agent {
        agent: AgentId,
        step: u64,
        #[source]
        source: AgentError,
    },
    #[error("federation round for slice {slice_id} at step {step}: {source}")]
    Federation {
        slice_id: u16,
        step: u64,
        #[source]
        source: FederationError,
    },
    #[error("trained agents do not match the configuration: {0}")]
    AgentLayout(String),
    #[error("fairness undefined for an all-zero allocation vector")]
    AllZero,
    #[error("non-finite reward in MDP at state {state}, action {action}")]
    NonFiniteReward { state: usize, action: usize },
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
}
