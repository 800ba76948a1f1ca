//! Federated averaging of agent models across cells.
//!
//! Agents that serve the same slice in different cells form a group. Each
//! round snapshots their online networks, averages them, and writes the
//! aggregate back into every member.

mod format;

pub use format::{deserialize_model, serialize_model, FormatError, FORMAT_VERSION, MAGIC};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentState;
use crate::neural::{param_count, MlpParams, NeuralError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId {
    pub cell_id: u16,
    pub slice_id: u16,
}

/// Serialized form of one agent's model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub id: AgentId,
    pub layer_dims: Vec<u32>,
    /// Canonical flattening of the network.
    pub params: Vec<f32>,
    pub sample_count: u64,
}

impl ModelSnapshot {
    pub fn of_agent(agent: &AgentState) -> Self {
        Self {
            id: agent.id,
            layer_dims: agent.online.dims().iter().map(|&d| d as u32).collect(),
            params: agent.online.flatten(),
            sample_count: agent.samples_since_round,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.layer_dims.iter().map(|&d| d as usize).collect()
    }

    /// Rebuilds the network described by the snapshot.
    pub fn to_params(&self) -> Result<MlpParams<f32>, NeuralError> {
        MlpParams::from_flat(&self.dims(), &self.params)
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.layer_dims == other.layer_dims
            && self.sample_count == other.sample_count
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FederationError {
    #[error("no snapshots to aggregate")]
    Empty,
    #[error("layer dims {found:?} differ from {expected:?}")]
    DimsMismatch { expected: Vec<u32>, found: Vec<u32> },
    #[error("snapshot carries {got} parameters, dims imply {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("member {0:?} is not part of the group")]
    NotAMember(AgentId),
}

/// How member models are weighted in the average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Proportional to transitions collected since the previous round.
    #[default]
    SampleCount,
    Equal,
}

/// Sample-count weighted average of the snapshots.
pub fn fedavg(snapshots: &[ModelSnapshot]) -> Result<Vec<f32>, FederationError> {
    fedavg_with(snapshots, Weighting::SampleCount)
}

/// Componentwise weighted mean, accumulated in f64. Falls back to equal
/// weights when every sample count is zero.
pub fn fedavg_with(snapshots: &[ModelSnapshot], weighting: Weighting) -> Result<Vec<f32>, FederationError> {
    let first = snapshots.first().ok_or(FederationError::Empty)?;
    let dims = first.dims();
    let expected = param_count(&dims);
    for snap in snapshots {
        if snap.layer_dims != first.layer_dims {
            return Err(FederationError::DimsMismatch {
                expected: first.layer_dims.clone(),
                found: snap.layer_dims.clone(),
            });
        }
        if snap.params.len() != expected {
            return Err(FederationError::LengthMismatch { expected, got: snap.params.len() });
        }
    }

    let total: u64 = snapshots.iter().map(|s| s.sample_count).sum();
    let weights: Vec<f64> = match weighting {
        Weighting::SampleCount if total > 0 => snapshots
            .iter()
            .map(|s| s.sample_count as f64 / total as f64)
            .collect(),
        _ => vec![1.0 / snapshots.len() as f64; snapshots.len()],
    };

    let mut acc = vec![0.0f64; expected];
    for (snap, &w) in snapshots.iter().zip(&weights) {
        for (a, &p) in acc.iter_mut().zip(&snap.params) {
            *a += w * f64::from(p);
        }
    }
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

/// Agents serving one slice across cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationGroup {
    pub slice_id: u16,
    pub members: Vec<AgentId>,
    pub round: u64,
    pub period_steps: u64,
}

/// Result of one completed round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSummary {
    pub slice_id: u16,
    /// 1-based index of the completed round.
    pub round: u64,
    pub aggregate: ModelSnapshot,
}

impl FederationGroup {
    pub fn new(slice_id: u16, members: Vec<AgentId>, period_steps: u64) -> Self {
        Self {
            slice_id,
            members,
            round: 0,
            period_steps,
        }
    }

    /// One synchronous round over `agents`, which must be exactly the group's
    /// members.
    ///
    /// Nothing is written until the aggregate has been computed, so any error
    /// leaves every agent untouched. A member whose online network already
    /// equals the aggregate bit-for-bit is left entirely alone (target and
    /// optimizer included); every other member receives the aggregate in both
    /// networks and has its optimizer moments zeroed.
    pub fn run_round(&mut self, agents: &mut [&mut AgentState], weighting: Weighting) -> Result<RoundSummary, FederationError> {
        for agent in agents.iter() {
            if !self.members.contains(&agent.id) {
                return Err(FederationError::NotAMember(agent.id));
            }
        }
        if agents.len() != self.members.len() {
            let missing = self
                .members
                .iter()
                .find(|m| !agents.iter().any(|a| a.id == **m))
                .copied()
                .unwrap_or(self.members[0]);
            return Err(FederationError::NotAMember(missing));
        }
        let snapshots: Vec<ModelSnapshot> = agents.iter().map(|a| ModelSnapshot::of_agent(a)).collect();
        let aggregate = fedavg_with(&snapshots, weighting)?;
        let total_samples = snapshots.iter().map(|s| s.sample_count).sum();

        for (agent, snap) in agents.iter_mut().zip(&snapshots) {
            let unchanged = snap
                .params
                .iter()
                .zip(&aggregate)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !unchanged {
                agent
                    .online
                    .assign_flat(&aggregate)
                    .expect("aggregate length checked against dims");
                agent.target.clone_from(&agent.online);
                agent.opt.reset();
            }
            agent.samples_since_round = 0;
        }
        self.round += 1;
        Ok(RoundSummary {
            slice_id: self.slice_id,
            round: self.round,
            aggregate: ModelSnapshot {
                id: AgentId { cell_id: u16::MAX, slice_id: self.slice_id },
                layer_dims: snapshots[0].layer_dims.clone(),
                params: aggregate,
                sample_count: total_samples,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentConfig, Transition};

    fn snap(params: Vec<f32>, count: u64) -> ModelSnapshot {
        ModelSnapshot {
            id: AgentId { cell_id: 0, slice_id: 0 },
            layer_dims: vec![1, 1],
            params,
            sample_count: count,
        }
    }

    #[test]
    fn fedavg_examples() {
        let a = snap(vec![1.0, 3.0], 1);
        let b = snap(vec![3.0, 5.0], 1);
        assert_eq!(fedavg(&[a.clone(), b.clone()]).unwrap(), vec![2.0, 4.0]);
        let b3 = ModelSnapshot { sample_count: 3, ..b };
        assert_eq!(fedavg(&[a.clone(), b3]).unwrap(), vec![2.5, 4.5]);
        let same = vec![snap(vec![0.1, -7.25], 4); 5];
        assert_eq!(fedavg(&same).unwrap(), vec![0.1, -7.25]);
    }

    #[test]
    fn zero_counts_fall_back_to_equal_weights() {
        let a = snap(vec![1.0, 3.0], 0);
        let b = snap(vec![3.0, 5.0], 0);
        assert_eq!(fedavg(&[a, b]).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn equal_weighting_ignores_counts() {
        let a = snap(vec![1.0, 3.0], 1);
        let b = snap(vec![3.0, 5.0], 3);
        assert_eq!(fedavg_with(&[a, b], Weighting::Equal).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn fedavg_errors() {
        assert_eq!(fedavg(&[]), Err(FederationError::Empty));
        let a = snap(vec![1.0, 3.0], 1);
        let b = ModelSnapshot { layer_dims: vec![2, 1], params: vec![0.0; 3], ..a.clone() };
        assert!(matches!(fedavg(&[a.clone(), b]), Err(FederationError::DimsMismatch { .. })));
        let short = snap(vec![1.0], 1);
        assert!(matches!(fedavg(&[a, short]), Err(FederationError::LengthMismatch { .. })));
    }

    fn agent(cell: u16, init_seed: u64) -> AgentState {
        let cfg = AgentConfig { hidden_layers: vec![4], ..AgentConfig::default() };
        AgentState::new(AgentId { cell_id: cell, slice_id: 1 }, &[3, 4, 2], &cfg, init_seed, 99).unwrap()
    }

    fn touch(agent: &mut AgentState, n: usize) {
        for _ in 0..n {
            agent.record(Transition {
                state: vec![0.0; 3],
                action: 0,
                reward: 0.0,
                next_state: vec![0.0; 3],
                done: false,
            });
        }
    }

    #[test]
    fn single_member_round_is_identity() {
        let mut a = agent(0, 1);
        a.target = crate::neural::init_params(&[3, 4, 2], 77).unwrap();
        a.opt.step = 17;
        touch(&mut a, 5);
        let (online, target) = (a.online.clone(), a.target.clone());
        let mut group = FederationGroup::new(1, vec![a.id], 2000);
        let summary = group.run_round(&mut [&mut a], Weighting::SampleCount).unwrap();
        assert_eq!(a.online, online);
        assert_eq!(a.target, target);
        assert_eq!(a.opt.step, 17);
        assert_eq!(a.samples_since_round, 0);
        assert_eq!(summary.round, 1);
        assert_eq!(summary.aggregate.sample_count, 5);
        assert_eq!(group.round, 1);
    }

    #[test]
    fn identical_members_unchanged() {
        let mut a = agent(0, 1);
        let mut b = agent(1, 1);
        let before = a.online.clone();
        let mut group = FederationGroup::new(1, vec![a.id, b.id], 2000);
        group.run_round(&mut [&mut a, &mut b], Weighting::SampleCount).unwrap();
        assert_eq!(a.online, before);
        assert_eq!(b.online, before);
    }

    #[test]
    fn round_writes_aggregate_and_resets_optimizer() {
        let mut a = agent(0, 1);
        let mut b = agent(1, 2);
        touch(&mut a, 1);
        touch(&mut b, 3);
        a.opt.step = 5;
        let expected = fedavg(&[ModelSnapshot::of_agent(&a), ModelSnapshot::of_agent(&b)]).unwrap();
        let mut group = FederationGroup::new(1, vec![a.id, b.id], 2000);
        group.run_round(&mut [&mut a, &mut b], Weighting::SampleCount).unwrap();
        for m in [&a, &b] {
            assert_eq!(m.online.flatten(), expected);
            assert_eq!(m.target, m.online);
            assert_eq!(m.opt.step, 0);
            assert!(m.opt.first_moment.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn failed_round_is_atomic() {
        let mut a = agent(0, 1);
        let cfg = AgentConfig { hidden_layers: vec![5], ..AgentConfig::default() };
        let mut b = AgentState::new(AgentId { cell_id: 1, slice_id: 1 }, &[3, 5, 2], &cfg, 2, 3).unwrap();
        touch(&mut a, 2);
        let (a0, b0) = (a.clone(), b.clone());
        let mut group = FederationGroup::new(1, vec![a.id, b.id], 2000);
        let err = group.run_round(&mut [&mut a, &mut b], Weighting::SampleCount).unwrap_err();
        assert!(matches!(err, FederationError::DimsMismatch { .. }));
        assert_eq!(a.online, a0.online);
        assert_eq!(a.target, a0.target);
        assert_eq!(a.samples_since_round, 2);
        assert_eq!(b.online, b0.online);
        assert_eq!(group.round, 0);
    }

    #[test]
    fn outsiders_are_rejected() {
        let mut a = agent(0, 1);
        let mut group = FederationGroup::new(1, vec![AgentId { cell_id: 4, slice_id: 1 }], 2000);
        assert!(matches!(
            group.run_round(&mut [&mut a], Weighting::SampleCount),
            Err(FederationError::NotAMember(_))
        ));
    }
}
