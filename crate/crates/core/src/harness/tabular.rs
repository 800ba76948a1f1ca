//! Explicit tabular MDPs, value iteration, and the toy problem used to check
//! the DDQN agent end to end.

use crate::agent::{AgentConfig, AgentState, EpsilonSchedule, Transition};
use crate::federation::AgentId;
use crate::neural::AdamConfig;
use crate::seed::{sub_seed, StreamTag};

use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
}

/// `transitions[state][action]` lists the possible outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub transitions: Vec<Vec<Vec<Outcome>>>,
}

/// `q[state][action]`.
pub type QTable = Vec<Vec<f64>>;

/// Two states A (0) and B (1), two deterministic actions:
/// in A, 0 stays (r = 0) and 1 moves to B (r = 1);
/// in B, 0 stays (r = 2) and 1 moves to A (r = 0).
pub fn toy_mdp() -> TabularMdp {
    let det = |next, reward| vec![Outcome { next, prob: 1.0, reward }];
    TabularMdp {
        num_states: 2,
        num_actions: 2,
        transitions: vec![vec![det(0, 0.0), det(1, 1.0)], vec![det(1, 2.0), det(0, 0.0)]],
    }
}

impl TabularMdp {
    fn check(&self) -> Result<(), HarnessError> {
        if self.transitions.len() != self.num_states {
            return Err(HarnessError::InvalidMdp("state count".into()));
        }
        for (s, row) in self.transitions.iter().enumerate() {
            if row.len() != self.num_actions {
                return Err(HarnessError::InvalidMdp(format!("action count in state {s}")));
            }
            for (a, outcomes) in row.iter().enumerate() {
                if outcomes.iter().any(|o| !o.reward.is_finite()) {
                    return Err(HarnessError::NonFiniteReward { state: s, action: a });
                }
                if outcomes.iter().any(|o| o.next >= self.num_states || !(o.prob >= 0.0)) {
                    return Err(HarnessError::InvalidMdp(format!("bad outcome in ({s}, {a})")));
                }
            }
        }
        Ok(())
    }

    /// Samples the outcome of `(state, action)` from a uniform draw in `[0, 1)`.
    fn sample(&self, state: usize, action: usize, u: f64) -> Outcome {
        let outcomes = &self.transitions[state][action];
        let mut acc = 0.0;
        for o in outcomes {
            acc += o.prob;
            if u < acc {
                return *o;
            }
        }
        *outcomes.last().expect("at least one outcome")
    }
}

/// Bellman optimality backups until the largest change is below `tolerance`.
pub fn value_iteration_oracle(mdp: &TabularMdp, gamma: f64, tolerance: f64) -> Result<QTable, HarnessError> {
    mdp.check()?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(HarnessError::InvalidMdp(format!("gamma {gamma} outside [0, 1)")));
    }
    let mut q = vec![vec![0.0; mdp.num_actions]; mdp.num_states];
    loop {
        let v: Vec<f64> = q.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let mut delta = 0.0f64;
        for (s, row) in mdp.transitions.iter().enumerate() {
            for (a, outcomes) in row.iter().enumerate() {
                let backup: f64 = outcomes.iter().map(|o| o.prob * (o.reward + gamma * v[o.next])).sum();
                delta = delta.max((backup - q[s][a]).abs());
                q[s][a] = backup;
            }
        }
        if delta < tolerance {
            return Ok(q);
        }
    }
}

/// Agent settings for the toy problem: always explore (the learning is
/// off-policy), train every step, sync the target every 100 iterations.
pub fn toy_agent_config() -> AgentConfig {
    AgentConfig {
        gamma: 0.9,
        batch_size: 64,
        target_sync_period: 100,
        train_every: 1,
        warmup_transitions: 256,
        replay_capacity: 10_000,
        epsilon: EpsilonSchedule {
            start: 1.0,
            end: 1.0,
            decay_steps: 1,
        },
        hidden_layers: vec![32, 32],
        optimizer: AdamConfig::default(),
    }
}

/// Outcome of a toy DDQN run.
#[derive(Clone, Debug)]
pub struct ToyRun {
    pub q_star: QTable,
    pub q_learned: QTable,
    /// `max |Q_online - Q*|` after the run.
    pub max_abs_error: f64,
    /// First training iteration (checked every 100) at which the error was
    /// within `tolerance_frac * max|Q*|`, if ever.
    pub reached_at: Option<u64>,
    pub train_iterations: u64,
}

fn one_hot(state: usize, n: usize) -> Vec<f32> {
    let mut v = vec![0.0; n];
    v[state] = 1.0;
    v
}

fn learned_q(agent: &AgentState, mdp: &TabularMdp) -> QTable {
    (0..mdp.num_states)
        .map(|s| {
            agent
                .q_values(&one_hot(s, mdp.num_states))
                .expect("one-hot matches input dim")
                .into_iter()
                .map(f64::from)
                .collect()
        })
        .collect()
}

fn max_abs_diff(a: &QTable, b: &QTable) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs the full agent loop (act, record, train) on `mdp` with one-hot state
/// features for `max_iterations` training iterations.
pub fn run_toy_ddqn(
    mdp: &TabularMdp,
    config: &AgentConfig,
    seed: u64,
    max_iterations: u64,
    tolerance_frac: f64,
) -> Result<ToyRun, HarnessError> {
    use rand::Rng;
    let q_star = value_iteration_oracle(mdp, config.gamma, 1e-12)?;
    let scale = q_star.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let id = AgentId { cell_id: 0, slice_id: 0 };
    let dims = config.layer_dims(mdp.num_states, mdp.num_actions);
    let mut agent = AgentState::new(
        id,
        &dims,
        config,
        sub_seed(seed, 0, 0, StreamTag::Init),
        sub_seed(seed, 0, 0, StreamTag::Agent),
    )
    .map_err(|source| HarnessError::Agent { agent: id, step: 0, source })?;
    let mut env_rng = crate::seed::rng_from_seed(sub_seed(seed, 0, 0, StreamTag::Env));

    let mut state = 0;
    let mut reached_at = None;
    let mut step = 0u64;
    while agent.train_iterations < max_iterations {
        let features = one_hot(state, mdp.num_states);
        let (action, _) = agent
            .act(&features, config)
            .map_err(|source| HarnessError::Agent { agent: id, step, source })?;
        let outcome = mdp.sample(state, action, env_rng.random::<f64>());
        agent.record(Transition {
            state: features,
            action,
            reward: outcome.reward as f32,
            next_state: one_hot(outcome.next, mdp.num_states),
            done: false,
        });
        let trained = agent
            .train_iteration(config)
            .map_err(|source| HarnessError::Agent { agent: id, step, source })?;
        if trained.is_some() && reached_at.is_none() && agent.train_iterations % 100 == 0 {
            let err = max_abs_diff(&learned_q(&agent, mdp), &q_star);
            if err <= tolerance_frac * scale {
                reached_at = Some(agent.train_iterations);
            }
        }
        state = outcome.next;
        step += 1;
    }
    let q_learned = learned_q(&agent, mdp);
    Ok(ToyRun {
        max_abs_error: max_abs_diff(&q_learned, &q_star),
        q_star,
        q_learned,
        reached_at,
        train_iterations: agent.train_iterations,
    })
}
