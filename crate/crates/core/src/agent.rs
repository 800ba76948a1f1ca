//! Per-slice DDQN decision agent.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

use crate::config::FieldError;
use crate::federation::AgentId;
use crate::neural::{init_params, optimizer_step, AdamConfig, MlpParams, NeuralError, OptState, DEFAULT_HIDDEN};
use crate::seed::{rng_from_seed, SimRng};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("cannot sample {requested} transitions from a buffer of {available}")]
    InsufficientTransitions { requested: usize, available: usize },
    #[error("empty q-value vector")]
    EmptyQValues,
    #[error("state has {got} features, network expects {expected}")]
    StateDim { expected: usize, got: usize },
}

/// Linear epsilon decay from `start` to `end` over `decay_steps` env steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            decay_steps: 20_000,
        }
    }
}

pub fn epsilon_at(schedule: &EpsilonSchedule, env_step: u64) -> f64 {
    if env_step >= schedule.decay_steps {
        return schedule.end;
    }
    let frac = env_step as f64 / schedule.decay_steps as f64;
    schedule.start + (schedule.end - schedule.start) * frac
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub batch_size: usize,
    /// Training iterations between hard target syncs.
    pub target_sync_period: u64,
    /// Env steps between training iterations.
    pub train_every: u64,
    pub warmup_transitions: usize,
    pub replay_capacity: usize,
    pub epsilon: EpsilonSchedule,
    pub hidden_layers: Vec<usize>,
    pub optimizer: AdamConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            batch_size: 64,
            target_sync_period: 500,
            train_every: 4,
            warmup_transitions: 1000,
            replay_capacity: 50_000,
            epsilon: EpsilonSchedule::default(),
            hidden_layers: DEFAULT_HIDDEN.to_vec(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(FieldError::new("gamma", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(FieldError::new("batch_size", "must be at least 1"));
        }
        if self.target_sync_period == 0 {
            return Err(FieldError::new("target_sync_period", "must be at least 1"));
        }
        if self.train_every == 0 {
            return Err(FieldError::new("train_every", "must be at least 1"));
        }
        if self.replay_capacity < self.batch_size {
            return Err(FieldError::new("replay_capacity", "must be at least batch_size"));
        }
        if self.warmup_transitions < self.batch_size {
            return Err(FieldError::new("warmup_transitions", "must be at least batch_size"));
        }
        let eps = &self.epsilon;
        if !(0.0 <= eps.end && eps.end <= eps.start && eps.start <= 1.0) {
            return Err(FieldError::new("epsilon", "need 0 <= end <= start <= 1"));
        }
        if eps.decay_steps == 0 {
            return Err(FieldError::new("epsilon.decay_steps", "must be at least 1"));
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(FieldError::new("hidden_layers", "widths must be positive"));
        }
        let opt = &self.optimizer;
        if !(opt.learning_rate > 0.0 && opt.learning_rate.is_finite()) {
            return Err(FieldError::new("optimizer.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) {
            return Err(FieldError::new("optimizer", "betas must lie in [0, 1)"));
        }
        if !(opt.epsilon > 0.0) || !(opt.max_grad_norm > 0.0) {
            return Err(FieldError::new("optimizer", "epsilon and max_grad_norm must be positive"));
        }
        Ok(())
    }

    /// `[input, hidden..., outputs]`.
    pub fn layer_dims(&self, input_dim: usize, num_actions: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_layers);
        dims.push(num_actions);
        dims
    }
}

/// With probability `epsilon` a uniform action, otherwise the first argmax.
pub fn select_action<R: Rng + ?Sized>(q_values: &[f32], epsilon: f64, rng: &mut R) -> Result<usize, AgentError> {
    if q_values.is_empty() {
        return Err(AgentError::EmptyQValues);
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..q_values.len()));
    }
    Ok(argmax(q_values))
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: usize,
    pub reward: f32,
    pub next_state: Vec<f32>,
    pub done: bool,
}

/// FIFO ring of transitions with uniform sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.clamp(1, 1 << 16)),
            inserted: 0,
        }
    }

    pub fn push(&mut self, transition: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(transition);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total pushes since creation.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Transition>, AgentError> {
        if batch_size > self.items.len() {
            return Err(AgentError::InsufficientTransitions {
                requested: batch_size,
                available: self.items.len(),
            });
        }
        Ok(index::sample(rng, self.items.len(), batch_size)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

fn stack_states<'a>(rows: impl ExactSizeIterator<Item = &'a [f32]>, dim: usize) -> Array2<f32> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * dim);
    for row in rows {
        flat.extend_from_slice(row);
    }
    Array2::from_shape_vec((n, dim), flat).expect("rows share the state dimension")
}

/// Double-Q targets: the online network picks the next action, the target
/// network scores it.
pub fn ddqn_targets(
    batch: &[&Transition],
    online: &MlpParams<f32>,
    target: &MlpParams<f32>,
    gamma: f64,
) -> Result<Vec<f32>, AgentError> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let dim = online.input_dim();
    if let Some(t) = batch.iter().find(|t| t.next_state.len() != dim) {
        return Err(AgentError::StateDim { expected: dim, got: t.next_state.len() });
    }
    let next = stack_states(batch.iter().map(|t| t.next_state.as_slice()), dim);
    let q_online = online.forward_batch(next.view())?;
    let q_target = target.forward_batch(next.view())?;
    let gamma = gamma as f32;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.done || gamma == 0.0 {
                return t.reward;
            }
            let row = q_online.row(i);
            let best = argmax(row.as_slice().expect("standard layout"));
            t.reward + gamma * q_target[[i, best]]
        })
        .collect())
}

/// One agent: online and target networks, optimizer, replay and counters.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub id: AgentId,
    pub online: MlpParams<f32>,
    pub target: MlpParams<f32>,
    pub opt: OptState<f32>,
    pub buffer: ReplayBuffer,
    pub env_steps: u64,
    pub train_iterations: u64,
    /// Transitions collected since the last federation round.
    pub samples_since_round: u64,
    rng: SimRng,
}

impl AgentState {
    pub fn new(
        id: AgentId,
        layer_dims: &[usize],
        config: &AgentConfig,
        init_seed: u64,
        rng_seed: u64,
    ) -> Result<Self, AgentError> {
        let online = init_params(layer_dims, init_seed)?;
        Ok(Self {
            id,
            target: online.clone(),
            opt: OptState::new(&online, config.optimizer.clone()),
            online,
            buffer: ReplayBuffer::new(config.replay_capacity),
            env_steps: 0,
            train_iterations: 0,
            samples_since_round: 0,
            rng: rng_from_seed(rng_seed),
        })
    }

    /// An agent around existing parameters, e.g. loaded from a model file.
    /// The target network starts as a copy of `online`.
    pub fn from_params(id: AgentId, online: MlpParams<f32>, config: &AgentConfig, rng_seed: u64) -> Self {
        Self {
            id,
            target: online.clone(),
            opt: OptState::new(&online, config.optimizer.clone()),
            online,
            buffer: ReplayBuffer::new(config.replay_capacity),
            env_steps: 0,
            train_iterations: 0,
            samples_since_round: 0,
            rng: rng_from_seed(rng_seed),
        }
    }

    pub fn q_values(&self, state: &[f32]) -> Result<Vec<f32>, AgentError> {
        self.check_state(state)?;
        Ok(self.online.forward(state)?)
    }

    /// Greedy action; touches no state.
    pub fn greedy_action(&self, state: &[f32]) -> Result<usize, AgentError> {
        Ok(argmax(&self.q_values(state)?))
    }

    /// Epsilon-greedy action under the schedule at the current env step.
    /// Returns the action and the epsilon used.
    pub fn act(&mut self, state: &[f32], config: &AgentConfig) -> Result<(usize, f64), AgentError> {
        let epsilon = epsilon_at(&config.epsilon, self.env_steps);
        let q = self.q_values(state)?;
        Ok((select_action(&q, epsilon, &mut self.rng)?, epsilon))
    }

    /// Stores a transition and advances the env-step counter.
    pub fn record(&mut self, transition: Transition) {
        self.buffer.push(transition);
        self.env_steps += 1;
        self.samples_since_round += 1;
    }

    /// Runs one DDQN update if the warmup and cadence gates allow it.
    pub fn train_iteration(&mut self, config: &AgentConfig) -> Result<Option<f32>, AgentError> {
        if self.buffer.len() < config.warmup_transitions || self.env_steps % config.train_every != 0 {
            return Ok(None);
        }
        let batch = self.buffer.sample(config.batch_size, &mut self.rng)?;
        let targets = ddqn_targets(&batch, &self.online, &self.target, config.gamma)?;
        let dim = self.online.input_dim();
        let states = stack_states(batch.iter().map(|t| t.state.as_slice()), dim);
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let max_norm = self.opt.max_grad_norm();
        let (loss, grads) = self.online.loss_and_gradients(states.view(), &actions, &targets, max_norm)?;
        optimizer_step(&mut self.online, &grads, &mut self.opt)?;
        self.train_iterations += 1;
        if self.train_iterations % config.target_sync_period == 0 {
            self.target.clone_from(&self.online);
        }
        Ok(Some(loss))
    }

    fn check_state(&self, state: &[f32]) -> Result<(), AgentError> {
        let expected = self.online.input_dim();
        if state.len() != expected {
            return Err(AgentError::StateDim { expected, got: state.len() });
        }
        Ok(())
    }
}
