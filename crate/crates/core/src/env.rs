//! The slicing environment of one cell.
//!
//! Agents allocate proactively: the action taken at step `t` is a request for
//! the demand that materializes at `t + 1`, and the reward is computed against
//! that next-step demand.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::FieldError;
use crate::seed::{rng_from_seed, SimRng};
use crate::traffic::{cqi_step, demand_at, effective_prb_demand, ChannelState, TrafficProfile};

/// Channel quality every slice starts an episode with.
pub const INITIAL_CQI: u8 = 8;

/// Number of observation features per slice.
pub const OBSERVATION_DIM: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid cell configuration: {0}")]
    Config(#[from] FieldError),
    #[error("request {request} for slice {slice} is outside [0, {capacity}]")]
    RequestOutOfRange { slice: usize, request: u32, capacity: u32 },
    #[error("request {request} for slice {slice} is not a multiple of chunk {chunk}")]
    RequestNotAligned { slice: usize, request: u32, chunk: u32 },
    #[error("action {action} for slice {slice} exceeds max action {max}")]
    ActionOutOfRange { slice: usize, action: usize, max: usize },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("unknown slice {0}")]
    UnknownSlice(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellConfig {
    pub cell_id: u16,
    pub capacity_prb: u32,
    pub chunk_prb: u32,
    pub num_slices: usize,
    pub horizon_steps: u32,
    /// Over-provisioning weight.
    pub reward_beta: f64,
    /// Under-provisioning weight.
    pub reward_lambda: f64,
    /// Shared congestion penalty.
    pub reward_kappa: f64,
    /// Per-step probability that a slice's CQI moves by one.
    pub cqi_drift_prob: f64,
    /// One profile per slice; left empty, the default profiles are used.
    #[serde(default)]
    pub slices: Vec<TrafficProfile>,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            cell_id: 0,
            capacity_prb: 100,
            chunk_prb: 10,
            num_slices: 3,
            horizon_steps: 1000,
            reward_beta: 2.0,
            reward_lambda: 1.0,
            reward_kappa: 0.5,
            cqi_drift_prob: 0.005,
            slices: default_profiles(3),
        }
    }
}

/// The three eMBB traffic shapes used by default, cycled when more slices
/// are requested.
pub fn default_profiles(num_slices: usize) -> Vec<TrafficProfile> {
    let base = [
        TrafficProfile::burst_poisson(1.5, 0.02, 10.0, 0.5),
        TrafficProfile { phase_steps: 200, ..TrafficProfile::sinusoid(22.75, 19.5, 400, 0.5) },
        TrafficProfile::square_wave(17.0, 15.0, 400, 0.5),
    ];
    (0..num_slices).map(|i| base[i % base.len()].clone()).collect()
}

impl CellConfig {
    /// Number of discrete actions per agent: `0..=C/chunk`.
    pub fn num_actions(&self) -> usize {
        (self.capacity_prb / self.chunk_prb.max(1)) as usize + 1
    }

    /// Fills an empty profile list with the defaults.
    pub fn normalized(mut self) -> Self {
        if self.slices.is_empty() {
            self.slices = default_profiles(self.num_slices);
        }
        self
    }

    /// Validates every invariant; field paths are relative to the cell.
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.capacity_prb == 0 {
            return Err(FieldError::new("capacity_prb", "must be positive"));
        }
        if self.chunk_prb == 0 {
            return Err(FieldError::new("chunk_prb", "must be positive"));
        }
        if self.capacity_prb % self.chunk_prb != 0 {
            return Err(FieldError::new(
                "chunk_prb",
                format!(
                    "chunk must divide capacity ({} does not divide {})",
                    self.chunk_prb, self.capacity_prb
                ),
            ));
        }
        if self.num_slices == 0 {
            return Err(FieldError::new("num_slices", "must be at least 1"));
        }
        if self.num_slices > usize::from(u16::MAX) {
            return Err(FieldError::new("num_slices", "too many slices"));
        }
        if self.horizon_steps == 0 {
            return Err(FieldError::new("horizon_steps", "must be at least 1"));
        }
        for (name, value) in [
            ("reward_beta", self.reward_beta),
            ("reward_lambda", self.reward_lambda),
            ("reward_kappa", self.reward_kappa),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(FieldError::new(name, "must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.cqi_drift_prob) {
            return Err(FieldError::new("cqi_drift_prob", "must lie in [0, 1]"));
        }
        if self.slices.len() != self.num_slices {
            return Err(FieldError::new(
                "slices",
                format!("{} profiles given for {} slices", self.slices.len(), self.num_slices),
            ));
        }
        for (i, profile) in self.slices.iter().enumerate() {
            profile
                .check(self.capacity_prb)
                .map_err(|(field, msg)| FieldError::new(format!("slices[{i}].{field}"), msg))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceState {
    pub base_demand: f64,
    /// Effective demand in PRBs, in `[0, C]`.
    pub demand: u32,
    pub channel: ChannelState,
    /// Allocation granted at the previous step.
    pub prev_alloc: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub t: u64,
    pub slices: Vec<SliceState>,
    pub rng: SimRng,
}

/// Normalized partial view of one slice; every component lies in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub demand_norm: f64,
    pub prev_alloc_norm: f64,
    pub gap_norm: f64,
    pub cqi_norm: f64,
    pub residual_norm: f64,
}

impl Observation {
    pub fn to_array(&self) -> [f64; OBSERVATION_DIM] {
        [
            self.demand_norm,
            self.prev_alloc_norm,
            self.gap_norm,
            self.cqi_norm,
            self.residual_norm,
        ]
    }

    /// Network input vector.
    pub fn features(&self) -> [f32; OBSERVATION_DIM] {
        self.to_array().map(|x| x as f32)
    }
}

/// One row of the KPI log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpiRecord {
    pub step: u64,
    pub cell_id: u16,
    pub slice_id: u16,
    pub demand_prb: u32,
    pub requested_prb: u32,
    pub alloc_prb: u32,
    /// `alloc - demand`.
    pub gap_prb: i64,
    pub abs_gap_prb: u64,
    pub reward: f64,
    pub cqi: u8,
    pub epsilon: f64,
    pub congestion_flag: bool,
}

/// Scales a conflicting set of requests down to capacity.
///
/// Requests that fit are returned untouched. Otherwise each request is scaled
/// proportionally and floored to a chunk multiple, and the leftover capacity is
/// handed out one chunk at a time in ascending slice order, never beyond a
/// slice's own request.
pub fn arbitrate(requests: &[u32], capacity: u32, chunk: u32) -> Result<Vec<u32>, EnvError> {
    for (slice, &request) in requests.iter().enumerate() {
        if request > capacity {
            return Err(EnvError::RequestOutOfRange { slice, request, capacity });
        }
        if chunk == 0 || request % chunk != 0 {
            return Err(EnvError::RequestNotAligned { slice, request, chunk });
        }
    }
    let total: u64 = requests.iter().map(|&r| u64::from(r)).sum();
    if total <= u64::from(capacity) {
        return Ok(requests.to_vec());
    }
    let chunk64 = u64::from(chunk);
    let mut alloc: Vec<u32> = requests
        .iter()
        .map(|&r| ((u64::from(r) * u64::from(capacity) / total) / chunk64 * chunk64) as u32)
        .collect();
    let mut leftover = capacity - alloc.iter().sum::<u32>();
    while leftover >= chunk {
        let mut granted = false;
        for (a, &r) in alloc.iter_mut().zip(requests) {
            if leftover < chunk {
                break;
            }
            if *a + chunk <= r {
                *a += chunk;
                leftover -= chunk;
                granted = true;
            }
        }
        if !granted {
            break;
        }
    }
    Ok(alloc)
}

/// Joint reward of one step. `requests` decide congestion; `allocations`
/// are the arbitrated grants.
pub fn compute_rewards(
    demands: &[u32],
    allocations: &[u32],
    requests: &[u32],
    config: &CellConfig,
) -> Vec<f64> {
    let capacity = f64::from(config.capacity_prb);
    let congested = is_congested(requests, config.capacity_prb);
    demands
        .iter()
        .zip(allocations)
        .map(|(&d, &a)| {
            let r = if a >= d {
                1.0 - config.reward_beta * f64::from(a - d) / capacity
            } else {
                -config.reward_lambda * f64::from(d - a) / f64::from(d.max(1))
            };
            if congested {
                r - config.reward_kappa
            } else {
                r
            }
        })
        .collect()
}

fn is_congested(requests: &[u32], capacity: u32) -> bool {
    requests.iter().map(|&r| u64::from(r)).sum::<u64>() > u64::from(capacity)
}

/// Builds the observation of `slice_id` from the current state.
pub fn observe(state: &EnvState, config: &CellConfig, slice_id: usize) -> Result<Observation, EnvError> {
    let slice = state.slices.get(slice_id).ok_or(EnvError::UnknownSlice(slice_id))?;
    let c = f64::from(config.capacity_prb);
    let d = f64::from(slice.demand);
    let prev = f64::from(slice.prev_alloc);
    let others: u64 = state
        .slices
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != slice_id)
        .map(|(_, s)| u64::from(s.prev_alloc))
        .sum();
    let unit = |x: f64| x.clamp(0.0, 1.0);
    Ok(Observation {
        demand_norm: unit(d / c),
        prev_alloc_norm: unit(prev / c),
        gap_norm: unit((prev - d + c) / (2.0 * c)),
        cqi_norm: unit(f64::from(slice.channel.cqi - 1) / 14.0),
        residual_norm: unit((c - others as f64) / c),
    })
}

/// Everything a single call to [`CellEnv::step`] produces.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub records: Vec<KpiRecord>,
    /// Horizon reached. Transitions still carry `done = false`.
    pub done: bool,
}

/// One cell: a validated configuration plus its evolving state.
#[derive(Clone, Debug)]
pub struct CellEnv {
    config: CellConfig,
    state: EnvState,
}

struct Draw {
    channel: ChannelState,
    base: f64,
    demand: u32,
}

fn draw_slices<R: Rng>(config: &CellConfig, channels: &[ChannelState], t: u64, rng: &mut R) -> Vec<Draw> {
    config
        .slices
        .iter()
        .zip(channels)
        .map(|(profile, &channel)| {
            let channel = cqi_step(channel, rng);
            let base = demand_at(profile, t, rng);
            Draw {
                channel,
                base,
                demand: effective_prb_demand(base, channel.cqi, config.capacity_prb),
            }
        })
        .collect()
}

impl CellEnv {
    /// Starts an episode at `t = 0`. Deterministic in `(config, seed)`.
    pub fn reset(config: CellConfig, seed: u64) -> Result<(Self, Vec<Observation>), EnvError> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let n = config.num_slices as u32;
        let initial_alloc = config.capacity_prb / n / config.chunk_prb * config.chunk_prb;
        let slices = config
            .slices
            .iter()
            .map(|profile| {
                let channel = ChannelState::new(INITIAL_CQI, config.cqi_drift_prob);
                let base = demand_at(profile, 0, &mut rng);
                SliceState {
                    base_demand: base,
                    demand: effective_prb_demand(base, channel.cqi, config.capacity_prb),
                    channel,
                    prev_alloc: initial_alloc,
                }
            })
            .collect();
        let env = Self {
            config,
            state: EnvState { t: 0, slices, rng },
        };
        let obs = env.observations();
        Ok((env, obs))
    }

    pub fn config(&self) -> &CellConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.config.num_slices)
            .map(|i| observe(&self.state, &self.config, i).expect("slice index in range"))
            .collect()
    }

    /// Effective demands of the next step, without disturbing the state.
    /// Only the oracle baseline uses this.
    pub fn peek_next_demands(&self) -> Vec<u32> {
        let mut rng = self.state.rng.clone();
        let channels: Vec<ChannelState> = self.state.slices.iter().map(|s| s.channel).collect();
        draw_slices(&self.config, &channels, self.state.t + 1, &mut rng)
            .into_iter()
            .map(|d| d.demand)
            .collect()
    }

    /// Maps one action index per slice to requests, arbitrates, advances time
    /// and scores the grants against the new demands.
    pub fn step(&mut self, joint_action: &[usize]) -> Result<StepOutcome, EnvError> {
        let n = self.config.num_slices;
        if joint_action.len() != n {
            return Err(EnvError::ActionCount { expected: n, got: joint_action.len() });
        }
        let max = self.config.num_actions() - 1;
        let requests = joint_action
            .iter()
            .enumerate()
            .map(|(slice, &action)| {
                if action > max {
                    Err(EnvError::ActionOutOfRange { slice, action, max })
                } else {
                    Ok(action as u32 * self.config.chunk_prb)
                }
            })
            .collect::<Result<Vec<u32>, _>>()?;
        let allocations = arbitrate(&requests, self.config.capacity_prb, self.config.chunk_prb)?;
        let congested = is_congested(&requests, self.config.capacity_prb);

        let decision_step = self.state.t;
        let next_t = decision_step + 1;
        let channels: Vec<ChannelState> = self.state.slices.iter().map(|s| s.channel).collect();
        let draws = draw_slices(&self.config, &channels, next_t, &mut self.state.rng);
        for ((slice, draw), &alloc) in self.state.slices.iter_mut().zip(draws).zip(&allocations) {
            slice.channel = draw.channel;
            slice.base_demand = draw.base;
            slice.demand = draw.demand;
            slice.prev_alloc = alloc;
        }
        self.state.t = next_t;

        let demands: Vec<u32> = self.state.slices.iter().map(|s| s.demand).collect();
        let rewards = compute_rewards(&demands, &allocations, &requests, &self.config);
        let records = (0..n)
            .map(|i| {
                let gap = i64::from(allocations[i]) - i64::from(demands[i]);
                KpiRecord {
                    step: decision_step,
                    cell_id: self.config.cell_id,
                    slice_id: i as u16,
                    demand_prb: demands[i],
                    requested_prb: requests[i],
                    alloc_prb: allocations[i],
                    gap_prb: gap,
                    abs_gap_prb: gap.unsigned_abs(),
                    reward: rewards[i],
                    cqi: self.state.slices[i].channel.cqi,
                    epsilon: 0.0,
                    congestion_flag: congested,
                }
            })
            .collect();
        Ok(StepOutcome {
            observations: self.observations(),
            rewards,
            records,
            done: next_t >= u64::from(self.config.horizon_steps),
        })
    }
}
