use crate::agent::{AgentConfig, AgentState, Transition};
use crate::config::ExperimentConfig;
use crate::env::{CellConfig, CellEnv, KpiRecord, Observation, OBSERVATION_DIM};
use crate::federation::{AgentId, FederationGroup, RoundSummary};
use crate::parallel::{self, Execution};
use crate::seed::{indexed_seed, sub_seed, StreamTag};

use super::HarnessError;

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    /// `agents[cell_index][slice_id]`.
    pub agents: Vec<Vec<AgentState>>,
    /// Sorted by `(step, cell_id, slice_id)`.
    pub kpis: Vec<KpiRecord>,
    /// Federation aggregates in the order they were produced.
    pub rounds: Vec<RoundSummary>,
}

pub(crate) fn new_agents(config: &ExperimentConfig, cell: &CellConfig) -> Result<Vec<AgentState>, HarnessError> {
    let dims = config.agent.layer_dims(OBSERVATION_DIM, cell.num_actions());
    (0..cell.num_slices)
        .map(|s| {
            let id = AgentId { cell_id: cell.cell_id, slice_id: s as u16 };
            // same initial network for a slice in every cell
            let init_seed = sub_seed(config.seed, 0, s as u64, StreamTag::Init);
            let rng_seed = sub_seed(config.seed, u64::from(cell.cell_id), s as u64, StreamTag::Agent);
            AgentState::new(id, &dims, &config.agent, init_seed, rng_seed)
                .map_err(|source| HarnessError::Agent { agent: id, step: 0, source })
        })
        .collect()
}

struct CellRun {
    env: CellEnv,
    agents: Vec<AgentState>,
    obs: Vec<Observation>,
    episode: u64,
    seed_base: u64,
}

impl CellRun {
    fn start(config: &ExperimentConfig, cell: &CellConfig) -> Result<Self, HarnessError> {
        let seed_base = sub_seed(config.seed, u64::from(cell.cell_id), 0, StreamTag::Env);
        let (env, obs) = CellEnv::reset(cell.clone(), indexed_seed(seed_base, 0))
            .map_err(|source| HarnessError::Env { cell_id: cell.cell_id, step: 0, source })?;
        Ok(Self {
            env,
            agents: new_agents(config, cell)?,
            obs,
            episode: 0,
            seed_base,
        })
    }

    fn run(&mut self, steps: std::ops::Range<u64>, agent_cfg: &AgentConfig) -> Result<Vec<KpiRecord>, HarnessError> {
        let n = self.agents.len();
        let mut log = Vec::with_capacity(n * (steps.end - steps.start) as usize);
        let cell_id = self.env.config().cell_id;
        for step in steps {
            let mut actions = Vec::with_capacity(n);
            let mut epsilons = Vec::with_capacity(n);
            for (agent, obs) in self.agents.iter_mut().zip(&self.obs) {
                let (a, eps) = agent
                    .act(&obs.features(), agent_cfg)
                    .map_err(|source| HarnessError::Agent { agent: agent.id, step, source })?;
                actions.push(a);
                epsilons.push(eps);
            }
            let out = self
                .env
                .step(&actions)
                .map_err(|source| HarnessError::Env { cell_id, step, source })?;
            for (i, agent) in self.agents.iter_mut().enumerate() {
                agent.record(Transition {
                    state: self.obs[i].features().to_vec(),
                    action: actions[i],
                    reward: out.rewards[i] as f32,
                    next_state: out.observations[i].features().to_vec(),
                    done: false,
                });
                agent
                    .train_iteration(agent_cfg)
                    .map_err(|source| HarnessError::Agent { agent: agent.id, step, source })?;
            }
            log.extend(out.records.into_iter().zip(&epsilons).map(|(mut r, &eps)| {
                r.step = step;
                r.epsilon = eps;
                r
            }));
            self.obs = out.observations;
            if out.done {
                self.episode += 1;
                let (env, obs) = CellEnv::reset(self.env.config().clone(), indexed_seed(self.seed_base, self.episode))
                    .map_err(|source| HarnessError::Env { cell_id, step, source })?;
                self.env = env;
                self.obs = obs;
            }
        }
        Ok(log)
    }
}

pub fn run_training(config: &ExperimentConfig) -> Result<TrainingOutcome, HarnessError> {
    run_training_with(config, Execution::default())
}

/// The training loop. Cells advance independently between federation
/// rounds, which act as barriers; `exec` only decides whether cells run on
/// one thread or many, never the result.
pub fn run_training_with(config: &ExperimentConfig, exec: Execution) -> Result<TrainingOutcome, HarnessError> {
    config.validate()?;
    let mut cells = config
        .cells
        .iter()
        .map(|cell| CellRun::start(config, cell))
        .collect::<Result<Vec<_>, _>>()?;

    let fed = &config.federation;
    let mut groups: Vec<FederationGroup> = if fed.enabled {
        (0..config.cells[0].num_slices)
            .map(|s| {
                let members = config
                    .cells
                    .iter()
                    .map(|c| AgentId { cell_id: c.cell_id, slice_id: s as u16 })
                    .collect();
                FederationGroup::new(s as u16, members, fed.period_steps)
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut kpis = Vec::new();
    let mut rounds = Vec::new();
    let mut start = 0;
    while start < config.train_steps {
        let end = if fed.enabled {
            ((start / fed.period_steps + 1) * fed.period_steps).min(config.train_steps)
        } else {
            config.train_steps
        };
        let logs = parallel::map_mut(exec, &mut cells, |cell| cell.run(start..end, &config.agent));
        for log in logs {
            kpis.extend(log?);
        }
        if fed.enabled && end % fed.period_steps == 0 {
            for group in &mut groups {
                let slice = usize::from(group.slice_id);
                let mut members: Vec<&mut AgentState> = cells.iter_mut().map(|c| &mut c.agents[slice]).collect();
                let summary = group
                    .run_round(&mut members, fed.weighting)
                    .map_err(|source| HarnessError::Federation { slice_id: group.slice_id, step: end, source })?;
                rounds.push(summary);
            }
        }
        start = end;
    }
    kpis.sort_by_key(|r| (r.step, r.cell_id, r.slice_id));
    Ok(TrainingOutcome {
        agents: cells.into_iter().map(|c| c.agents).collect(),
        kpis,
        rounds,
    })
}
