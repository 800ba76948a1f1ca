use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};

use crate::agent::AgentState;
use crate::config::ExperimentConfig;
use crate::env::{CellConfig, CellEnv, Observation};
use crate::parallel::{self, Execution};
use crate::seed::{indexed_seed, rng_from_seed, sub_seed, SimRng, StreamTag};
use crate::telemetry::format_sig6;

use super::baseline::{oracle_action, static_equal_action};
use super::{BaselineKind, HarnessError};

/// What chooses the joint action during evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    /// Greedy trained agents, `agents[cell_index][slice_id]`.
    Trained(&'a [Vec<AgentState>]),
    Baseline(BaselineKind),
}

impl Policy<'_> {
    pub fn name(&self) -> String {
        match self {
            Policy::Trained(_) => "trained".into(),
            Policy::Baseline(kind) => kind.to_string(),
        }
    }

    fn actions(
        &self,
        cell_index: usize,
        env: &CellEnv,
        obs: &[Observation],
        rng: &mut SimRng,
    ) -> Result<Vec<usize>, HarnessError> {
        let cfg = env.config();
        Ok(match self {
            Policy::Trained(agents) => agents[cell_index]
                .iter()
                .zip(obs)
                .map(|(agent, o)| {
                    agent.greedy_action(&o.features()).map_err(|source| HarnessError::Agent {
                        agent: agent.id,
                        step: env.state().t,
                        source,
                    })
                })
                .collect::<Result<_, _>>()?,
            Policy::Baseline(BaselineKind::Random) => {
                (0..cfg.num_slices).map(|_| rng.random_range(0..cfg.num_actions())).collect()
            }
            Policy::Baseline(BaselineKind::StaticEqual) => {
                vec![static_equal_action(cfg.capacity_prb, cfg.chunk_prb, cfg.num_slices); cfg.num_slices]
            }
            Policy::Baseline(BaselineKind::Oracle) => env
                .peek_next_demands()
                .into_iter()
                .map(|d| oracle_action(d, cfg.chunk_prb))
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub cell_id: u16,
    pub slice_id: u16,
    pub mean_reward: f64,
    /// Mean of `alloc - demand`.
    pub mean_gap_prb: f64,
    pub mean_abs_gap_prb: f64,
    /// Fraction of steps with `alloc > demand`.
    pub over_provision_ratio: f64,
    /// Fraction of steps with `alloc < demand`.
    pub sla_violation_ratio: f64,
    pub mean_alloc_prb: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell_id: u16,
    pub mean_reward: f64,
    pub mean_abs_gap_prb: f64,
    /// Jain index over the slices' mean allocations; absent when every
    /// slice was allocated nothing.
    pub jain_fairness: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub episodes: u32,
    pub slices: Vec<SliceReport>,
    pub cells: Vec<CellReport>,
    pub mean_reward: f64,
    pub mean_gap_prb: f64,
    pub mean_abs_gap_prb: f64,
    pub over_provision_ratio: f64,
    pub sla_violation_ratio: f64,
    pub mean_alloc_prb: f64,
}

impl EvalReport {
    /// Mean reward of the slices with the given id, across cells.
    pub fn slice_group_reward(&self, slice_id: u16) -> Option<f64> {
        let rewards: Vec<f64> = self
            .slices
            .iter()
            .filter(|s| s.slice_id == slice_id)
            .map(|s| s.mean_reward)
            .collect();
        (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64)
    }

    /// One row per `(cell, slice)`.
    pub fn write_csv<W: Write>(&self, writer: W) -> io::Result<()> {
        let mut csv = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        csv.write_record([
            "policy",
            "cell_id",
            "slice_id",
            "mean_reward",
            "mean_gap_prb",
            "mean_abs_gap_prb",
            "over_provision_ratio",
            "sla_violation_ratio",
            "mean_alloc_prb",
            "steps",
        ])?;
        for s in &self.slices {
            csv.write_record([
                self.policy.clone(),
                s.cell_id.to_string(),
                s.slice_id.to_string(),
                format_sig6(s.mean_reward),
                format_sig6(s.mean_gap_prb),
                format_sig6(s.mean_abs_gap_prb),
                format_sig6(s.over_provision_ratio),
                format_sig6(s.sla_violation_ratio),
                format_sig6(s.mean_alloc_prb),
                s.steps.to_string(),
            ])?;
        }
        csv.flush()
    }
}

/// `(Σx)² / (n Σx²)`.
pub fn jain_fairness(values: &[f64]) -> Result<f64, HarnessError> {
    let sum: f64 = values.iter().sum();
    let sum_sq: f64 = values.iter().map(|x| x * x).sum();
    if values.is_empty() || sum_sq == 0.0 {
        return Err(HarnessError::AllZero);
    }
    let n = values.len() as f64;
    Ok((sum * sum / (n * sum_sq)).clamp(1.0 / n, 1.0))
}

#[derive(Clone, Copy, Default)]
struct Accum {
    reward: f64,
    gap: f64,
    abs_gap: f64,
    over: u64,
    under: u64,
    alloc: f64,
    steps: u64,
}

impl Accum {
    fn merge(&mut self, o: &Accum) {
        self.reward += o.reward;
        self.gap += o.gap;
        self.abs_gap += o.abs_gap;
        self.over += o.over;
        self.under += o.under;
        self.alloc += o.alloc;
        self.steps += o.steps;
    }

    fn mean(&self, x: f64) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            x / self.steps as f64
        }
    }
}

fn run_episode(
    policy: &Policy,
    config: &ExperimentConfig,
    cell_index: usize,
    cell: &CellConfig,
    episode: u64,
) -> Result<Vec<Accum>, HarnessError> {
    let cell_id = cell.cell_id;
    let env_seed = indexed_seed(sub_seed(config.seed, u64::from(cell_id), 0, StreamTag::Eval), episode);
    let mut rng = rng_from_seed(sub_seed(config.seed, u64::from(cell_id), episode, StreamTag::Policy));
    let (mut env, mut obs) =
        CellEnv::reset(cell.clone(), env_seed).map_err(|source| HarnessError::Env { cell_id, step: 0, source })?;
    let mut acc = vec![Accum::default(); cell.num_slices];
    loop {
        let actions = policy.actions(cell_index, &env, &obs, &mut rng)?;
        let step = env.state().t;
        let out = env.step(&actions).map_err(|source| HarnessError::Env { cell_id, step, source })?;
        for (a, r) in acc.iter_mut().zip(&out.records) {
            a.reward += r.reward;
            a.gap += r.gap_prb as f64;
            a.abs_gap += r.abs_gap_prb as f64;
            a.over += u64::from(r.gap_prb > 0);
            a.under += u64::from(r.gap_prb < 0);
            a.alloc += f64::from(r.alloc_prb);
            a.steps += 1;
        }
        obs = out.observations;
        if out.done {
            return Ok(acc);
        }
    }
}

pub fn evaluate_policy(policy: Policy, config: &ExperimentConfig, episodes: u32) -> Result<EvalReport, HarnessError> {
    evaluate_policy_with(policy, config, episodes, Execution::default())
}

/// Greedy evaluation on episode seeds disjoint from training. Agents are only
/// read.
pub fn evaluate_policy_with(
    policy: Policy,
    config: &ExperimentConfig,
    episodes: u32,
    exec: Execution,
) -> Result<EvalReport, HarnessError> {
    config.validate()?;
    if let Policy::Trained(agents) = policy {
        if agents.len() != config.cells.len() {
            return Err(HarnessError::AgentLayout(format!(
                "{} agent cells for {} configured cells",
                agents.len(),
                config.cells.len()
            )));
        }
        for (cell, cell_agents) in config.cells.iter().zip(agents) {
            if cell_agents.len() != cell.num_slices {
                return Err(HarnessError::AgentLayout(format!(
                    "cell {} has {} agents for {} slices",
                    cell.cell_id,
                    cell_agents.len(),
                    cell.num_slices
                )));
            }
            if let Some(agent) = cell_agents.iter().find(|a| a.online.output_dim() != cell.num_actions()) {
                return Err(HarnessError::AgentLayout(format!(
                    "agent {:?} has {} actions, cell {} needs {}",
                    agent.id,
                    agent.online.output_dim(),
                    cell.cell_id,
                    cell.num_actions()
                )));
            }
        }
    }

    let jobs: Vec<(usize, u64)> = (0..config.cells.len())
        .flat_map(|c| (0..u64::from(episodes)).map(move |e| (c, e)))
        .collect();
    let results = parallel::map_indices(exec, jobs.len(), |j| {
        let (c, e) = jobs[j];
        run_episode(&policy, config, c, &config.cells[c], e)
    });

    let mut per_cell: Vec<Vec<Accum>> = config.cells.iter().map(|c| vec![Accum::default(); c.num_slices]).collect();
    for ((c, _), result) in jobs.iter().zip(results) {
        for (total, part) in per_cell[*c].iter_mut().zip(result?) {
            total.merge(&part);
        }
    }

    let mut slices = Vec::new();
    let mut cells = Vec::new();
    let mut overall = Accum::default();
    for (cell, accs) in config.cells.iter().zip(&per_cell) {
        let mut cell_total = Accum::default();
        let mut mean_allocs = Vec::with_capacity(accs.len());
        for (s, a) in accs.iter().enumerate() {
            slices.push(SliceReport {
                cell_id: cell.cell_id,
                slice_id: s as u16,
                mean_reward: a.mean(a.reward),
                mean_gap_prb: a.mean(a.gap),
                mean_abs_gap_prb: a.mean(a.abs_gap),
                over_provision_ratio: a.mean(a.over as f64),
                sla_violation_ratio: a.mean(a.under as f64),
                mean_alloc_prb: a.mean(a.alloc),
                steps: a.steps,
            });
            mean_allocs.push(a.mean(a.alloc));
            cell_total.merge(a);
        }
        cells.push(CellReport {
            cell_id: cell.cell_id,
            mean_reward: cell_total.mean(cell_total.reward),
            mean_abs_gap_prb: cell_total.mean(cell_total.abs_gap),
            jain_fairness: jain_fairness(&mean_allocs).ok(),
        });
        overall.merge(&cell_total);
    }
    Ok(EvalReport {
        policy: policy.name(),
        episodes,
        slices,
        cells,
        mean_reward: overall.mean(overall.reward),
        mean_gap_prb: overall.mean(overall.gap),
        mean_abs_gap_prb: overall.mean(overall.abs_gap),
        over_provision_ratio: overall.mean(overall.over as f64),
        sla_violation_ratio: overall.mean(overall.under as f64),
        mean_alloc_prb: overall.mean(overall.alloc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_cells;
    use crate::traffic::TrafficProfile;
    use proptest::prelude::*;

    #[test]
    fn jain_examples() {
        assert!((jain_fairness(&[30.0, 30.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((jain_fairness(&[100.0, 0.0, 0.0]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((jain_fairness(&[50.0, 50.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(jain_fairness(&[0.0, 0.0]), Err(HarnessError::AllZero));
    }

    proptest! {
        #[test]
        fn jain_bounds(values in prop::collection::vec(0.0..100.0f64, 1..8)) {
            prop_assume!(values.iter().any(|&v| v > 0.0));
            let j = jain_fairness(&values).unwrap();
            let n = values.len() as f64;
            prop_assert!(j >= 1.0 / n - 1e-12 && j <= 1.0 + 1e-12);
        }
    }

    fn config_with(profiles: Vec<TrafficProfile>, drift: f64) -> ExperimentConfig {
        let mut cells = default_cells(1);
        cells[0].num_slices = profiles.len();
        cells[0].slices = profiles;
        cells[0].cqi_drift_prob = drift;
        cells[0].horizon_steps = 200;
        ExperimentConfig { cells, ..ExperimentConfig::default() }
    }

    #[test]
    fn zero_policy_violates_every_step() {
        // action 0 is what an untrained network chooses when all outputs tie.
        let config = config_with(vec![TrafficProfile::sinusoid(20.0, 5.0, 50, 0.0); 3], 0.0);
        let cell = &config.cells[0];
        let mut agents = super::super::training::new_agents(&config, cell).unwrap();
        for agent in &mut agents {
            agent.online = crate::neural::MlpParams::zeros(&agent.online.dims()).unwrap();
        }
        let trained = vec![agents];
        let report = evaluate_policy(Policy::Trained(&trained), &config, 2).unwrap();
        assert_eq!(report.sla_violation_ratio, 1.0);
        assert_eq!(report.mean_alloc_prb, 0.0);
        assert!(report.cells[0].jain_fairness.is_none());
        assert!((report.mean_reward + 1.0).abs() < 1e-12);
    }

    #[test]
    fn static_split_on_matching_demand_scores_high() {
        // effective demand at the initial CQI is ceil(b / 0.65); pick b so that
        // it lands between 21 and 30 PRBs.
        let config = config_with(vec![TrafficProfile::sinusoid(19.0, 0.0, 1, 0.0); 3], 0.0);
        let report = evaluate_policy(Policy::Baseline(BaselineKind::StaticEqual), &config, 2).unwrap();
        for s in &report.slices {
            assert!(s.mean_alloc_prb == 30.0);
            assert!(s.mean_abs_gap_prb < 10.0);
            assert!(s.mean_reward >= 0.8, "{}", s.mean_reward);
        }
        assert_eq!(report.cells[0].jain_fairness, Some(1.0));
    }

    #[test]
    fn oracle_bound_on_feasible_demand() {
        let config = config_with(
            vec![
                TrafficProfile::sinusoid(10.0, 5.0, 40, 0.5),
                TrafficProfile::square_wave(12.0, 4.0, 60, 0.5),
                TrafficProfile::burst_poisson(6.0, 0.0, 0.0, 0.5),
            ],
            0.0,
        );
        let report = evaluate_policy(Policy::Baseline(BaselineKind::Oracle), &config, 3).unwrap();
        assert_eq!(report.sla_violation_ratio, 0.0);
        assert!(report.mean_abs_gap_prb < 10.0);
        assert!(report.mean_reward >= 0.8, "{}", report.mean_reward);
    }

    #[test]
    fn evaluation_is_deterministic_and_mode_independent() {
        let config = ExperimentConfig { cells: default_cells(2), ..ExperimentConfig::default() };
        let a = evaluate_policy_with(Policy::Baseline(BaselineKind::Random), &config, 2, Execution::Sequential).unwrap();
        let b = evaluate_policy_with(Policy::Baseline(BaselineKind::Random), &config, 2, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        for s in &a.slices {
            assert_eq!(s.steps, 2 * 1000);
            assert!((0.0..=1.0).contains(&s.over_provision_ratio));
            assert!((0.0..=1.0).contains(&s.sla_violation_ratio));
        }
    }

    #[test]
    fn trained_layout_is_checked() {
        let config = ExperimentConfig { cells: default_cells(2), ..ExperimentConfig::default() };
        let empty: Vec<Vec<AgentState>> = vec![];
        assert!(matches!(
            evaluate_policy(Policy::Trained(&empty), &config, 1),
            Err(HarnessError::AgentLayout(_))
        ));
    }

    #[test]
    fn report_csv_has_a_row_per_slice() {
        let config = ExperimentConfig { cells: default_cells(1), ..ExperimentConfig::default() };
        let r = evaluate_policy(Policy::Baseline(BaselineKind::StaticEqual), &config, 1).unwrap();
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().starts_with("static,0,0,"));
    }
}
