use serde::Serialize;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use fedslice::federation::{deserialize_model, serialize_model, AgentId, ModelSnapshot};
use fedslice::harness::{evaluate_policy, run_training, EvalReport, Policy, TrainingOutcome};
use fedslice::seed::{sub_seed, StreamTag};
use fedslice::telemetry::export_kpi_csv;
use fedslice::{parse_config, AgentState, BaselineKind, ExperimentConfig, KpiRecord};

use crate::output::StagedDir;
use crate::Command;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime(err: impl fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut config = match path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, seed, out, steps } => {
            let mut config = load_config(config.as_deref(), seed)?;
            if let Some(steps) = steps {
                config.train_steps = steps;
            }
            train(&config, &out)
        }
        Command::Eval { models, config, out, seed, episodes } => {
            let config = load_config(config.as_deref(), seed)?;
            eval(&config, &models, &out, episodes.unwrap_or(config.eval_episodes))
        }
        Command::Baseline { kind, config, out, seed, episodes } => {
            let config = load_config(config.as_deref(), seed)?;
            let kind: BaselineKind = kind.parse().map_err(runtime)?;
            baseline(&config, kind, &out, episodes.unwrap_or(config.eval_episodes))
        }
        Command::FedDemo { config, out, seed, steps } => {
            let mut config = load_config(config.as_deref(), seed)?;
            if let Some(steps) = steps {
                config.train_steps = steps;
            }
            fed_demo(&config, &out)
        }
        Command::InspectModel { file } => inspect(&file),
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

#[derive(Serialize)]
struct SliceSummary {
    cell_id: u16,
    slice_id: u16,
    mean_reward: f64,
    mean_abs_gap_prb: f64,
}

#[derive(Serialize)]
struct RunSummary {
    mean_reward: f64,
    slices: Vec<SliceSummary>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    started_at: String,
    finished_at: String,
    config: &'a ExperimentConfig,
    artifacts: Vec<String>,
    summary: RunSummary,
}

fn summarize_kpis(records: &[KpiRecord]) -> RunSummary {
    let mut keys: Vec<(u16, u16)> = records.iter().map(|r| (r.cell_id, r.slice_id)).collect();
    keys.sort_unstable();
    keys.dedup();
    let slices = keys
        .into_iter()
        .map(|(cell_id, slice_id)| {
            let rows: Vec<&KpiRecord> = records
                .iter()
                .filter(|r| r.cell_id == cell_id && r.slice_id == slice_id)
                .collect();
            let n = rows.len() as f64;
            SliceSummary {
                cell_id,
                slice_id,
                mean_reward: rows.iter().map(|r| r.reward).sum::<f64>() / n,
                mean_abs_gap_prb: rows.iter().map(|r| r.abs_gap_prb as f64).sum::<f64>() / n,
            }
        })
        .collect();
    let mean_reward = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.reward).sum::<f64>() / records.len() as f64
    };
    RunSummary { mean_reward, slices }
}

fn summarize_report(report: &EvalReport) -> RunSummary {
    RunSummary {
        mean_reward: report.mean_reward,
        slices: report
            .slices
            .iter()
            .map(|s| SliceSummary {
                cell_id: s.cell_id,
                slice_id: s.slice_id,
                mean_reward: s.mean_reward,
                mean_abs_gap_prb: s.mean_abs_gap_prb,
            })
            .collect(),
    }
}

fn write_manifest(
    dir: &mut StagedDir,
    command: &str,
    config: &ExperimentConfig,
    started_at: String,
    summary: RunSummary,
) -> Result<(), CliError> {
    let manifest = Manifest {
        command,
        seed: config.seed,
        started_at,
        finished_at: now(),
        config,
        artifacts: dir.artifacts().to_vec(),
        summary,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    dir.write("manifest.json", text).map_err(runtime)
}

fn model_name(id: AgentId) -> String {
    format!("models/agent_c{}_s{}.fdrl", id.cell_id, id.slice_id)
}

fn write_training(dir: &mut StagedDir, outcome: &TrainingOutcome, kpi_name: &str, models: bool) -> Result<(), CliError> {
    let kpi_path = dir.file(kpi_name).map_err(runtime)?;
    export_kpi_csv(&outcome.kpis, &kpi_path).map_err(runtime)?;
    if models {
        for agent in outcome.agents.iter().flatten() {
            dir.write(&model_name(agent.id), serialize_model(&ModelSnapshot::of_agent(agent)))
                .map_err(runtime)?;
        }
        for round in &outcome.rounds {
            let name = format!("rounds/round_{}_{}.fdrl", round.slice_id, round.round);
            dir.write(&name, serialize_model(&round.aggregate)).map_err(runtime)?;
        }
    }
    Ok(())
}

fn train(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let started = now();
    let mut dir = StagedDir::create(out).map_err(runtime)?;
    let outcome = run_training(config).map_err(runtime)?;
    write_training(&mut dir, &outcome, "kpi.csv", true)?;
    dir.write("config.json", config.to_json()).map_err(runtime)?;
    write_manifest(&mut dir, "train", config, started, summarize_kpis(&outcome.kpis))?;
    let path = dir.commit().map_err(runtime)?;
    println!(
        "trained {} agents for {} steps; wrote {}",
        outcome.agents.iter().map(Vec::len).sum::<usize>(),
        config.train_steps,
        path.display()
    );
    Ok(())
}

fn load_agents(config: &ExperimentConfig, models: &Path) -> Result<Vec<Vec<AgentState>>, CliError> {
    let base = if models.join("models").is_dir() {
        models.join("models")
    } else {
        models.to_path_buf()
    };
    config
        .cells
        .iter()
        .map(|cell| {
            (0..cell.num_slices)
                .map(|s| {
                    let id = AgentId { cell_id: cell.cell_id, slice_id: s as u16 };
                    let path: PathBuf = base.join(format!("agent_c{}_s{}.fdrl", id.cell_id, id.slice_id));
                    let bytes = fs::read(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
                    let snapshot = deserialize_model(&bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
                    if snapshot.id != id {
                        return Err(runtime(format!("{} holds agent {:?}, expected {id:?}", path.display(), snapshot.id)));
                    }
                    let params = snapshot.to_params().map_err(runtime)?;
                    let rng_seed = sub_seed(config.seed, u64::from(id.cell_id), s as u64, StreamTag::Agent);
                    Ok(AgentState::from_params(id, params, &config.agent, rng_seed))
                })
                .collect()
        })
        .collect()
}

fn write_report(dir: &mut StagedDir, stem: &str, report: &EvalReport) -> Result<(), CliError> {
    dir.write(&format!("{stem}.json"), serde_json::to_string_pretty(report).map_err(runtime)?)
        .map_err(runtime)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(runtime)?;
    dir.write(&format!("{stem}.csv"), csv).map_err(runtime)
}

fn eval(config: &ExperimentConfig, models: &Path, out: &Path, episodes: u32) -> Result<(), CliError> {
    let started = now();
    let agents = load_agents(config, models)?;
    let report = evaluate_policy(Policy::Trained(&agents), config, episodes).map_err(runtime)?;
    let mut dir = StagedDir::create(out).map_err(runtime)?;
    write_report(&mut dir, "eval_report", &report)?;
    write_manifest(&mut dir, "eval", config, started, summarize_report(&report))?;
    dir.commit().map_err(runtime)?;
    print_report(&report);
    Ok(())
}

fn baseline(config: &ExperimentConfig, kind: BaselineKind, out: &Path, episodes: u32) -> Result<(), CliError> {
    let started = now();
    let report = evaluate_policy(Policy::Baseline(kind), config, episodes).map_err(runtime)?;
    let mut dir = StagedDir::create(out).map_err(runtime)?;
    write_report(&mut dir, "baseline_report", &report)?;
    write_manifest(&mut dir, "baseline", config, started, summarize_report(&report))?;
    dir.commit().map_err(runtime)?;
    print_report(&report);
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "{}: mean reward {:.4}, mean |gap| {:.2} PRB, over-provision {:.3}, SLA violation {:.3}",
        report.policy, report.mean_reward, report.mean_abs_gap_prb, report.over_provision_ratio, report.sla_violation_ratio
    );
}

#[derive(Serialize)]
struct SliceComparison {
    slice_id: u16,
    federated_mean_reward: f64,
    isolated_mean_reward: f64,
    delta: f64,
}

#[derive(Serialize)]
struct FedDemoReport {
    seed: u64,
    train_steps: u64,
    federated: EvalReport,
    isolated: EvalReport,
    slices: Vec<SliceComparison>,
    federated_at_least_as_good: bool,
}

fn fed_demo(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let started = now();
    let mut dir = StagedDir::create(out).map_err(runtime)?;
    let mut federated_cfg = config.clone();
    federated_cfg.federation.enabled = true;
    let mut isolated_cfg = config.clone();
    isolated_cfg.federation.enabled = false;

    let federated = run_training(&federated_cfg).map_err(runtime)?;
    let isolated = run_training(&isolated_cfg).map_err(runtime)?;
    write_training(&mut dir, &federated, "kpi_federated.csv", false)?;
    write_training(&mut dir, &isolated, "kpi_isolated.csv", false)?;

    let fed_report =
        evaluate_policy(Policy::Trained(&federated.agents), config, config.eval_episodes).map_err(runtime)?;
    let iso_report =
        evaluate_policy(Policy::Trained(&isolated.agents), config, config.eval_episodes).map_err(runtime)?;
    let slices: Vec<SliceComparison> = (0..config.cells[0].num_slices as u16)
        .map(|s| {
            let f = fed_report.slice_group_reward(s).unwrap_or(f64::NAN);
            let i = iso_report.slice_group_reward(s).unwrap_or(f64::NAN);
            SliceComparison {
                slice_id: s,
                federated_mean_reward: f,
                isolated_mean_reward: i,
                delta: f - i,
            }
        })
        .collect();
    let report = FedDemoReport {
        seed: config.seed,
        train_steps: config.train_steps,
        federated_at_least_as_good: fed_report.mean_reward >= iso_report.mean_reward,
        federated: fed_report,
        isolated: iso_report,
        slices,
    };
    dir.write("fed_demo.json", serde_json::to_string_pretty(&report).map_err(runtime)?)
        .map_err(runtime)?;
    let mut csv = Vec::new();
    report.federated.write_csv(&mut csv).map_err(runtime)?;
    let mut iso_csv = Vec::new();
    report.isolated.write_csv(&mut iso_csv).map_err(runtime)?;
    // one header, both policies
    let iso_text = String::from_utf8(iso_csv).map_err(runtime)?;
    let mut text = String::from_utf8(csv).map_err(runtime)?.replace("trained,", "federated,");
    for line in iso_text.lines().skip(1) {
        text.push_str(&line.replacen("trained,", "isolated,", 1));
        text.push('\n');
    }
    dir.write("fed_demo.csv", text).map_err(runtime)?;
    let summary = RunSummary {
        mean_reward: report.federated.mean_reward,
        slices: summarize_report(&report.federated).slices,
    };
    write_manifest(&mut dir, "fed-demo", config, started, summary)?;
    dir.commit().map_err(runtime)?;
    println!(
        "federated mean reward {:.4} vs isolated {:.4}",
        report.federated.mean_reward, report.isolated.mean_reward
    );
    for s in &report.slices {
        println!(
            "  slice {}: federated {:.4}, isolated {:.4}, delta {:+.4}",
            s.slice_id, s.federated_mean_reward, s.isolated_mean_reward, s.delta
        );
    }
    Ok(())
}

fn inspect(file: &Path) -> Result<(), CliError> {
    let bytes = fs::read(file).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
    let snapshot = deserialize_model(&bytes).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
    println!("magic: FDRL");
    println!("version: {}", fedslice::federation::FORMAT_VERSION);
    println!("cell_id: {}", snapshot.id.cell_id);
    println!("slice_id: {}", snapshot.id.slice_id);
    println!("layer_dims: {:?}", snapshot.layer_dims);
    println!("sample_count: {}", snapshot.sample_count);
    println!("parameters: {}", snapshot.params.len());
    Ok(())
}
