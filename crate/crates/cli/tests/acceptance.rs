//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fedslice::env::{arbitrate, CellEnv};
use fedslice::federation::{deserialize_model, fedavg_with, serialize_model};
use fedslice::harness::{
    evaluate_policy, run_toy_ddqn, run_training, toy_agent_config, toy_mdp, EvalReport, Policy,
};
use fedslice::neural::{init_params, MlpParams};
use fedslice::seed::{rng_from_seed, SimRng};
use fedslice::{AgentId, BaselineKind, ExperimentConfig, ModelSnapshot, Weighting};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Verdict); 9] = [
        ("gradient oracle", Duration::from_secs(10), gradient_oracle),
        ("toy-MDP DDQN", Duration::from_secs(120), toy_ddqn),
        ("capacity safety", Duration::from_secs(10), capacity_safety),
        ("learning lift", Duration::from_secs(600), learning_lift),
        ("federated benefit", Duration::from_secs(1200), federated_benefit),
        ("fedavg algebra", Duration::from_secs(10), fedavg_algebra),
        ("determinism", Duration::from_secs(60), determinism),
        ("serialization", Duration::from_secs(30), serialization),
        ("reward/observation bounds", Duration::from_secs(10), bounds),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.iter().any(|o| o == &n.to_string() || name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_budget = elapsed <= *budget;
        let passed = verdict.passed && in_budget;
        if !passed {
            failures += 1;
        }
        let budget_note = if in_budget { String::new() } else { format!(" OVER BUDGET ({budget:?})") };
        println!(
            "{} [{n}] {name}: {} ({:.1}s){budget_note}",
            if passed { "PASS" } else { "FAIL" },
            verdict.detail,
            elapsed.as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}

// 1 -------------------------------------------------------------------------

/// Mean squared error on the taken actions, computed from plain forward
/// passes so it shares nothing with the backprop code.
fn reference_loss(net: &MlpParams<f64>, inputs: &Array2<f64>, actions: &[usize], targets: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (b, row) in inputs.rows().into_iter().enumerate() {
        let q = net.forward(row.as_slice().unwrap()).unwrap();
        let err = q[actions[b]] - targets[b];
        sum += err * err;
    }
    sum / actions.len() as f64
}

fn gradient_oracle() -> Verdict {
    let dims = [4, 8, 3];
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut rng = rng_from_seed(101);
    for case in 0..20u64 {
        let net: MlpParams<f64> = init_params(&dims, 1000 + case).unwrap();
        let batch = rng.random_range(1..=16);
        let inputs = Array2::from_shape_fn((batch, 4), |_| rng.random_range(-2.0..2.0));
        let actions: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
        let targets: Vec<f64> = (0..batch).map(|_| rng.random_range(-3.0..3.0)).collect();

        let (_, grads) = net
            .loss_and_gradients(inputs.view(), &actions, &targets, f64::INFINITY)
            .unwrap();
        let analytic = grads.flatten();
        let base = net.flatten();
        for (k, &g) in analytic.iter().enumerate() {
            let mut plus = base.clone();
            plus[k] += h;
            let mut minus = base.clone();
            minus[k] -= h;
            let lp = reference_loss(&MlpParams::from_flat(&dims, &plus).unwrap(), &inputs, &actions, &targets);
            let lm = reference_loss(&MlpParams::from_flat(&dims, &minus).unwrap(), &inputs, &actions, &targets);
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Verdict::new(worst < 1e-4, format!("max relative error {worst:.3e} over 20 nets"))
}

// 2 -------------------------------------------------------------------------

fn toy_ddqn() -> Verdict {
    // Closed-form fixed point at gamma = 0.9: staying in B forever is optimal.
    let gamma = 0.9;
    let v_b = 2.0 / (1.0 - gamma);
    let v_a = 1.0 + gamma * v_b;
    let closed = [[gamma * v_a, v_a], [v_b, gamma * v_a]];
    let config = toy_agent_config();
    assert_eq!(config.gamma, gamma);
    let mdp = toy_mdp();
    let tolerance = 0.05 * v_b;

    let mut parts = Vec::new();
    let mut all = true;
    for seed in 0..3u64 {
        let run = run_toy_ddqn(&mdp, &config, seed, 20_000, 0.05).unwrap();
        let oracle_err = run
            .q_star
            .iter()
            .flatten()
            .zip(closed.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let learned_err = run
            .q_learned
            .iter()
            .flatten()
            .zip(closed.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let ok = oracle_err < 1e-6 && run.reached_at.is_some() && learned_err <= tolerance;
        all &= ok;
        parts.push(format!(
            "seed {seed}: reached at {}, final err {learned_err:.3}",
            run.reached_at.map_or("never".to_string(), |i| i.to_string())
        ));
    }
    Verdict::new(all, format!("tolerance {tolerance:.2}; {}", parts.join("; ")))
}

// 3 -------------------------------------------------------------------------

fn capacity_safety() -> Verdict {
    let mut rng = rng_from_seed(303);
    let mut violations = 0u64;
    let mut congested = 0u64;
    for _ in 0..100_000 {
        let chunk = rng.random_range(1..=20u32);
        let capacity = chunk * rng.random_range(1..=20u32);
        let slices = rng.random_range(1..=6usize);
        let requests: Vec<u32> = (0..slices)
            .map(|_| chunk * rng.random_range(0..=capacity / chunk))
            .collect();
        let alloc = arbitrate(&requests, capacity, chunk).unwrap();
        let total: u32 = alloc.iter().sum();
        let demanded: u32 = requests.iter().sum();
        if demanded > capacity {
            congested += 1;
        }
        let bad = alloc.len() != requests.len()
            || total > capacity
            || alloc.iter().zip(&requests).any(|(a, r)| a > r)
            || alloc.iter().any(|a| a % chunk != 0)
            || (demanded <= capacity && alloc != requests);
        if bad {
            violations += 1;
        }
    }
    Verdict::new(violations == 0, format!("{violations} violations in 10^5 requests ({congested} congested)"))
}

// 4 -------------------------------------------------------------------------

fn learning_lift() -> Verdict {
    let mut parts = Vec::new();
    let mut all = true;
    for seed in 0..5u64 {
        let mut config = ExperimentConfig::single_cell();
        config.seed = seed;
        config.train_steps = 40_000;
        let trained = run_training(&config).unwrap();
        let learned = evaluate_policy(Policy::Trained(&trained.agents), &config, 5).unwrap();
        let random = evaluate_policy(Policy::Baseline(BaselineKind::Random), &config, 5).unwrap();
        let fixed = evaluate_policy(Policy::Baseline(BaselineKind::StaticEqual), &config, 5).unwrap();
        let ok = learned.mean_reward > random.mean_reward && learned.mean_abs_gap_prb < 0.5 * fixed.mean_abs_gap_prb;
        all &= ok;
        parts.push(format!(
            "seed {seed} {}: reward {:.3} vs random {:.3}, |gap| {:.2} vs static {:.2}",
            if ok { "ok" } else { "miss" },
            learned.mean_reward,
            random.mean_reward,
            learned.mean_abs_gap_prb,
            fixed.mean_abs_gap_prb
        ));
    }
    Verdict::new(all, parts.join("; "))
}

// 5 -------------------------------------------------------------------------

fn group_rewards(report: &EvalReport, slices: u16) -> Vec<f64> {
    (0..slices).map(|s| report.slice_group_reward(s).unwrap()).collect()
}

fn federated_benefit() -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..5u64 {
        let mut config = ExperimentConfig::default();
        config.seed = seed;
        config.train_steps = 30_000;
        config.federation.enabled = true;
        let slices = config.cells[0].num_slices as u16;
        let federated = run_training(&config).unwrap();
        let fed_report = evaluate_policy(Policy::Trained(&federated.agents), &config, 5).unwrap();
        config.federation.enabled = false;
        let isolated = run_training(&config).unwrap();
        let iso_report = evaluate_policy(Policy::Trained(&isolated.agents), &config, 5).unwrap();

        let fed = group_rewards(&fed_report, slices);
        let iso = group_rewards(&iso_report, slices);
        let fed_mean = fed.iter().sum::<f64>() / fed.len() as f64;
        let iso_mean = iso.iter().sum::<f64>() / iso.len() as f64;
        let ok = fed_mean >= iso_mean;
        if ok {
            wins += 1;
        }
        let groups: Vec<String> = fed.iter().zip(&iso).map(|(f, i)| format!("{f:.3}/{i:.3}")).collect();
        parts.push(format!(
            "seed {seed} {}: {fed_mean:.3} vs {iso_mean:.3} [{}]",
            if ok { "win" } else { "loss" },
            groups.join(" ")
        ));
    }
    Verdict::new(wins >= 3, format!("federated >= isolated on {wins}/5 seeds; {}", parts.join("; ")))
}

// 6 -------------------------------------------------------------------------

fn random_snapshots(rng: &mut SimRng) -> Vec<ModelSnapshot> {
    let dims = [rng.random_range(1..=6u32), rng.random_range(1..=6), rng.random_range(1..=4)];
    let len = (dims[0] * dims[1] + dims[1] + dims[1] * dims[2] + dims[2]) as usize;
    let scale = 10f32.powi(rng.random_range(-3..=3));
    let members = rng.random_range(1..=8u16);
    (0..members)
        .map(|m| ModelSnapshot {
            id: AgentId { cell_id: m, slice_id: 0 },
            layer_dims: dims.to_vec(),
            params: (0..len).map(|_| scale * rng.random_range(-1.0f32..1.0)).collect(),
            sample_count: rng.random_range(0..5000),
        })
        .collect()
}

fn close(a: f32, b: f32, scale: f64) -> bool {
    (f64::from(a) - f64::from(b)).abs() <= 1e-6 * scale.max(f64::from(a.abs())).max(f64::from(b.abs()))
}

fn fedavg_algebra() -> Verdict {
    let mut rng = rng_from_seed(606);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let snaps = random_snapshots(&mut rng);
        let weighting = if case % 2 == 0 { Weighting::SampleCount } else { Weighting::Equal };
        let avg = fedavg_with(&snaps, weighting).unwrap();
        let magnitude = snaps
            .iter()
            .flat_map(|s| &s.params)
            .fold(0.0f64, |m, &p| m.max(f64::from(p.abs())));

        let copies: Vec<ModelSnapshot> = (0..snaps.len())
            .map(|i| ModelSnapshot { params: snaps[0].params.clone(), ..snaps[i].clone() })
            .collect();
        let idem = fedavg_with(&copies, weighting).unwrap();
        if !idem.iter().zip(&snaps[0].params).all(|(&a, &b)| close(a, b, 0.0)) {
            failures.push(format!("case {case}: idempotence"));
        }

        let mut shuffled = snaps.clone();
        shuffled.shuffle(&mut rng);
        let perm = fedavg_with(&shuffled, weighting).unwrap();
        if !perm.iter().zip(&avg).all(|(&a, &b)| close(a, b, magnitude)) {
            failures.push(format!("case {case}: permutation"));
        }

        let alpha = rng.random_range(-3.0f32..3.0);
        let beta = rng.random_range(-1.0f32..1.0) * magnitude as f32;
        let mapped: Vec<ModelSnapshot> = snaps
            .iter()
            .map(|s| ModelSnapshot { params: s.params.iter().map(|&p| alpha * p + beta).collect(), ..s.clone() })
            .collect();
        let lhs = fedavg_with(&mapped, weighting).unwrap();
        let affine_scale = f64::from(alpha.abs()) * magnitude + f64::from(beta.abs());
        if !lhs.iter().zip(&avg).all(|(&l, &a)| close(l, alpha * a + beta, affine_scale)) {
            failures.push(format!("case {case}: affine"));
        }
    }
    Verdict::new(
        failures.is_empty(),
        if failures.is_empty() {
            "idempotence, permutation and affine checks hold on 1000 sets".to_string()
        } else {
            format!("{} failures, first: {}", failures.len(), failures[0])
        },
    )
}

// 7 -------------------------------------------------------------------------

fn run_train(out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_fedslice"))
        .args(["train", "--seed", "42", "--steps", "2000", "--out"])
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&status.stderr).into_owned())
    }
}

fn model_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in ["models", "rounds"] {
        let Ok(entries) = fs::read_dir(dir.join(sub)) else { continue };
        for entry in entries {
            let path = entry.unwrap().path();
            files.push((format!("{sub}/{}", path.file_name().unwrap().to_string_lossy()), fs::read(&path).unwrap()));
        }
    }
    files.sort();
    files
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        if let Err(e) = run_train(out) {
            return Verdict::new(false, format!("train failed: {e}"));
        }
    }
    let kpi_a = fs::read(a.join("kpi.csv")).unwrap();
    let kpi_b = fs::read(b.join("kpi.csv")).unwrap();
    let models_a = model_files(&a);
    let models_b = model_files(&b);
    let ok = kpi_a == kpi_b && !models_a.is_empty() && models_a == models_b;
    Verdict::new(
        ok,
        format!("kpi.csv {} bytes, {} model files, identical: {ok}", kpi_a.len(), models_a.len()),
    )
}

// 8 -------------------------------------------------------------------------

fn random_model(rng: &mut SimRng) -> ModelSnapshot {
    let depth = rng.random_range(2..=5);
    let dims: Vec<u32> = (0..depth).map(|_| rng.random_range(1..=12)).collect();
    let len: usize = dims.windows(2).map(|w| (w[0] * w[1] + w[1]) as usize).sum();
    ModelSnapshot {
        id: AgentId { cell_id: rng.random(), slice_id: rng.random() },
        layer_dims: dims,
        params: (0..len).map(|_| f32::from_bits(rng.random())).collect(),
        sample_count: rng.random(),
    }
}

fn serialization() -> Verdict {
    let mut rng = rng_from_seed(808);
    let mut mismatches = 0;
    let mut corpus = Vec::new();
    for _ in 0..1000 {
        let model = random_model(&mut rng);
        let bytes = serialize_model(&model);
        match deserialize_model(&bytes) {
            Ok(back) if back.bit_eq(&model) => {}
            _ => mismatches += 1,
        }
        corpus.push(bytes);
    }

    let mut crashes = 0;
    let mut rejected = 0;
    for case in 0..10_000 {
        let input: Vec<u8> = match case % 4 {
            0 => (0..rng.random_range(0..128)).map(|_| rng.random()).collect(),
            1 => {
                let src = &corpus[rng.random_range(0..corpus.len())];
                src[..rng.random_range(0..src.len())].to_vec()
            }
            2 => {
                let mut v = corpus[rng.random_range(0..corpus.len())].clone();
                for _ in 0..rng.random_range(1..=8) {
                    let i = rng.random_range(0..v.len());
                    v[i] ^= 1 << rng.random_range(0..8);
                }
                v
            }
            _ => {
                let mut v = b"FDRL".to_vec();
                v.extend((0..rng.random_range(0..64)).map(|_| rng.random::<u8>()));
                v
            }
        };
        match catch_unwind(AssertUnwindSafe(|| deserialize_model(&input))) {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => {
                assert!(!e.to_string().is_empty());
                rejected += 1;
            }
            Err(_) => crashes += 1,
        }
    }
    Verdict::new(
        mismatches == 0 && crashes == 0,
        format!("{mismatches} round-trip mismatches; 10^4 fuzz inputs, {crashes} crashes, {rejected} structured errors"),
    )
}

// 9 -------------------------------------------------------------------------

fn bounds() -> Verdict {
    let config = ExperimentConfig::default();
    let mut rng = rng_from_seed(909);
    let mut worst_reward = (f64::INFINITY, f64::NEG_INFINITY);
    let mut bad_obs = 0u64;
    let mut bad_rewards = 0u64;
    for cell in &config.cells {
        let (mut env, obs) = CellEnv::reset(cell.clone(), 9).unwrap();
        let actions = cell.num_actions();
        let check_obs = |obs: &[fedslice::Observation]| {
            obs.iter()
                .flat_map(|o| o.to_array())
                .filter(|x| !(0.0..=1.0).contains(x))
                .count() as u64
        };
        bad_obs += check_obs(&obs);
        let mut episode = 0;
        for _ in 0..10_000 {
            let joint: Vec<usize> = (0..cell.num_slices).map(|_| rng.random_range(0..actions)).collect();
            let step = env.step(&joint).unwrap();
            for &r in &step.rewards {
                worst_reward = (worst_reward.0.min(r), worst_reward.1.max(r));
                if !(-1.5..=1.0).contains(&r) {
                    bad_rewards += 1;
                }
            }
            bad_obs += check_obs(&step.observations);
            if step.done {
                episode += 1;
                let (fresh, obs) = CellEnv::reset(cell.clone(), 9 + episode).unwrap();
                env = fresh;
                bad_obs += check_obs(&obs);
            }
        }
    }
    Verdict::new(
        bad_obs == 0 && bad_rewards == 0,
        format!(
            "{} cells x 10^4 steps: rewards in [{:.3}, {:.3}], {bad_rewards} reward and {bad_obs} observation violations",
            config.cells.len(),
            worst_reward.0,
            worst_reward.1
        ),
    )
}
