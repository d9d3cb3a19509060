//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always printed.

use std::path::Path;
use std::time::{Duration, Instant};

use mtorl_cli::{cmd_gen_data, cmd_simulate, cmd_train, PolicyKind, RunConfig};
use mtorl_core::allocation::{explicit_policy, implicit_policy, merge_policies, ChannelPolicy, ChannelStats};
use mtorl_core::data::{RewardMode, RewardSpec, SequenceConfig, SequenceSample};
use mtorl_core::model::{Ablation, Model, ModelConfig, RewardHead, SelectionMode};
use mtorl_core::numerics::{grad_check, GradCheckOptions, Tensor};
use mtorl_core::simulator::{
    run_procedure, Agent, Environment, ModelAgent, Phase, ProcedureConfig, SeparableEnv,
};
use mtorl_core::training::{
    batch_loss, dpo_loss, policy_loss, total_loss, LossObjective, LossWeights, PairSample, RewardLoss,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Duration, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    format!("{e:#}")
}

fn random_samples(
    count: usize,
    f: usize,
    n: usize,
    m: usize,
    pad: usize,
    head: RewardHead,
    seed: u64,
) -> Vec<SequenceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut s = SequenceSample::padding(&format!("u{i}"), f, n);
            let values = (0..f * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            s.fused_inputs = Tensor::new(vec![f, n], values).unwrap();
            for t in 0..n {
                s.valid_mask[t] = t >= pad;
                s.action_labels[t] = rng.random_range(0..m);
                s.reward_labels[t] = match head {
                    RewardHead::Sigmoid => f64::from(rng.random_bool(0.5)),
                    RewardHead::Bounded => rng.random_range(0.0..1.0),
                    RewardHead::Softmax => rng.random_range(0..2) as f64,
                };
            }
            s
        })
        .collect()
}

fn gradient_fidelity() -> Outcome {
    const F: usize = 10;
    let cfg = ModelConfig {
        hidden: 8,
        fused_dim: F,
        seq_len: 6,
        channels: 3,
        dropout: 0.0,
        init_std: 0.5,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg.clone(), 7).map_err(err)?;
    let samples = random_samples(4, F, 6, 3, 1, RewardHead::Bounded, 11);
    let obj = LossObjective {
        config: &cfg,
        samples: &samples,
        pairs: &[(0, 1), (2, 3)],
        weights: LossWeights::default(),
        reward_loss: RewardLoss::Mse,
    };
    let report = grad_check(&obj, &model.params, &GradCheckOptions::default()).map_err(err)?;
    ensure(
        report.max_relative_error <= 1e-4,
        format!(
            "max relative error {:.3e} at {:?}",
            report.max_relative_error, report.worst
        ),
    )?;
    Ok(format!(
        "max relative error {:.2e} over {} entries",
        report.max_relative_error, report.checked
    ))
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut comparisons = 0usize;
    for trial in 0..100u64 {
        let n = rng.random_range(3..9);
        let f = rng.random_range(2..7);
        let head = [RewardHead::Bounded, RewardHead::Sigmoid, RewardHead::Softmax][rng.random_range(0..3)];
        let dilations = (0..rng.random_range(1..4)).map(|l| 1 << l).collect();
        let cfg = ModelConfig {
            hidden: rng.random_range(2..9),
            fused_dim: f,
            seq_len: n,
            channels: rng.random_range(1..5),
            dilations,
            kernel_size: rng.random_range(1..4),
            attention_layers: rng.random_range(1..3),
            reward_layers: rng.random_range(1..4),
            dropout: 0.0,
            reward_head: head,
            weight_norm: rng.random_bool(0.5),
            per_position_bias: rng.random_bool(0.5),
            init_std: 0.3,
            ablation: Ablation {
                causal_state: rng.random_bool(0.5),
                causal_attention: rng.random_bool(0.5),
                add_norm: rng.random_bool(0.5),
            },
            ..ModelConfig::default()
        };
        let model = Model::init(cfg.clone(), trial).map_err(err)?;
        let sample = random_samples(1, f, n, cfg.channels, 0, head, trial + 1000).remove(0);
        let base = model.forward(&sample).map_err(err)?;
        for t in 0..n - 1 {
            let mut perturbed = sample.clone();
            for r in 0..f {
                perturbed.fused_inputs.set(r, t + 1, rng.random_range(-3.0..3.0));
            }
            let out = model.forward(&perturbed).map_err(err)?;
            for c in 0..=t {
                let same = base.causal_states.column_values(c) == out.causal_states.column_values(c)
                    && base.attended.column_values(c) == out.attended.column_values(c)
                    && base.action_probs.row_values(c) == out.action_probs.row_values(c)
                    && base.reward_preds.row_values(c) == out.reward_preds.row_values(c);
                ensure(
                    same,
                    format!("model {trial}: column {} leaked into position {c}", t + 1),
                )?;
                comparisons += 1;
            }
        }
    }
    Ok(format!(
        "100 models, {comparisons} position comparisons bit-exact"
    ))
}

fn overfit(dir: &Path) -> Outcome {
    let data = dir.join("overfit-data");
    let sets = [
        "environment.users=32",
        "logging.min_len=10",
        "logging.max_len=10",
        "sequence.seq_len=10",
        "model.hidden=16",
        "model.dropout=0",
        "model.init_std=0.3",
        "training.patience=0",
        "training.stop_below_policy_loss=0.01",
    ]
    .map(String::from);
    let mut cfg = RunConfig::load(None, &sets, Some(5)).map_err(err)?;
    let paths = cmd_gen_data(&cfg, &data).map_err(err)?;
    cfg.data.journeys = Some(paths.journeys);
    cfg.data.profiles = Some(paths.profiles);
    let out = cmd_train(&cfg, &dir.join("overfit-train")).map_err(err)?;
    let last = out.history.last().ok_or("empty history")?;
    ensure(
        last.policy_loss < 0.01 && out.history.len() <= 800,
        format!(
            "policy CE {:.4} after {} epochs",
            last.policy_loss,
            out.history.len()
        ),
    )?;
    Ok(format!(
        "policy CE {:.4} after {} epochs",
        last.policy_loss,
        out.history.len()
    ))
}

fn loss_identities() -> Outcome {
    for m in [2usize, 3, 5] {
        let probs = Tensor::new(vec![4, m], vec![1.0 / m as f64; 4 * m]).unwrap();
        let v = policy_loss(&probs, &[0, 1 % m, 0, m - 1], &[true; 4]).map_err(err)?;
        ensure(
            (v - (m as f64).ln()).abs() <= 1e-9,
            format!("uniform policy loss {v} for m={m}"),
        )?;
    }

    let cfg = ModelConfig {
        hidden: 4,
        fused_dim: 5,
        seq_len: 4,
        channels: 3,
        dropout: 0.0,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg, 3).map_err(err)?;
    let mut samples = random_samples(2, 5, 4, 3, 0, RewardHead::Bounded, 9);
    // Identical inputs and actions give identical probabilities; rewards set the preference.
    samples[1].fused_inputs = samples[0].fused_inputs.clone();
    samples[1].action_labels = samples[0].action_labels.clone();
    samples[0].reward_labels = vec![1.0; 4];
    samples[1].reward_labels = vec![0.0; 4];
    let pair = PairSample::new(samples[0].clone(), samples[1].clone()).map_err(err)?;
    let dpo = dpo_loss(&[pair], &model, 0.1).map_err(err)?;
    ensure(
        (dpo - 2f64.ln()).abs() <= 1e-9,
        format!("symmetric preference loss {dpo}"),
    )?;

    let zero = LossWeights {
        mu: 0.0,
        lambda: 0.0,
        beta: 0.1,
    };
    let batch = random_samples(6, 5, 4, 3, 1, RewardHead::Bounded, 4);
    let total = total_loss(&model, &batch, &[(0, 1), (2, 3)], &zero, RewardLoss::Mse).map_err(err)?;
    ensure(
        total.total == total.policy,
        format!("total {} vs policy {}", total.total, total.policy),
    )?;
    Ok("ln m, ln 2 and total == policy hold".into())
}

fn allocation_oracles() -> Outcome {
    let close = |a: &ChannelPolicy, b: &[f64]| a.probs.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
    let stats = ChannelStats {
        exposures: vec![10, 10],
        positives: vec![2, 3],
        predicted_positives: vec![0, 0],
    };
    let explicit = explicit_policy(&stats).map_err(err)?;
    ensure(
        close(&explicit, &[0.4, 0.6]),
        format!("explicit {:?}", explicit.probs),
    )?;
    let implicit = implicit_policy(&[vec![0.6, 0.2, 0.1], vec![0.7, 0.8, 0.3]], 0.5).map_err(err)?;
    ensure(
        close(&implicit, &[1.0 / 3.0, 2.0 / 3.0]),
        format!("implicit {:?}", implicit.probs),
    )?;
    let merged = merge_policies(
        &ChannelPolicy::new(vec![0.6, 0.4]).map_err(err)?,
        &ChannelPolicy::new(vec![0.4, 0.6]).map_err(err)?,
        0.5,
    )
    .map_err(err)?;
    ensure(close(&merged, &[0.5, 0.5]), format!("merged {:?}", merged.probs))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let m = rng.random_range(1..6);
        let stats = ChannelStats {
            exposures: vec![50; m],
            positives: (0..m).map(|_| rng.random_range(0..=50)).collect(),
            predicted_positives: vec![0; m],
        };
        let preds: Vec<Vec<f64>> = (0..m).map(|_| (0..8).map(|_| rng.random()).collect()).collect();
        let e = explicit_policy(&stats).map_err(err)?;
        let i = implicit_policy(&preds, rng.random_range(0.05..0.95)).map_err(err)?;
        let g = merge_policies(&e, &i, rng.random()).map_err(err)?;
        for p in [&e, &i, &g] {
            ensure(
                (p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
                format!("{:?} not on simplex", p.probs),
            )?;
        }
    }
    Ok("hand examples exact; 600 emitted policies on the simplex".into())
}

fn budget_constraint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let reward = RewardSpec::new(RewardMode::Binary);
    let mut exposures = 0usize;
    for run in 0..1000u64 {
        let m = rng.random_range(1..5);
        let n = rng.random_range(2..6);
        let mut env_cfg = SeparableEnv {
            users: rng.random_range(1..10),
            channels: m,
            drift: rng.random_range(0.0..0.3),
            seed: run,
            ..SeparableEnv::default()
        }
        .build()
        .map_err(err)?;
        env_cfg.costs = (0..m).map(|_| rng.random_range(0.05..1.5)).collect();
        let cfg = ProcedureConfig {
            budget: rng.random_range(0.0..12.0),
            max_rounds: rng.random_range(1..80),
            top_n: rng.random_range(1..6),
            eta: rng.random(),
            exploration_rounds: rng.random_range(0..3),
            selection: if rng.random_bool(0.5) {
                SelectionMode::Stochastic
            } else {
                SelectionMode::Deterministic
            },
            penalty_strength: Some(rng.random_range(0.0..2.0)),
            seed: run,
            ..ProcedureConfig::default()
        };
        let sequence = SequenceConfig {
            seq_len: n,
            min_journey_len: 1,
            stride: None,
            channels: m,
            touch_dim: env_cfg.touch_dim,
            static_dim: m,
        };
        let model = Model::init(
            ModelConfig {
                hidden: 4,
                fused_dim: sequence.fused_dim(&reward),
                seq_len: n,
                channels: m,
                dropout: 0.0,
                reward_head: RewardHead::Sigmoid,
                init_std: 0.5,
                ..ModelConfig::default()
            },
            run,
        )
        .map_err(err)?;
        let agent = match run % 3 {
            0 => Agent::Random,
            1 => Agent::GreedyCtr((0..m).map(|_| rng.random()).collect()),
            _ => Agent::Model(ModelAgent {
                model: &model,
                sequence: &sequence,
                reward: &reward,
            }),
        };
        let mut env = Environment::new(env_cfg).map_err(err)?;
        let report = run_procedure(agent, &mut env, &cfg).map_err(err)?;
        let mut spent = 0.0;
        for (i, row) in report.trace.iter().enumerate() {
            spent += row.cost;
            ensure(
                spent <= cfg.budget,
                format!("run {run}: prefix {i} spent {spent} > {}", cfg.budget),
            )?;
        }
        let identity = report.cumulative_gain - report.penalty_strength * report.cumulative_cost;
        ensure(
            (report.cumulative_penalized_reward - identity).abs() <= 1e-9,
            format!(
                "run {run}: penalized {} vs {identity}",
                report.cumulative_penalized_reward
            ),
        )?;
        let exploit = report
            .trace
            .iter()
            .filter(|r| r.phase == Phase::Exploitation)
            .count();
        ensure(
            exploit <= cfg.max_rounds,
            format!("run {run}: {exploit} exposures > K"),
        )?;
        exposures += report.trace.len();
    }
    Ok(format!("1000 runs, {exposures} exposures, no overdraw"))
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn policy_quality(dir: &Path) -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let (mut model, mut random, mut greedy) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..20u64 {
        let root = dir.join(format!("quality-{seed}"));
        let mut cfg = RunConfig::load(Some(&config), &[], Some(seed)).map_err(err)?;
        let paths = cmd_gen_data(&cfg, &root.join("data")).map_err(err)?;
        cfg.data.journeys = Some(paths.journeys);
        cfg.data.profiles = Some(paths.profiles);
        cfg.data.environment = Some(paths.environment);
        let trained = cmd_train(&cfg, &root.join("train")).map_err(err)?;
        let sim = |policy, ckpt: Option<&Path>, name: &str| {
            cmd_simulate(&cfg, ckpt, policy, &root.join(name)).map(|r| r.cumulative_penalized_reward)
        };
        model.push(sim(PolicyKind::Model, Some(&trained.checkpoint), "sim-model").map_err(err)?);
        random.push(sim(PolicyKind::Random, None, "sim-random").map_err(err)?);
        greedy.push(sim(PolicyKind::Greedy, None, "sim-greedy").map_err(err)?);
    }
    let (m, _) = mean_and_se(&model);
    let (r, _) = mean_and_se(&random);
    let (g, g_se) = mean_and_se(&greedy);
    let summary = format!(
        "model {m:.1}, random {r:.1} (+{:.0}%), greedy {g:.1} ± {g_se:.1}",
        (m / r - 1.0) * 100.0
    );
    ensure(m >= 1.3 * r && m >= g - g_se, summary.clone())?;
    Ok(summary)
}

fn reproducibility(dir: &Path) -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let mut outputs = Vec::new();
    for attempt in 0..2 {
        let root = dir.join(format!("repro-{attempt}"));
        let mut cfg =
            RunConfig::load(Some(&config), &["training.max_epochs=5".into()], Some(7)).map_err(err)?;
        let paths = cmd_gen_data(&cfg, &root.join("data")).map_err(err)?;
        cfg.data.journeys = Some(paths.journeys);
        cfg.data.profiles = Some(paths.profiles);
        cfg.data.environment = Some(paths.environment);
        let trained = cmd_train(&cfg, &root.join("train")).map_err(err)?;
        cmd_simulate(
            &cfg,
            Some(&trained.checkpoint),
            PolicyKind::Model,
            &root.join("sim"),
        )
        .map_err(err)?;
        let read = |p: &Path| std::fs::read(p).map_err(err);
        outputs.push((
            read(&trained.checkpoint)?,
            read(&root.join("sim/run_report.json"))?,
            read(&root.join("sim/trace.csv"))?,
        ));
    }
    ensure(outputs[0].0 == outputs[1].0, "checkpoints differ")?;
    ensure(outputs[0].1 == outputs[1].1, "run reports differ")?;
    ensure(outputs[0].2 == outputs[1].2, "traces differ")?;
    Ok(format!(
        "checkpoint ({} bytes) and run report byte-identical",
        outputs[0].0.len()
    ))
}

fn mask_soundness() -> Outcome {
    let (f, n, m) = (6, 5, 3);
    for (head, kind) in [
        (RewardHead::Bounded, RewardLoss::Mse),
        (RewardHead::Sigmoid, RewardLoss::Bce),
        (RewardHead::Softmax, RewardLoss::CrossEntropy),
    ] {
        let cfg = ModelConfig {
            hidden: 6,
            fused_dim: f,
            seq_len: n,
            channels: m,
            dropout: 0.0,
            init_std: 0.3,
            reward_head: head,
            ..ModelConfig::default()
        };
        let model = Model::init(cfg, 4).map_err(err)?;
        let batch = random_samples(4, f, n, m, 2, head, 21);
        let pairs = [(0, 1), (2, 3)];
        let mut augmented = batch.clone();
        for i in 0..3 {
            augmented.push(SequenceSample::padding(&format!("pad{i}"), f, n));
        }
        // a pair with a padded sample contributes no shared steps
        let aug_pairs = [(0, 1), (2, 3), (0, 5)];
        let w = LossWeights::default();
        let (a, ga) = batch_loss(&model, &batch, &pairs, &w, kind, true).map_err(err)?;
        let (b, gb) = batch_loss(&model, &augmented, &aug_pairs, &w, kind, true).map_err(err)?;
        ensure(a == b, format!("{head:?}: loss changed {a:?} -> {b:?}"))?;
        ensure(ga == gb, format!("{head:?}: gradients changed"))?;
    }
    Ok("loss components and gradients bit-identical with padded samples".into())
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        (
            "gradient fidelity",
            Duration::from_secs(60),
            Box::new(gradient_fidelity),
        ),
        ("causality", Duration::MAX, Box::new(causality)),
        (
            "overfit oracle",
            Duration::from_secs(300),
            Box::new(|| overfit(dir.path())),
        ),
        ("loss identities", Duration::MAX, Box::new(loss_identities)),
        ("allocation oracle", Duration::MAX, Box::new(allocation_oracles)),
        (
            "budget hard constraint",
            Duration::from_secs(120),
            Box::new(budget_constraint),
        ),
        (
            "end-to-end policy quality",
            Duration::from_secs(600),
            Box::new(|| policy_quality(dir.path())),
        ),
        (
            "reproducibility",
            Duration::MAX,
            Box::new(|| reproducibility(dir.path())),
        ),
        ("mask soundness", Duration::MAX, Box::new(mask_soundness)),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut outcome = check();
        let elapsed = start.elapsed();
        if outcome.is_ok() && elapsed > *limit {
            outcome = Err(format!("took {elapsed:.1?}, limit {limit:?}"));
        }
        match outcome {
            Ok(detail) => println!("PASS {}: {name} ({detail}; {elapsed:.1?})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}: {name} ({detail}; {elapsed:.1?})", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
