use mtorl_core::data::{RewardMode, RewardSpec, SequenceConfig};
use mtorl_core::model::{Model, ModelConfig, RewardHead, SelectionMode};
use mtorl_core::simulator::{
    generate_journeys, run_procedure, Agent, Environment, EnvironmentConfig, LoggingPolicy, ModelAgent,
    Phase, Procedure, ProcedureConfig, RunReport, SeparableEnv,
};
use proptest::prelude::*;

struct Fixture {
    model: Model,
    sequence: SequenceConfig,
    reward: RewardSpec,
}

fn fixture(channels: usize, seq_len: usize, seed: u64) -> Fixture {
    let sequence = SequenceConfig {
        seq_len,
        min_journey_len: 1,
        stride: None,
        channels,
        touch_dim: 2,
        static_dim: channels,
    };
    let reward = RewardSpec::new(RewardMode::Binary);
    let cfg = ModelConfig {
        hidden: 4,
        fused_dim: sequence.fused_dim(&reward),
        seq_len,
        channels,
        dropout: 0.0,
        init_std: 0.5,
        reward_head: RewardHead::Sigmoid,
        ..ModelConfig::default()
    };
    Fixture {
        model: Model::init(cfg, seed).unwrap(),
        sequence,
        reward,
    }
}

fn random_env(users: usize, channels: usize, seed: u64, drift: f64) -> EnvironmentConfig {
    let mut cfg = SeparableEnv {
        users,
        channels,
        drift,
        seed,
        ..SeparableEnv::default()
    }
    .build()
    .unwrap();
    // uneven costs exercise the infeasible-exposure branch
    cfg.costs = (0..channels).map(|j| 0.1 + 0.37 * j as f64).collect();
    cfg
}

fn check_report(report: &RunReport, cfg: &ProcedureConfig) {
    let mut spent = 0.0;
    let mut gain = 0.0;
    for row in &report.trace {
        spent += row.cost;
        gain += row.gain;
        assert!(
            spent <= cfg.budget,
            "prefix cost {spent} exceeds budget {}",
            cfg.budget
        );
        assert!(row.remaining_budget >= 0.0);
        assert!((row.penalized_reward - (row.gain - report.penalty_strength * row.cost)).abs() < 1e-12);
    }
    assert_eq!(spent, report.cumulative_cost);
    assert_eq!(gain, report.cumulative_gain);
    let identity = report.cumulative_gain - report.penalty_strength * report.cumulative_cost;
    assert!((report.cumulative_penalized_reward - identity).abs() <= 1e-9);
    assert!(report.exploitation_exposures <= cfg.max_rounds);
    let exploit = report
        .trace
        .iter()
        .filter(|r| r.phase == Phase::Exploitation)
        .count();
    assert_eq!(exploit, report.exploitation_exposures);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn budget_accounting_and_memory_bounds(
        seed in 0u64..10_000,
        users in 1usize..12,
        channels in 1usize..4,
        seq_len in 2usize..6,
        budget in 0.0f64..15.0,
        max_rounds in 1usize..60,
        top_n in 1usize..6,
        eta in 0.0f64..=1.0,
        stochastic in any::<bool>(),
        drift in 0.0f64..0.3,
    ) {
        let f = fixture(channels, seq_len, seed);
        let cfg = ProcedureConfig {
            budget,
            max_rounds,
            top_n,
            eta,
            selection: if stochastic { SelectionMode::Stochastic } else { SelectionMode::Deterministic },
            seed,
            ..ProcedureConfig::default()
        };
        let mut env = Environment::new(random_env(users, channels, seed, drift)).unwrap();
        let agent = Agent::Model(ModelAgent { model: &f.model, sequence: &f.sequence, reward: &f.reward });
        let mut proc = Procedure::new(agent, &mut env, cfg.clone()).unwrap();
        proc.explore().unwrap();
        loop {
            let st = proc.state();
            prop_assert!(st.memories.iter().all(|m| m.len() <= seq_len));
            for p in &st.policies {
                prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.probs.iter().all(|&x| x >= 0.0));
            }
            prop_assert!(proc.remaining_budget() >= 0.0);
            if !proc.exploit_round().unwrap() {
                break;
            }
        }
        check_report(&proc.into_report(), &cfg);
    }

    #[test]
    fn baselines_respect_budget(seed in 0u64..10_000, budget in 0.0f64..20.0, greedy in any::<bool>()) {
        let cfg = ProcedureConfig { budget, max_rounds: 80, top_n: 4, seed, ..ProcedureConfig::default() };
        let mut env = Environment::new(random_env(8, 3, seed, 0.1)).unwrap();
        let agent = if greedy { Agent::GreedyCtr(vec![0.1, 0.3, 0.2]) } else { Agent::Random };
        let report = run_procedure(agent, &mut env, &cfg).unwrap();
        check_report(&report, &cfg);
    }
}

#[test]
fn identical_seeds_give_identical_reports() {
    let f = fixture(3, 4, 1);
    let run = || {
        let mut env = Environment::new(random_env(10, 3, 9, 0.2)).unwrap();
        let agent = Agent::Model(ModelAgent {
            model: &f.model,
            sequence: &f.sequence,
            reward: &f.reward,
        });
        let cfg = ProcedureConfig {
            budget: 12.0,
            top_n: 3,
            selection: SelectionMode::Stochastic,
            seed: 4,
            ..ProcedureConfig::default()
        };
        serde_json::to_string(&run_procedure(agent, &mut env, &cfg).unwrap()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn logged_journeys_favor_the_dominant_channel() {
    let mut env = Environment::new(SeparableEnv::default().build().unwrap()).unwrap();
    let journeys = generate_journeys(&mut env, &LoggingPolicy::default(), 3).unwrap();
    assert_eq!(journeys.len(), 200);
    let mut best = 0usize;
    let mut total = 0usize;
    for (u, j) in journeys.iter().enumerate() {
        assert!((10..=30).contains(&j.observations.len()));
        j.validate(3).unwrap();
        let dominant = (0..3).find(|&c| env.probability(u, c) == 0.8).unwrap();
        best += j.observations.iter().filter(|o| o.channel == dominant).count();
        total += j.observations.len();
    }
    // 0.6 + 0.4 / 3
    let share = best as f64 / total as f64;
    assert!((share - 0.7333).abs() < 0.03, "{share}");
}
