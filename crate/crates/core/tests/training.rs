mod common;

use mtorl_core::data::SequenceSample;
use mtorl_core::model::{BoundParams, Model, RewardHead};
use mtorl_core::numerics::{grad_check, GradCheckOptions, ParamSet, Tape, Tensor};
use mtorl_core::training::{
    batch_loss, batch_loss_on_tape, classification_metrics, dpo_loss, evaluate, fit, policy_loss, total_loss,
    AdamConfig, Averaging, LossWeights, PairSample, RewardLoss, TrainConfig,
};
use proptest::prelude::*;

const F: usize = 10;
const N: usize = 6;
const M: usize = 3;

fn model(head: RewardHead, seed: u64) -> Model {
    let cfg = mtorl_core::model::ModelConfig {
        reward_head: head,
        ..common::small_config(8, F, N, M)
    };
    Model::init(cfg, seed).unwrap()
}

fn samples(count: usize, pad: usize, seed: u64) -> Vec<SequenceSample> {
    common::random_samples(count, F, N, M, pad, RewardHead::Bounded, seed)
}

#[test]
fn dpo_reference_value() {
    // Zeroing the action weights makes the policy equal softmax(action bias).
    let mut m = model(RewardHead::Bounded, 0);
    for (name, t) in m.params.iter_mut() {
        if name == "action.w" {
            t.scale_assign(0.0);
        }
    }
    let bias = m.params.get_mut("action.b").unwrap();
    for t in 0..N {
        bias.set(0, t, 9f64.ln() + 2f64.ln());
        bias.set(1, t, 0.0);
        bias.set(2, t, 2f64.ln());
    }
    // p = (18, 1, 2) / 21, so the winner/loser probability ratio is 18.
    let mut w = SequenceSample::padding("w", F, N);
    let mut l = SequenceSample::padding("l", F, N);
    w.valid_mask[N - 1] = true;
    l.valid_mask[N - 1] = true;
    w.reward_labels[N - 1] = 1.0;
    w.action_labels[N - 1] = 0;
    l.action_labels[N - 1] = 1;
    let beta = 0.1;
    let pair = PairSample::new(w, l).unwrap();
    let got = dpo_loss(&[pair], &m, beta).unwrap();
    let expect = -(1.0 / (1.0 + (-(beta * 18f64.ln())).exp())).ln();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");

    // Closed form for probabilities 0.9 / 0.1: −ln σ(0.1 · ln 9).
    let oracle = -(1.0 / (1.0 + (-(0.1 * (0.9f64.ln() - 0.1f64.ln()))).exp())).ln();
    assert!((oracle - 0.589_309).abs() < 1e-6);
}

#[test]
fn dpo_symmetry_gives_ln2() {
    let m = model(RewardHead::Bounded, 1);
    let mut a = samples(1, 0, 3).remove(0);
    let mut b = a.clone();
    a.reward_labels = vec![1.0; N];
    b.reward_labels = vec![0.0; N];
    let got = dpo_loss(&[PairSample::new(a, b).unwrap()], &m, 0.1).unwrap();
    assert!((got - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn pair_requires_strict_gap_and_empty_is_zero() {
    let s = samples(1, 0, 4).remove(0);
    assert!(PairSample::new(s.clone(), s).is_err());
    assert_eq!(dpo_loss(&[], &model(RewardHead::Bounded, 0), 0.1).unwrap(), 0.0);
}

#[test]
fn total_without_auxiliary_terms_is_policy_loss() {
    let m = model(RewardHead::Bounded, 2);
    let batch = samples(4, 1, 5);
    let zero = LossWeights {
        mu: 0.0,
        lambda: 0.0,
        beta: 0.1,
    };
    let b = total_loss(&m, &batch, &[(0, 1)], &zero, RewardLoss::Mse).unwrap();
    assert_eq!(b.total, b.policy);

    // The policy term matches the standalone helper on a single sample.
    let single = &batch[..1];
    let b = total_loss(&m, single, &[], &zero, RewardLoss::Mse).unwrap();
    let out = m.forward(&single[0]).unwrap();
    let direct = policy_loss(&out.action_probs, &single[0].action_labels, &single[0].valid_mask).unwrap();
    assert!((b.policy - direct).abs() < 1e-15);
}

#[test]
fn weighted_combination() {
    let m = model(RewardHead::Bounded, 2);
    let batch = samples(4, 0, 6);
    let w = LossWeights::default();
    let b = total_loss(&m, &batch, &[(0, 1), (2, 3)], &w, RewardLoss::Mse).unwrap();
    let expect = b.policy + w.mu * b.reward + w.lambda * b.dpo;
    assert!((b.total - expect).abs() < 1e-12);
    assert!((1.0 + 0.08 * 2.0 + 1.4 * 0.5 - 1.86f64).abs() < 1e-12);
}

#[test]
fn padded_samples_change_no_loss_or_gradient() {
    let m = model(RewardHead::Bounded, 3);
    let batch = samples(4, 2, 7);
    let pairs = [(0, 1), (2, 3)];
    let w = LossWeights::default();
    let (a, ga) = batch_loss(&m, &batch, &pairs, &w, RewardLoss::Mse, true).unwrap();

    let mut padded = batch.clone();
    padded.insert(1, SequenceSample::padding("p", F, N));
    padded.push(SequenceSample::padding("q", F, N));
    let shifted = [(0, 2), (3, 4), (1, 5)];
    let (b, gb) = batch_loss(&m, &padded, &shifted, &w, RewardLoss::Mse, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn padded_steps_contribute_nothing() {
    let m = model(RewardHead::Bounded, 4);
    let batch = samples(3, 3, 8);
    let mut changed = batch.clone();
    for s in &mut changed {
        for t in 0..3 {
            s.action_labels[t] = (s.action_labels[t] + 1) % M;
            s.reward_labels[t] = 0.77;
        }
    }
    let w = LossWeights::default();
    let a = total_loss(&m, &batch, &[(0, 1)], &w, RewardLoss::Mse).unwrap();
    let b = total_loss(&m, &changed, &[(0, 1)], &w, RewardLoss::Mse).unwrap();
    assert_eq!(a, b);
}

#[derive(Clone, Copy)]
enum Term {
    Policy,
    Reward,
    Dpo,
}

fn check_term(term: Term) {
    let m = model(RewardHead::Sigmoid, 9);
    let batch = common::random_samples(3, F, N, M, 1, RewardHead::Sigmoid, 9);
    let pairs = [(0, 1)];
    let cfg = m.config.clone();
    let eval = |p: &ParamSet, grad: bool| -> mtorl_core::Result<(f64, Option<ParamSet>)> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, p);
        let vars = batch_loss_on_tape(
            &mut tape,
            &bound,
            &cfg,
            &batch,
            &pairs,
            &LossWeights::default(),
            RewardLoss::Bce,
            None,
        )?;
        let v = match term {
            Term::Policy => vars.policy,
            Term::Reward => vars.reward,
            Term::Dpo => vars.dpo,
        }
        .unwrap();
        let g = if grad { Some(tape.backward(v)?) } else { None };
        Ok((tape.scalar(v), g))
    };
    let obj = (
        |p: &ParamSet| eval(p, false).map(|r| r.0),
        |p: &ParamSet| eval(p, true).map(|(v, g)| (v, g.unwrap())),
    );
    let opts = GradCheckOptions {
        eps: 1e-4,
        max_per_tensor: Some(24),
    };
    let report = grad_check(&obj, &m.params, &opts).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn each_loss_term_has_correct_gradients() {
    check_term(Term::Policy);
    check_term(Term::Reward);
    check_term(Term::Dpo);
}

#[test]
fn overfits_a_small_dataset() {
    let cfg = common::small_config(16, F, N, M);
    let data = common::random_samples(32, F, N, M, 0, RewardHead::Bounded, 1);
    let tc = TrainConfig {
        patience: 0,
        stop_below_policy_loss: Some(0.01),
        ..TrainConfig::default()
    };
    let r = fit(Model::init(cfg, 0).unwrap(), &data, &[], RewardLoss::Mse, &tc).unwrap();
    assert!(r.history.len() <= 800);
    let (b, _) = batch_loss(&r.model, &data, &[], &tc.loss, RewardLoss::Mse, false).unwrap();
    assert!(b.policy < 0.01, "policy CE {}", b.policy);
    let report = evaluate(&r.model, &data, RewardLoss::Mse, Averaging::Macro).unwrap();
    assert_eq!(report.f1, 1.0);
}

#[test]
fn fit_is_deterministic_and_frozen_at_zero_lr() {
    let cfg = mtorl_core::model::ModelConfig {
        dropout: 0.2,
        ..common::small_config(8, F, N, M)
    };
    let data = samples(12, 1, 2);
    let val = samples(4, 0, 3);
    let tc = TrainConfig {
        max_epochs: 5,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let init = Model::init(cfg, 1).unwrap();
    let a = fit(init.clone(), &data, &val, RewardLoss::Mse, &tc).unwrap();
    let b = fit(init.clone(), &data, &val, RewardLoss::Mse, &tc).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 5);
    assert!(a.history[0].val_f1.is_some());

    let frozen = TrainConfig {
        optimizer: AdamConfig {
            lr: 0.0,
            weight_decay: 1e-4,
            ..AdamConfig::default()
        },
        ..tc
    };
    let c = fit(init.clone(), &data, &val, RewardLoss::Mse, &frozen).unwrap();
    assert_eq!(c.model.params, init.params);
}

#[test]
fn non_finite_loss_reports_batch() {
    let mut m = model(RewardHead::Bounded, 0);
    m.params.get_mut("embed.w").unwrap().values_mut()[0] = f64::NAN;
    let tc = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let err = fit(m, &samples(4, 0, 1), &[], RewardLoss::Mse, &tc).unwrap_err();
    assert!(err.to_string().contains("batch 0"), "{err}");
}

#[test]
fn early_stopping_honours_patience() {
    let data = samples(12, 0, 2);
    let tc = TrainConfig {
        max_epochs: 200,
        patience: 3,
        optimizer: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let r = fit(model(RewardHead::Bounded, 0), &data, &data, RewardLoss::Mse, &tc).unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.history.len(), 4);
    assert_eq!(r.best_epoch, 1);
}

proptest! {
    #[test]
    fn metrics_are_bounded(cells in proptest::collection::vec(0u64..20, 9), micro in any::<bool>()) {
        let cm: Vec<Vec<u64>> = cells.chunks(3).map(|c| c.to_vec()).collect();
        let avg = if micro { Averaging::Micro } else { Averaging::Macro };
        let r = classification_metrics(&cm, avg);
        for v in [r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let h = if r.precision + r.recall > 0.0 {
            2.0 * r.precision * r.recall / (r.precision + r.recall)
        } else {
            0.0
        };
        prop_assert!((r.f1 - h).abs() < 1e-9);
    }

    #[test]
    fn policy_loss_nonnegative(rows in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 1..6)) {
        let n = rows.len();
        let norm: Vec<Vec<f64>> = rows.iter().map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        }).collect();
        let p = Tensor::from_rows(&norm).unwrap();
        let l = policy_loss(&p, &vec![1; n], &vec![true; n]).unwrap();
        prop_assert!(l >= 0.0);
    }
}
