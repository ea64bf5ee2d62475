mod common;

use common::*;
use delib_core::corpus::{Batch, Talk};
use delib_core::model::{FirstPassDraft, NmtModel, Pass};
use delib_core::teacher::{RewardTeacher, TeacherConfig};
use delib_core::training::{
    combined_loss, combined_loss_given, joint_mle_loss, mixed_reward, mle_loss_first,
    mle_loss_second, rl_loss, LossWeights, Reward, SelfCritical, TrainConfig, Trainer,
};
use proptest::prelude::*;

fn check_gradients(
    model: &NmtModel,
    talk: &Talk,
    weights: LossWeights,
    draft: Option<&FirstPassDraft>,
    first: Option<SelfCritical>,
    second: Option<SelfCritical>,
) {
    let (err, name) = model_gradient_error(model, talk, weights, draft, first, second);
    assert!(err < 1e-5, "{name}: relative error {err}");
}

fn setup() -> (NmtModel, Talk, FirstPassDraft) {
    let model = tiny_model(41);
    let talk = tiny_talk(42, 3);
    let mut r = rng(43);
    let draft = FirstPassDraft {
        sentences: (0..3).map(|_| random_sentence(&mut r, TINY_VOCAB, 0, 3)).collect(),
    };
    (model, talk, draft)
}

#[test]
fn first_pass_likelihood_gradient() {
    let (model, talk, _) = setup();
    let w = LossWeights { second_pass: false, lambda1: 1.0, lambda2: 1.0 };
    check_gradients(&model, &talk, w, None, None, None);
}

#[test]
fn second_pass_likelihood_gradient() {
    let (model, talk, draft) = setup();
    let w = LossWeights { second_pass: true, lambda1: 0.0, lambda2: 1.0 };
    check_gradients(&model, &talk, w, Some(&draft), None, None);
}

#[test]
fn first_pass_policy_gradient() {
    let (model, talk, _) = setup();
    let w = LossWeights { second_pass: false, lambda1: 0.0, lambda2: 1.0 };
    check_gradients(&model, &talk, w, None, Some(fixed_samples(&talk, 1, 0.7)), None);
}

#[test]
fn second_pass_policy_gradient() {
    let (model, talk, draft) = setup();
    let w = LossWeights { second_pass: true, lambda1: 0.0, lambda2: 0.0 };
    check_gradients(&model, &talk, w, Some(&draft), None, Some(fixed_samples(&talk, 2, -0.4)));
}

#[test]
fn combined_objective_gradient() {
    let (model, talk, draft) = setup();
    let w = LossWeights { second_pass: true, lambda1: 0.85, lambda2: 0.80 };
    check_gradients(
        &model,
        &talk,
        w,
        Some(&draft),
        Some(fixed_samples(&talk, 3, 0.3)),
        Some(fixed_samples(&talk, 4, 1.2)),
    );
}

#[test]
fn teacher_objective_gradient() {
    let cfg = TeacherConfig { vocab: TINY_VOCAB, dim: 6, hidden: 5 };
    let teacher = RewardTeacher::new(cfg, 5).unwrap();
    let doc = tiny_talk(44, 4).target;
    for dropout in [None, Some(9)] {
        let (err, name) = teacher_gradient_error(&teacher, &doc, dropout);
        assert!(err < 1e-5, "{name} dropout={dropout:?}: {err}");
    }
}

#[test]
fn loss_terms_recombine_over_many_talks() {
    let model = tiny_model(50);
    let cfg = TeacherConfig { vocab: TINY_VOCAB, dim: 6, hidden: 5 };
    let teacher = RewardTeacher::new(cfg, 51).unwrap();
    let reward = Reward::Teacher(&teacher);
    for k in 0..50 {
        let talk = tiny_talk(1000 + k, 1 + (k as usize % 4));
        let w = LossWeights { second_pass: true, lambda1: 0.85, lambda2: 0.80 };
        let (t, _) = combined_loss(&model, &talk, Some(&reward), w, None, k, false).unwrap();
        assert!((t.loss - t.recombined()).abs() < 1e-9 * t.loss.abs().max(1.0), "talk {k}");

        let draft = model.draft(&sources(&talk)).unwrap();
        assert_eq!(t.mle1, mle_loss_first(&model, &talk).unwrap());
        assert_eq!(t.mle2.unwrap(), mle_loss_second(&model, &talk, Some(&draft)).unwrap());
        let sc1 = t.first.as_ref().unwrap();
        let sc2 = t.second.as_ref().unwrap();
        assert_eq!(t.rl1.unwrap(), rl_loss(&model, &talk, Pass::First, None, &sc1.sampled, sc1.advantage).unwrap());
        assert_eq!(
            t.rl2.unwrap(),
            rl_loss(&model, &talk, Pass::Second, Some(&draft), &sc2.sampled, sc2.advantage).unwrap()
        );
        assert_eq!(sc1.advantage, sc1.reward_sampled - sc1.reward_greedy);
    }
}

#[test]
fn unit_lambdas_reduce_to_joint_likelihood() {
    let model = tiny_model(52);
    for k in 0..20 {
        let talk = tiny_talk(2000 + k, 3);
        let w = LossWeights { second_pass: true, lambda1: 1.0, lambda2: 1.0 };
        let (t, _) = combined_loss(&model, &talk, None, w, None, k, false).unwrap();
        assert_eq!(t.loss, joint_mle_loss(&model, &talk).unwrap());
        assert!(t.rl1.is_none() && t.rl2.is_none());
    }
}

#[test]
fn rl_terms_without_reward_are_rejected() {
    let model = tiny_model(53);
    let talk = tiny_talk(54, 2);
    let w = LossWeights { second_pass: false, lambda1: 0.5, lambda2: 1.0 };
    assert!(combined_loss(&model, &talk, None, w, None, 0, false).is_err());
    let bad = LossWeights { second_pass: false, lambda1: 1.5, lambda2: 1.0 };
    assert!(combined_loss(&model, &talk, None, bad, None, 0, false).is_err());
}

#[test]
fn combined_loss_is_deterministic_for_a_seed() {
    let model = tiny_model(55);
    let talk = tiny_talk(56, 3);
    let w = LossWeights { second_pass: true, lambda1: 0.5, lambda2: 0.5 };
    let a = combined_loss(&model, &talk, Some(&Reward::BleuDoc), w, None, 9, true).unwrap();
    let b = combined_loss(&model, &talk, Some(&Reward::BleuDoc), w, None, 9, true).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.unwrap().global_norm(), b.1.unwrap().global_norm());
}

#[test]
fn padding_does_not_change_the_loss() {
    let model = tiny_model(57);
    let talk = tiny_talk(58, 4);
    let batch = Batch::from_talk(&talk);
    let padded = batch.with_extra_padding(5);
    let rebuild = |b: &Batch| {
        let src = b.sources().into_iter().map(<[usize]>::to_vec).collect();
        let tgt = b.targets().unwrap().into_iter().map(<[usize]>::to_vec).collect();
        Talk::new(talk.id.clone(), src, tgt).unwrap()
    };
    assert_eq!(
        joint_mle_loss(&model, &rebuild(&batch)).unwrap(),
        joint_mle_loss(&model, &rebuild(&padded)).unwrap()
    );
}

#[test]
fn training_leaves_the_teacher_untouched() {
    let data = synthetic(6, 3);
    let teacher = RewardTeacher::new(TeacherConfig::new(data.tgt_vocab.len()), 1).unwrap();
    let before = teacher.store.clone();
    let config = TrainConfig {
        mode: "two-pass-rl".parse().unwrap(),
        d_model: 8,
        heads: 2,
        d_ff: 8,
        enc_layers: 1,
        dec_layers: 1,
        ..TrainConfig::default()
    };
    let model = NmtModel::new(
        delib_core::training::model_config(&config, data.src_vocab.len(), data.tgt_vocab.len()),
        1,
    )
    .unwrap();
    let reward = Reward::Teacher(&teacher);
    let mut trainer = Trainer::new(config, model).unwrap();
    let start = trainer.model.store.clone();
    trainer.train_steps(&data.talks, Some(&reward), 3).unwrap();
    assert_eq!(teacher.store, before);
    assert_ne!(trainer.model.store, start);
}

#[test]
fn mixed_reward_is_linear() {
    assert_eq!(mixed_reward(0.25, 0.5, 2.0), 1.25);
    assert_eq!(mixed_reward(0.25, 0.5, 0.0), 0.25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn loss_is_linear_in_lambda(l1 in 0.0f64..1.0, l2 in 0.0f64..1.0, adv in -2.0f64..2.0, seed in 0u64..1000) {
        let model = tiny_model(60);
        let talk = tiny_talk(seed, 2);
        let draft = model.draft(&sources(&talk)).unwrap();
        let first = fixed_samples(&talk, seed + 1, adv);
        let second = fixed_samples(&talk, seed + 2, -adv);
        let w = LossWeights { second_pass: true, lambda1: l1, lambda2: l2 };
        let (t, _) = combined_loss_given(&model, &talk, w, Some(&draft), Some(first), Some(second), false).unwrap();
        let expected = l1 * t.mle1 + (1.0 - l1) * t.rl1.unwrap() + l2 * t.mle2.unwrap() + (1.0 - l2) * t.rl2.unwrap();
        prop_assert!((t.loss - expected).abs() < 1e-9 * expected.abs().max(1.0));
    }
}

#[test]
fn sampled_equal_to_greedy_gives_zero_policy_gradient() {
    let model = tiny_model(61);
    let teacher = RewardTeacher::new(TeacherConfig { vocab: TINY_VOCAB, dim: 6, hidden: 5 }, 62).unwrap();
    for reward in [Reward::Teacher(&teacher), Reward::BleuDoc] {
        for k in 0..50 {
            let talk = tiny_talk(3000 + k, 1 + (k as usize % 4));
            let greedy: Vec<Vec<usize>> = model
                .translate(&sources(&talk), Pass::First, None, delib_core::model::Strategy::Greedy)
                .unwrap()
                .into_iter()
                .map(|h| h.tokens)
                .collect();
            let sampled = greedy.clone();
            let rs = reward.score(&sampled, &talk.target).unwrap();
            let rg = reward.score(&greedy, &talk.target).unwrap();
            let sc = SelfCritical {
                sampled,
                greedy,
                reward_sampled: rs,
                reward_greedy: rg,
                advantage: rs - rg,
            };
            assert_eq!(sc.advantage, 0.0);
            let w = LossWeights { second_pass: false, lambda1: 0.0, lambda2: 1.0 };
            let (t, g) = combined_loss_given(&model, &talk, w, None, Some(sc), None, true).unwrap();
            assert_eq!(t.rl1, Some(0.0));
            assert_eq!(g.unwrap().global_norm(), 0.0);
        }
    }
}

#[test]
fn single_sentence_talks_get_zero_teacher_advantage() {
    let model = tiny_model(63);
    let teacher = RewardTeacher::new(TeacherConfig { vocab: TINY_VOCAB, dim: 6, hidden: 5 }, 64).unwrap();
    let reward = Reward::Teacher(&teacher);
    for k in 0..50 {
        let talk = tiny_talk(4000 + k, 1);
        let sc = delib_core::training::self_critical(&model, &talk, Pass::First, None, &reward, k).unwrap();
        assert_eq!(sc.reward_sampled, 0.0);
        assert_eq!(sc.reward_greedy, 0.0);
        assert_eq!(sc.advantage, 0.0);
    }
}
