mod common;

use common::*;
use delib_core::corpus::UNK;
use delib_core::teacher::{
    train_teacher, Direction, RewardTeacher, TeacherConfig, TeacherTrainConfig,
};
use delib_tensor::cosine_similarity;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn small() -> RewardTeacher {
    RewardTeacher::new(TeacherConfig { vocab: TINY_VOCAB, dim: 6, hidden: 5 }, 3).unwrap()
}

fn doc(seed: u64, n: usize) -> Vec<Vec<usize>> {
    tiny_talk(seed, n).target.into_iter().map(|s| if s.is_empty() { vec![4] } else { s }).collect()
}

#[test]
fn sentence_embedding_is_the_sum_of_word_embeddings() {
    let t = small();
    let table = t.store.get(t.store.id("teacher.embed").unwrap());
    let sentence = [4, 7, 7, 11];
    let mut want = vec![0.0; 6];
    for &w in &sentence {
        for (k, v) in want.iter_mut().enumerate() {
            *v += table.row(w)[k];
        }
    }
    let got = t.sentence_embed(&sentence).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn reverse_reading_reverses_sentences_only() {
    let t = small();
    let d = doc(1, 4);
    let mut reversed = d.clone();
    reversed.reverse();
    assert_eq!(
        t.document_embed(&d, Direction::Reverse).unwrap(),
        t.document_embed(&reversed, Direction::Forward).unwrap()
    );
    let loss = t.teacher_loss(&d).unwrap();
    let f = t.document_embed(&d, Direction::Forward).unwrap();
    let r = t.document_embed(&d, Direction::Reverse).unwrap();
    assert!((loss - cosine_similarity(&f, &r).unwrap()).abs() < 1e-12);
}

#[test]
fn reward_of_gold_against_itself() {
    let t = small();
    let d = doc(2, 5);
    let f = t.document_embed(&d, Direction::Forward).unwrap();
    let r = t.document_embed(&d, Direction::Reverse).unwrap();
    let want = 1.0 - cosine_similarity(&f, &r).unwrap();
    assert!((t.order_reward(&d, &d).unwrap() - want).abs() < 1e-12);
    let single = vec![vec![5, 6]];
    assert_eq!(t.order_reward(&[vec![9]], &single).unwrap(), 0.0);
}

#[test]
fn empty_generated_sentences_read_as_unknown() {
    let t = small();
    let gold = doc(3, 3);
    let generated = vec![vec![5], Vec::new(), vec![6]];
    let filled = vec![vec![5], vec![UNK], vec![6]];
    assert_eq!(
        t.order_reward(&generated, &gold).unwrap(),
        t.order_reward(&filled, &gold).unwrap()
    );
}

#[test]
fn checkpoint_round_trip() {
    let mut t = small();
    t.vocab_fingerprint = "abc".into();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.ckpt");
    t.save(&path).unwrap();
    let back = RewardTeacher::load(&path).unwrap();
    assert_eq!(back.store, t.store);
    assert_eq!(back.config, t.config);
    assert_eq!(back.vocab_fingerprint, "abc");
}

#[test]
fn training_lowers_the_order_loss() {
    let data = synthetic(300, 12);
    let docs: Vec<Vec<Vec<usize>>> = data.talks.iter().map(|t| t.target.clone()).collect();
    let (train, held_out) = docs.split_at(250);
    let config = TeacherConfig::new(data.tgt_vocab.len());
    let cfg = TeacherTrainConfig { epochs: 2, ..TeacherTrainConfig::default() };
    let (trained, history) = train_teacher(train, config, &cfg).unwrap();
    assert_eq!(history.len(), 2);
    let random = RewardTeacher::new(config, 99).unwrap();
    let mean = |t: &RewardTeacher| {
        held_out.iter().map(|d| t.teacher_loss(d).unwrap()).sum::<f64>() / held_out.len() as f64
    };
    assert!(mean(&trained) < mean(&random), "{} vs {}", mean(&trained), mean(&random));
}

#[test]
fn single_sentence_corpus_trains_to_nothing() {
    let docs = vec![vec![vec![4, 5]], vec![vec![6]]];
    let config = TeacherConfig { vocab: TINY_VOCAB, dim: 4, hidden: 4 };
    let (t, history) = train_teacher(&docs, config, &TeacherTrainConfig::default()).unwrap();
    assert_eq!(t.store, RewardTeacher::new(config, TeacherTrainConfig::default().seed).unwrap().store);
    assert!(history.iter().all(|&l| l == 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reward_ignores_word_order_and_is_bounded(seed in 0u64..100_000, n in 1usize..6) {
        let t = small();
        let gold = doc(seed, n);
        let generated = doc(seed + 1, n);
        let mut permuted = generated.clone();
        let mut r = rng(seed);
        for s in &mut permuted {
            s.shuffle(&mut r);
        }
        let a = t.order_reward(&generated, &gold).unwrap();
        let b = t.order_reward(&permuted, &gold).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-2.0..=2.0).contains(&a));
        let l = t.teacher_loss(&gold).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&l));
    }
}
