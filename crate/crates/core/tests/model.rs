mod common;

use common::*;
use delib_core::corpus::{BOS, EOS};
use delib_core::model::{
    beam_decode, greedy_decode, length_normalized, log_softmax, sample_decode, FirstPassDraft,
    ModelConfig, ModelScorer, NmtModel, Pass, Strategy,
};
use delib_core::training::mle_loss_first;
use delib_core::Error;
use delib_tensor::softmax_rows;

fn logits_of(model: &NmtModel, talk: &delib_core::corpus::Talk, pass: Pass, draft: Option<&FirstPassDraft>, i: usize, prefix: &[usize]) -> Vec<Vec<f64>> {
    let mut g = model.graph();
    let enc = model.encode(&mut g, &sources(talk)).unwrap();
    let ctx = match pass {
        Pass::First => model.first_pass_context(&mut g, &enc).unwrap(),
        Pass::Second => model.second_pass_context(&mut g, &enc, draft).unwrap(),
    };
    let l = model.logits(&mut g, &ctx, i, prefix).unwrap();
    let t = g.value(l);
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn draft_of(talk: &delib_core::corpus::Talk) -> FirstPassDraft {
    FirstPassDraft {
        sentences: talk.target.clone(),
    }
}

#[test]
fn distributions_sum_to_one_for_both_passes() {
    let model = tiny_model(1);
    let talk = tiny_talk(2, 3);
    let draft = draft_of(&talk);
    for pass in [Pass::First, Pass::Second] {
        let rows = logits_of(&model, &talk, pass, Some(&draft), 1, &[BOS, 5, 6, 7]);
        let flat: Vec<f64> = rows.concat();
        let t = delib_tensor::Tensor::matrix(rows.len(), TINY_VOCAB, flat).unwrap();
        let p = softmax_rows(&t, None).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let model = tiny_model(3);
    let talk = tiny_talk(4, 2);
    let draft = draft_of(&talk);
    for pass in [Pass::First, Pass::Second] {
        let a = logits_of(&model, &talk, pass, Some(&draft), 0, &[BOS, 5, 6, 7, 8]);
        let b = logits_of(&model, &talk, pass, Some(&draft), 0, &[BOS, 5, 6, 11, 4]);
        assert_eq!(a[..3], b[..3], "positions before the change must be bit-identical");
        assert_ne!(a[3], b[3]);
    }
}

#[test]
fn untrained_model_is_near_uniform() {
    let data = synthetic(40, 5);
    let model = NmtModel::new(ModelConfig::new(data.src_vocab.len(), data.tgt_vocab.len()), 9).unwrap();
    let (mut loss, mut tokens) = (0.0, 0usize);
    for t in &data.talks {
        loss += mle_loss_first(&model, t).unwrap();
        tokens += t.target.iter().map(|s| s.len() + 1).sum::<usize>();
    }
    let per_token = loss / tokens as f64;
    let uniform = (data.tgt_vocab.len() as f64).ln();
    assert!((per_token - uniform).abs() / uniform < 0.05, "{per_token} vs {uniform}");
}

#[test]
fn second_pass_reads_other_sentences_drafts() {
    let model = tiny_model(6);
    let talk = tiny_talk(7, 3);
    let draft = draft_of(&talk);
    let mut other = draft.clone();
    other.sentences[2] = vec![9, 9, 9];
    let a = logits_of(&model, &talk, Pass::Second, Some(&draft), 0, &[BOS, 5]);
    let b = logits_of(&model, &talk, Pass::Second, Some(&other), 0, &[BOS, 5]);
    assert_ne!(a, b);
}

#[test]
fn draft_order_matters() {
    let model = tiny_model(8);
    let talk = tiny_talk(9, 3);
    let draft = draft_of(&talk);
    let mut reversed = draft.clone();
    reversed.sentences.reverse();
    let a = logits_of(&model, &talk, Pass::Second, Some(&draft), 1, &[BOS, 5]);
    let b = logits_of(&model, &talk, Pass::Second, Some(&reversed), 1, &[BOS, 5]);
    assert_ne!(a, b);
}

#[test]
fn zeroed_draft_projection_removes_draft_dependence() {
    let mut model = tiny_model(10);
    model.zero_draft_output();
    let talk = tiny_talk(11, 3);
    let draft = draft_of(&talk);
    let other = FirstPassDraft {
        sentences: vec![vec![4], vec![], vec![11, 10, 9, 8]],
    };
    let a = logits_of(&model, &talk, Pass::Second, Some(&draft), 2, &[BOS, 7, 7]);
    let b = logits_of(&model, &talk, Pass::Second, Some(&other), 2, &[BOS, 7, 7]);
    assert_eq!(a, b);
}

#[test]
fn missing_or_short_draft_is_an_error() {
    let model = tiny_model(12);
    let talk = tiny_talk(13, 3);
    let mut g = model.graph();
    let enc = model.encode(&mut g, &sources(&talk)).unwrap();
    assert!(matches!(model.second_pass_context(&mut g, &enc, None), Err(Error::MissingDraft)));
    let short = FirstPassDraft {
        sentences: vec![vec![4]],
    };
    assert!(matches!(
        model.second_pass_context(&mut g, &enc, Some(&short)),
        Err(Error::MissingDraft)
    ));
}

#[test]
fn prefix_and_length_contracts() {
    let model = tiny_model(14);
    let talk = tiny_talk(15, 1);
    let mut g = model.graph();
    let enc = model.encode(&mut g, &sources(&talk)).unwrap();
    let ctx = model.first_pass_context(&mut g, &enc).unwrap();
    assert!(matches!(model.logits(&mut g, &ctx, 0, &[5, 6]), Err(Error::MissingBos)));
    let long = vec![5; model.config.max_len];
    assert!(matches!(
        model.encode(&mut g, &[long.as_slice()]),
        Err(Error::SentenceTooLong { .. })
    ));
}

#[test]
fn parameters_are_counted_once() {
    let model = NmtModel::new(ModelConfig::new(30, 40), 1).unwrap();
    let s = &model.store;
    let enc = s.num_scalars_with_prefix("enc.");
    let dec1 = s.num_scalars_with_prefix("dec1.");
    let dec2 = s.num_scalars_with_prefix("dec2.");
    let emb = s.num_scalars_with_prefix("src_embed") + s.num_scalars_with_prefix("tgt_embed");
    assert!(enc > 0 && dec1 > 0 && dec2 > dec1);
    assert_eq!(model.num_parameters(), enc + dec1 + dec2 + emb);
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..20 {
        let model = tiny_model(100 + seed);
        let talk = tiny_talk(200 + seed, 2);
        let src = sources(&talk);
        let greedy = model.translate(&src, Pass::First, None, Strategy::Greedy).unwrap();
        let beam = model
            .translate(&src, Pass::First, None, Strategy::Beam { size: 1, alpha: 1.0 })
            .unwrap();
        assert_eq!(greedy, beam, "seed {seed}");
    }
}

#[test]
fn beam_scores_at_least_greedy() {
    for seed in 0..20 {
        let model = tiny_model(300 + seed);
        let talk = tiny_talk(400 + seed, 1);
        let mut g = model.graph();
        let enc = model.encode(&mut g, &sources(&talk)).unwrap();
        let ctx = model.first_pass_context(&mut g, &enc).unwrap();
        let mut scorer = ModelScorer {
            model: &model,
            graph: &mut g,
            ctx: &ctx,
            sentence: 0,
        };
        let limit = 8;
        let greedy = greedy_decode(&mut scorer, limit).unwrap();
        let beam = beam_decode(&mut scorer, limit, 4, 0.0).unwrap();
        assert!(
            length_normalized(&beam, 0.0) >= length_normalized(&greedy, 0.0) - 1e-12,
            "seed {seed}"
        );
    }
}

#[test]
fn decoding_emits_valid_ids_within_limit() {
    let model = tiny_model(21);
    let talk = tiny_talk(22, 3);
    let src = sources(&talk);
    let draft = model.draft(&src).unwrap();
    for strategy in [
        Strategy::Greedy,
        Strategy::Sample { seed: 4 },
        Strategy::Beam { size: 3, alpha: 0.6 },
    ] {
        for pass in [Pass::First, Pass::Second] {
            let out = model.translate(&src, pass, Some(&draft), strategy).unwrap();
            assert_eq!(out.len(), src.len());
            for (h, s) in out.iter().zip(&src) {
                assert!(h.tokens.len() <= model.decode_limit(s.len()));
                assert!(h.tokens.iter().all(|&t| t < TINY_VOCAB && t != BOS && t != EOS));
            }
        }
    }
}

#[test]
fn sampling_is_reproducible_and_follows_the_model() {
    let model = tiny_model(23);
    let talk = tiny_talk(24, 2);
    let src = sources(&talk);
    let a = model.translate(&src, Pass::First, None, Strategy::Sample { seed: 8 }).unwrap();
    let b = model.translate(&src, Pass::First, None, Strategy::Sample { seed: 8 }).unwrap();
    assert_eq!(a, b);

    // empirical first-token frequencies approach the model distribution
    let mut g = model.graph();
    let enc = model.encode(&mut g, &src).unwrap();
    let ctx = model.first_pass_context(&mut g, &enc).unwrap();
    let l = model.logits(&mut g, &ctx, 0, &[BOS]).unwrap();
    let p: Vec<f64> = log_softmax(g.value(l).row(0)).iter().map(|x| x.exp()).collect();
    let mut counts = [0usize; TINY_VOCAB];
    let mut r = rng(1);
    let n = 4000;
    for _ in 0..n {
        let mut scorer = |_: &[usize]| -> delib_core::Result<Vec<f64>> { Ok(p.iter().map(|x| x.ln()).collect()) };
        let h = sample_decode(&mut scorer, 1, &mut r).unwrap();
        let tok = if h.finished { EOS } else { h.tokens[0] };
        counts[tok] += 1;
    }
    for k in 0..TINY_VOCAB {
        assert!((counts[k] as f64 / n as f64 - p[k]).abs() < 0.03, "token {k}");
    }
}

#[test]
fn eos_only_model_translates_to_empty() {
    let mut scorer = |_: &[usize]| -> delib_core::Result<Vec<f64>> {
        let mut v = vec![f64::NEG_INFINITY; TINY_VOCAB];
        v[EOS] = 0.0;
        Ok(v)
    };
    let g = greedy_decode(&mut scorer, 10).unwrap();
    let b = beam_decode(&mut scorer, 10, 4, 1.0).unwrap();
    assert!(g.tokens.is_empty() && b.tokens.is_empty());
}

#[test]
fn checkpoint_round_trip() {
    let model = tiny_model(30);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = NmtModel::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.store, model.store);
}
