#![allow(dead_code)]

use delib_core::corpus::{
    encode_talks, make_synthetic_discourse_corpus, SynthConfig, Talk, TextTalk, Vocabulary,
};
use delib_core::eval::WordVectors;
use delib_core::model::{FirstPassDraft, ModelConfig, NmtModel};
use delib_core::teacher::RewardTeacher;
use delib_core::training::{combined_loss_given, LossWeights, SelfCritical};
use delib_tensor::gradcheck::{relative_error, DEFAULT_STEP};
use delib_tensor::{Gradients, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_VOCAB: usize = 12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, min: usize, max: usize) -> Vec<usize> {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| rng.random_range(4..vocab)).collect()
}

/// A talk over ids `4..TINY_VOCAB` with `sentences` sentences.
pub fn tiny_talk(seed: u64, sentences: usize) -> Talk {
    let mut r = rng(seed);
    let source = (0..sentences).map(|_| random_sentence(&mut r, TINY_VOCAB, 1, 4)).collect();
    let target = (0..sentences).map(|_| random_sentence(&mut r, TINY_VOCAB, 1, 4)).collect();
    Talk::new(format!("tiny-{seed}"), source, target).unwrap()
}

pub fn tiny_model(seed: u64) -> NmtModel {
    NmtModel::new(ModelConfig::tiny(TINY_VOCAB, TINY_VOCAB), seed).unwrap()
}

pub fn sources(talk: &Talk) -> Vec<&[usize]> {
    talk.source.iter().map(Vec::as_slice).collect()
}

pub struct Synthetic {
    pub source: Vec<TextTalk>,
    pub target: Vec<TextTalk>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub talks: Vec<Talk>,
}

pub fn synthetic(n_talks: usize, seed: u64) -> Synthetic {
    let cfg = SynthConfig {
        n_talks,
        seed,
        ..SynthConfig::default()
    };
    let (source, target) = make_synthetic_discourse_corpus(&cfg).unwrap();
    let src_vocab = Vocabulary::build(source.iter().flatten().map(Vec::as_slice), 1000).unwrap();
    let tgt_vocab = Vocabulary::build(target.iter().flatten().map(Vec::as_slice), 1000).unwrap();
    let talks = encode_talks(&source, Some(&target), &src_vocab, &tgt_vocab, 16).unwrap();
    Synthetic {
        source,
        target,
        src_vocab,
        tgt_vocab,
        talks,
    }
}

/// Straightforward BLEU: n-grams counted by linear scan, precisions
/// multiplied directly.
pub fn oracle_bleu(hyps: &[Vec<u8>], refs: &[Vec<u8>], max_n: usize, smoothing: bool) -> f64 {
    let grams = |s: &[u8], n: usize| -> Vec<Vec<u8>> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
    };
    let (mut c, mut r) = (0usize, 0usize);
    let mut product = 1.0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(refs) {
            let hg = grams(h, n);
            let mut rg = grams(rf, n);
            total += hg.len();
            for g in &hg {
                if let Some(pos) = rg.iter().position(|x| x == g) {
                    rg.remove(pos);
                    matched += 1;
                }
            }
        }
        let (m, t) = if smoothing && n > 1 {
            (matched as f64 + 1.0, total as f64 + 1.0)
        } else {
            (matched as f64, total as f64)
        };
        if m == 0.0 || t == 0.0 {
            return 0.0;
        }
        product *= m / t;
    }
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
    }
    if c == 0 {
        return 0.0;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * product.powf(1.0 / max_n as f64)
}

pub fn oracle_coherence(docs: &[Vec<Vec<String>>], vectors: &WordVectors) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0;
    for d in docs {
        for i in 1..d.len() {
            let embed = |s: &Vec<String>| {
                let mut v = vec![0.0; vectors.dim()];
                for w in s {
                    if let Some(x) = vectors.get(w) {
                        for k in 0..v.len() {
                            v[k] += x[k];
                        }
                    }
                }
                v
            };
            let (a, b) = (embed(&d[i - 1]), embed(&d[i]));
            let dot: f64 = (0..a.len()).map(|k| a[k] * b[k]).sum();
            let na = (0..a.len()).map(|k| a[k] * a[k]).sum::<f64>().sqrt();
            let nb = (0..b.len()).map(|k| b[k] * b[k]).sum::<f64>().sqrt();
            total += if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
            pairs += 1;
        }
    }
    total / pairs as f64
}

pub fn random_vectors(r: &mut ChaCha8Rng, words: usize, dim: usize) -> WordVectors {
    let mut v = WordVectors::new(dim);
    for w in 0..words {
        v.insert(format!("w{w}"), (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap();
    }
    v
}

pub fn random_docs(r: &mut ChaCha8Rng, words: usize) -> Vec<Vec<Vec<String>>> {
    let n = r.random_range(1..5);
    (0..n)
        .map(|_| {
            let len = r.random_range(2..6);
            (0..len)
                .map(|_| {
                    let k = r.random_range(0..5);
                    // a few words fall outside the vector vocabulary
                    (0..k).map(|_| format!("w{}", r.random_range(0..words + 3))).collect()
                })
                .collect()
        })
        .collect()
}

pub fn random_segment(r: &mut ChaCha8Rng, alphabet: u8, max_len: usize) -> Vec<u8> {
    let n = r.random_range(0..=max_len);
    (0..n).map(|_| r.random_range(0..alphabet)).collect()
}

pub fn noisy_copy(r: &mut ChaCha8Rng, s: &[u8], alphabet: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(s.len() + 1);
    for &t in s {
        if r.random_bool(0.9) {
            out.push(if r.random_bool(0.15) { r.random_range(0..alphabet) } else { t });
        }
    }
    if r.random_bool(0.3) {
        out.push(r.random_range(0..alphabet));
    }
    out
}


// Key biases have an exactly zero gradient (softmax shift invariance), so
// gradient comparisons need a floor above the rounding noise of the
// differences.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn fixed_samples(talk: &Talk, seed: u64, advantage: f64) -> SelfCritical {
    let mut r = rng(seed);
    let sampled = talk.source.iter().map(|_| random_sentence(&mut r, TINY_VOCAB, 0, 3)).collect();
    SelfCritical {
        sampled,
        greedy: Vec::new(),
        reward_sampled: advantage,
        reward_greedy: 0.0,
        advantage,
    }
}

fn compare(store: &ParamStore, grads: &Gradients, mut loss: impl FnMut(ParamId, usize, f64) -> f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let mut numeric = vec![0.0; n];
        for (i, out) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[i];
            *out = (loss(id, i, orig + DEFAULT_STEP) - loss(id, i, orig - DEFAULT_STEP)) / (2.0 * DEFAULT_STEP);
        }
        let shape = store.get(id).shape().to_vec();
        let numeric = Tensor::new(shape.clone(), numeric).unwrap();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::new(shape, vec![0.0; n]).unwrap());
        let err = relative_error(&analytic, &numeric, GRAD_FLOOR);
        if err > worst.0 {
            worst = (err, store.name(id).to_string());
        }
    }
    worst
}

/// Largest relative error between the analytic gradient of the combined
/// objective and central differences, over every parameter of `model`.
pub fn model_gradient_error(
    model: &NmtModel,
    talk: &Talk,
    weights: LossWeights,
    draft: Option<&FirstPassDraft>,
    first: Option<SelfCritical>,
    second: Option<SelfCritical>,
) -> (f64, String) {
    let (_, grads) =
        combined_loss_given(model, talk, weights, draft, first.clone(), second.clone(), true).unwrap();
    let mut probe = model.clone();
    compare(&model.store, &grads.unwrap(), |id, i, v| {
        let orig = probe.store.get(id).data()[i];
        probe.store.get_mut(id).data_mut()[i] = v;
        let (t, _) =
            combined_loss_given(&probe, talk, weights, draft, first.clone(), second.clone(), false).unwrap();
        probe.store.get_mut(id).data_mut()[i] = orig;
        t.loss
    })
}

/// As [`model_gradient_error`] for the teacher objective, optionally with a
/// fixed dropout mask.
pub fn teacher_gradient_error(teacher: &RewardTeacher, doc: &[Vec<usize>], dropout: Option<u64>) -> (f64, String) {
    let value = |t: &RewardTeacher| {
        let mut g = t.graph();
        let mut r = rng(dropout.unwrap_or(0));
        let d = dropout.map(|_| (0.3, &mut r as &mut dyn rand::RngCore));
        let l = t.loss_var(&mut g, doc, d).unwrap();
        (g.value(l).item().unwrap(), g.backward(l).unwrap())
    };
    let (_, grads) = value(teacher);
    let mut probe = teacher.clone();
    compare(&teacher.store, &grads, |id, i, v| {
        let orig = probe.store.get(id).data()[i];
        probe.store.get_mut(id).data_mut()[i] = v;
        let l = value(&probe).0;
        probe.store.get_mut(id).data_mut()[i] = orig;
        l
    })
}
