//! Absolute-order reward teacher.
//!
//! A sentence is the sum of its word embeddings; a document is the final
//! state of a GRU run over its sentence vectors from a zero state. The same
//! GRU reads the document forward and in reverse sentence order, and the
//! teacher is trained to push the two readings apart by minimising their
//! cosine similarity.

use std::collections::BTreeMap;
use std::path::Path;

use delib_tensor::nn::{Embedding, GruCell};
use delib_tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::UNK;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub vocab: usize,
    pub dim: usize,
    pub hidden: usize,
}

impl TeacherConfig {
    pub fn new(vocab: usize) -> Self {
        TeacherConfig {
            vocab,
            dim: 100,
            hidden: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RewardTeacher {
    pub config: TeacherConfig,
    pub store: ParamStore,
    embed: Embedding,
    gru: GruCell,
    /// Fingerprint of the vocabulary the teacher was trained with.
    pub vocab_fingerprint: String,
}

impl RewardTeacher {
    pub fn new(config: TeacherConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = Embedding::new(&mut store, "teacher.embed", config.vocab, config.dim, &mut rng)?;
        let gru = GruCell::new(&mut store, "teacher.gru", config.dim, config.hidden, &mut rng)?;
        Ok(RewardTeacher {
            config,
            store,
            embed,
            gru,
            vocab_fingerprint: String::new(),
        })
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.store)
    }

    pub fn sentence_embed_var(&self, g: &mut Graph, sentence: &[usize]) -> Result<Var> {
        if sentence.is_empty() {
            return Err(Error::EmptySentence);
        }
        let rows = self.embed.forward(g, sentence)?;
        Ok(g.sum_rows(rows)?)
    }

    /// Stacked sentence vectors `[n, dim]`.
    fn sentence_matrix(&self, g: &mut Graph, doc: &[Vec<usize>]) -> Result<Var> {
        if doc.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let rows = doc
            .iter()
            .map(|s| self.sentence_embed_var(g, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)?
        })
    }

    fn run(&self, g: &mut Graph, sentences: Var, n: usize, direction: Direction) -> Result<Var> {
        let h0 = g.constant(Tensor::zeros(1, self.config.hidden));
        let mut inputs = (0..n)
            .map(|i| g.slice_rows(sentences, i, i + 1))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if direction == Direction::Reverse {
            inputs.reverse();
        }
        Ok(self.gru.run(g, h0, &inputs)?)
    }

    pub fn document_embed_var(&self, g: &mut Graph, doc: &[Vec<usize>], direction: Direction) -> Result<Var> {
        let s = self.sentence_matrix(g, doc)?;
        self.run(g, s, doc.len(), direction)
    }

    /// `cos(f(forward), f(reverse))`. With `dropout = Some((keep, rng))` one
    /// dropout mask is applied to the sentence vectors and shared by both
    /// readings.
    pub fn loss_var(
        &self,
        g: &mut Graph,
        doc: &[Vec<usize>],
        dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> Result<Var> {
        let mut s = self.sentence_matrix(g, doc)?;
        if let Some((keep, rng)) = dropout {
            s = g.dropout(s, keep, rng);
        }
        let fwd = self.run(g, s, doc.len(), Direction::Forward)?;
        let rev = self.run(g, s, doc.len(), Direction::Reverse)?;
        Ok(g.cosine(fwd, rev)?)
    }

    pub fn sentence_embed(&self, sentence: &[usize]) -> Result<Vec<f64>> {
        let mut g = self.graph();
        let v = self.sentence_embed_var(&mut g, sentence)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn document_embed(&self, doc: &[Vec<usize>], direction: Direction) -> Result<Vec<f64>> {
        let mut g = self.graph();
        let v = self.document_embed_var(&mut g, doc, direction)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn teacher_loss(&self, doc: &[Vec<usize>]) -> Result<f64> {
        let mut g = self.graph();
        let v = self.loss_var(&mut g, doc, None)?;
        Ok(g.value(v).item()?)
    }

    /// `cos(f(→gen), f(→gold)) − cos(f(→gen), f(←gold))`. Empty sentences are
    /// read as a single UNK.
    pub fn order_reward(&self, generated: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
        let fill = |doc: &[Vec<usize>]| -> Vec<Vec<usize>> {
            doc.iter()
                .map(|s| if s.is_empty() { vec![UNK] } else { s.clone() })
                .collect()
        };
        let (generated, gold) = (fill(generated), fill(gold));
        let mut g = self.graph();
        let gen = self.document_embed_var(&mut g, &generated, Direction::Forward)?;
        let gs = self.sentence_matrix(&mut g, &gold)?;
        let fwd = self.run(&mut g, gs, gold.len(), Direction::Forward)?;
        let rev = self.run(&mut g, gs, gold.len(), Direction::Reverse)?;
        let a = delib_tensor::cosine_similarity(g.value(gen).data(), g.value(fwd).data())?;
        let b = delib_tensor::cosine_similarity(g.value(gen).data(), g.value(rev).data())?;
        Ok(a - b)
    }

    fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("kind".into(), "order-teacher".into());
        m.insert("vocab".into(), self.config.vocab.to_string());
        m.insert("dim".into(), self.config.dim.to_string());
        m.insert("hidden".into(), self.config.hidden.to_string());
        if !self.vocab_fingerprint.is_empty() {
            m.insert("vocab_fingerprint".into(), self.vocab_fingerprint.clone());
        }
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.store.save(path, &self.meta())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = ParamStore::load(path)?;
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("teacher checkpoint lacks `{k}`")))
        };
        let config = TeacherConfig {
            vocab: get("vocab")?,
            dim: get("dim")?,
            hidden: get("hidden")?,
        };
        let mut t = RewardTeacher::new(config, 0)?;
        t.store.load_values_from(&store)?;
        t.vocab_fingerprint = meta.get("vocab_fingerprint").cloned().unwrap_or_default();
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub keep: f64,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            epochs: 3,
            lr: 1e-3,
            batch_size: 16,
            keep: 0.3,
            seed: 7,
        }
    }
}

/// Trains a teacher on target-side documents and returns it with the mean
/// training loss of each epoch. Empty sentences are read as UNK.
pub fn train_teacher(
    docs: &[Vec<Vec<usize>>],
    config: TeacherConfig,
    train: &TeacherTrainConfig,
) -> Result<(RewardTeacher, Vec<f64>)> {
    let docs: Vec<Vec<Vec<usize>>> = docs
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| {
            d.iter()
                .map(|s| if s.is_empty() { vec![UNK] } else { s.clone() })
                .collect()
        })
        .collect();
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut teacher = RewardTeacher::new(config, train.seed)?;
    let multi = docs.iter().filter(|d| d.len() >= 2).count();
    if multi == 0 {
        warn!("teacher corpus has only single-sentence documents; the loss is constant 1 and training is a no-op");
        return Ok((teacher, vec![1.0; train.epochs]));
    }
    if multi * 2 < docs.len() {
        warn!("only {multi} of {} teacher documents have two or more sentences", docs.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x7ea_c4e5);
    let mut adam = Adam::new(AdamConfig {
        lr: train.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(train.epochs);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let batch = train.batch_size.max(1);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut g = teacher.graph();
            let mut losses = Vec::with_capacity(chunk.len());
            for &d in chunk {
                let mut drng = ChaCha8Rng::seed_from_u64(rng.random());
                losses.push(teacher.loss_var(&mut g, &docs[d], Some((train.keep, &mut drng)))?);
            }
            let sum = if losses.len() == 1 {
                losses[0]
            } else {
                let all = g.concat_cols(&losses)?;
                g.sum_all(all)
            };
            total += g.value(sum).item()?;
            let mean = g.scale(sum, 1.0 / chunk.len() as f64);
            let grads = g.backward(mean)?;
            drop(g);
            adam.step(&mut teacher.store, &grads);
        }
        let mean = total / docs.len() as f64;
        info!("teacher epoch {epoch}: mean L_abs {mean:.4}");
        history.push(mean);
    }
    Ok((teacher, history))
}
