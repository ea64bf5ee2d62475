//! Word vectors: the text file format and a small skip-gram trainer.
//!
//! File format: a header line `<count> <dim>`, then one line per word holding
//! the token followed by `dim` space-separated decimals.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordVectors {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f64>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        WordVectors {
            dim,
            ..WordVectors::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Format(format!(
                "vector of length {} in a {}-dimensional table",
                vector.len(),
                self.dim
            )));
        }
        let word = word.into();
        if let Some(&i) = self.index.get(&word) {
            self.values[i * self.dim..(i + 1) * self.dim].copy_from_slice(&vector);
        } else {
            self.index.insert(word.clone(), self.words.len());
            self.words.push(word);
            self.values.extend(vector);
        }
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim);
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for v in &self.values[i * self.dim..(i + 1) * self.dim] {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty vector file".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|x| x.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("bad vector header `{header}`")))?;
        let [count, dim] = nums[..] else {
            return Err(Error::Format(format!("bad vector header `{header}`")));
        };
        let mut out = WordVectors::new(dim);
        for (k, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().expect("non-empty line");
            let v: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("bad number on vector line {}", k + 2)))?;
            out.insert(word, v)?;
        }
        if out.len() != count {
            return Err(Error::Format(format!(
                "header announces {count} vectors, file has {}",
                out.len()
            )));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 100,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            min_count: 1,
            seed: 1,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skip-gram with negative sampling. Negatives are drawn from the unigram
/// distribution raised to 0.75; the learning rate decays linearly to zero.
pub fn train_word_vectors(sentences: &[Vec<String>], config: &SkipGramConfig) -> Result<WordVectors> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for w in sentences.iter().flatten() {
        let c = counts.entry(w.as_str()).or_insert(0);
        if *c == 0 {
            order.push(w.as_str());
        }
        *c += 1;
    }
    let vocab: Vec<&str> = order
        .into_iter()
        .filter(|w| counts[w] >= config.min_count.max(1))
        .collect();
    if vocab.is_empty() || config.dim == 0 {
        return Err(Error::EmptyCorpus);
    }
    let id: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (*w, i)).collect();
    let corpus: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| s.iter().filter_map(|w| id.get(w.as_str()).copied()).collect())
        .collect();

    let weights: Vec<f64> = vocab.iter().map(|w| (counts[w] as f64).powf(0.75)).collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }

    let d = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut input: Vec<f64> = (0..vocab.len() * d)
        .map(|_| (rng.random::<f64>() - 0.5) / d as f64)
        .collect();
    let mut output = vec![0.0; vocab.len() * d];
    let tokens: usize = corpus.iter().map(Vec::len).sum();
    let total_steps = (tokens * config.epochs).max(1) as f64;
    let mut seen = 0usize;
    let mut grad = vec![0.0; d];
    for _ in 0..config.epochs {
        for sent in &corpus {
            for (pos, &center) in sent.iter().enumerate() {
                let lr = (config.lr * (1.0 - seen as f64 / total_steps)).max(config.lr * 1e-4);
                seen += 1;
                let span = rng.random_range(1..=config.window.max(1));
                let lo = pos.saturating_sub(span);
                let hi = (pos + span).min(sent.len() - 1);
                for (cpos, &ctx) in sent.iter().enumerate().take(hi + 1).skip(lo) {
                    if cpos == pos {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let cin = center * d;
                    for k in 0..=config.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let u: f64 = rng.random();
                            let t = cdf.partition_point(|&c| c < u).min(vocab.len() - 1);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let tout = target * d;
                        let dot: f64 = (0..d).map(|j| input[cin + j] * output[tout + j]).sum();
                        let gcoef = lr * (label - sigmoid(dot));
                        for j in 0..d {
                            grad[j] += gcoef * output[tout + j];
                            output[tout + j] += gcoef * input[cin + j];
                        }
                    }
                    for j in 0..d {
                        input[cin + j] += grad[j];
                    }
                }
            }
        }
    }
    let mut out = WordVectors::new(d);
    for (i, w) in vocab.iter().enumerate() {
        out.insert(*w, input[i * d..(i + 1) * d].to_vec())?;
    }
    Ok(out)
}
