//! Toy parallel corpus with cross-sentence dependencies.
//!
//! Every sentence draws its content words from one topic. Source words
//! `x<t>_<k>` translate one-to-one and in order to target words `y<t>_<k>`.
//! Each source sentence after the first opens with the link marker `~`, and
//! the matching target sentence opens with the connective owned by the topic
//! of the previous sentence's final content word. Translating that connective
//! therefore needs the previous sentence. Topics follow a chain
//! (`t -> t + 1` with probability `chain_prob`, otherwise uniform), which makes
//! sentence order visible to a document model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::talk::TextTalk;
use crate::error::{Error, Result};

pub const LINK_TOKEN: &str = "~";
pub const CONNECTIVES: [&str; 5] = ["And", "But", "In", "So", "What"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_talks: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub chain_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_talks: 200,
            min_sentences: 4,
            max_sentences: 16,
            topics: 5,
            words_per_topic: 6,
            min_len: 3,
            max_len: 6,
            chain_prob: 0.5,
            seed: 1,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.n_talks > 0
            && self.min_sentences >= 1
            && self.min_sentences <= self.max_sentences
            && self.topics >= 1
            && self.words_per_topic >= 1
            && self.min_len >= 1
            && self.min_len <= self.max_len
            && (0.0..=1.0).contains(&self.chain_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic corpus settings {self:?}")))
        }
    }

    /// Number of distinct target tokens the generator can emit.
    pub fn target_types(&self) -> usize {
        self.topics * self.words_per_topic + self.topics
    }
}

pub fn connective(topic: usize) -> String {
    CONNECTIVES
        .get(topic)
        .map_or_else(|| format!("Conj{topic}"), |c| c.to_string())
}

pub fn source_word(topic: usize, k: usize) -> String {
    format!("x{topic}_{k}")
}

pub fn target_word(topic: usize, k: usize) -> String {
    format!("y{topic}_{k}")
}

/// Topic of a target content word, `None` for anything else.
pub fn target_topic(token: &str) -> Option<usize> {
    let rest = token.strip_prefix('y')?;
    let (t, k) = rest.split_once('_')?;
    k.parse::<usize>().ok()?;
    t.parse().ok()
}

/// The connective a target sentence must open with, given the previous
/// target sentence.
pub fn expected_connective(previous: &[String]) -> Option<String> {
    previous
        .iter()
        .rev()
        .find_map(|w| target_topic(w))
        .map(connective)
}

/// Translates one source sentence given the previous source sentence, by the
/// generator's rule.
pub fn reference_translation(sentence: &[String], previous: Option<&[String]>) -> Vec<String> {
    let mut out = Vec::with_capacity(sentence.len());
    let prev_topic = previous.and_then(|p| {
        p.iter().rev().find_map(|w| {
            let rest = w.strip_prefix('x')?;
            rest.split_once('_')?.0.parse::<usize>().ok()
        })
    });
    for w in sentence {
        if w == LINK_TOKEN {
            if let Some(t) = prev_topic {
                out.push(connective(t));
            }
        } else if let Some(rest) = w.strip_prefix('x') {
            out.push(format!("y{rest}"));
        } else {
            out.push(w.clone());
        }
    }
    out
}

/// Generates `(source, target)` documents.
pub fn make_synthetic_discourse_corpus(config: &SynthConfig) -> Result<(Vec<TextTalk>, Vec<TextTalk>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sources = Vec::with_capacity(config.n_talks);
    let mut targets = Vec::with_capacity(config.n_talks);
    for _ in 0..config.n_talks {
        let n = rng.random_range(config.min_sentences..=config.max_sentences);
        let mut topic = rng.random_range(0..config.topics);
        let mut src: TextTalk = Vec::with_capacity(n);
        let mut tgt: TextTalk = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 {
                topic = if rng.random::<f64>() < config.chain_prob {
                    (topic + 1) % config.topics
                } else {
                    rng.random_range(0..config.topics)
                };
            }
            let len = rng.random_range(config.min_len..=config.max_len);
            let mut s = Vec::with_capacity(len + 1);
            if i > 0 {
                s.push(LINK_TOKEN.to_string());
            }
            for _ in 0..len {
                s.push(source_word(topic, rng.random_range(0..config.words_per_topic)));
            }
            let t = reference_translation(&s, src.last().map(Vec::as_slice));
            src.push(s);
            tgt.push(t);
        }
        sources.push(src);
        targets.push(tgt);
    }
    Ok((sources, targets))
}
