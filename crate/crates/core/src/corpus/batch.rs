use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::talk::{Sentence, Talk};
use super::vocab::PAD;
use crate::error::{Error, Result};

/// One talk as padded source/target matrices with per-row lengths.
///
/// Rows are padded with PAD to a common width; `*_lens` is the length mask.
/// Consumers read sentences through [`Batch::source`] / [`Batch::target`],
/// which never expose padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub talk_id: String,
    pub source: Vec<Vec<usize>>,
    pub source_lens: Vec<usize>,
    pub target: Vec<Vec<usize>>,
    pub target_lens: Vec<usize>,
}

fn pad_rows(rows: &[Sentence], width: usize) -> Vec<Vec<usize>> {
    rows.iter()
        .map(|r| {
            let mut p = r.clone();
            p.resize(width, PAD);
            p
        })
        .collect()
}

impl Batch {
    pub fn from_talk(talk: &Talk) -> Self {
        let sw = talk.source.iter().map(Vec::len).max().unwrap_or(0);
        let tw = talk.target.iter().map(Vec::len).max().unwrap_or(0);
        Batch {
            talk_id: talk.id.clone(),
            source: pad_rows(&talk.source, sw),
            source_lens: talk.source.iter().map(Vec::len).collect(),
            target: pad_rows(&talk.target, tw),
            target_lens: talk.target.iter().map(Vec::len).collect(),
        }
    }

    /// Appends `extra` PAD columns to both matrices.
    pub fn with_extra_padding(&self, extra: usize) -> Self {
        let mut b = self.clone();
        for row in b.source.iter_mut().chain(b.target.iter_mut()) {
            row.extend(std::iter::repeat_n(PAD, extra));
        }
        b
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn has_targets(&self) -> bool {
        !self.target.is_empty()
    }

    pub fn source(&self, i: usize) -> &[usize] {
        &self.source[i][..self.source_lens[i]]
    }

    pub fn target(&self, i: usize) -> &[usize] {
        &self.target[i][..self.target_lens[i]]
    }

    pub fn sources(&self) -> Vec<&[usize]> {
        (0..self.len()).map(|i| self.source(i)).collect()
    }

    pub fn targets(&self) -> Result<Vec<&[usize]>> {
        if !self.has_targets() {
            return Err(Error::MissingTargets(self.talk_id.clone()));
        }
        Ok((0..self.len()).map(|i| self.target(i)).collect())
    }

    /// Number of non-pad target tokens.
    pub fn target_tokens(&self) -> usize {
        self.target_lens.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShuffleStrategy {
    /// Permute talks; each batch is one talk in its original sentence order.
    Talk,
    /// Permute all sentences of the corpus and regroup them into batches of
    /// the same sizes the talk strategy would produce, destroying document
    /// order.
    Sentence,
}

impl std::str::FromStr for ShuffleStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "talk" | "talk-shuffle" => Ok(ShuffleStrategy::Talk),
            "sentence" | "sentence-shuffle" => Ok(ShuffleStrategy::Sentence),
            _ => Err(Error::Config(format!("unknown shuffle strategy `{s}`"))),
        }
    }
}

/// Batch composition for one epoch: each batch lists `(talk, sentence)`
/// indices into the corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<Vec<(usize, usize)>>,
}

pub fn shuffle_epoch(talks: &[Talk], strategy: ShuffleStrategy, seed: u64) -> Result<EpochPlan> {
    if talks.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..talks.len()).collect();
    order.shuffle(&mut rng);
    let batches = match strategy {
        ShuffleStrategy::Talk => order
            .iter()
            .map(|&t| (0..talks[t].len()).map(|s| (t, s)).collect())
            .collect(),
        ShuffleStrategy::Sentence => {
            let mut all: Vec<(usize, usize)> = talks
                .iter()
                .enumerate()
                .flat_map(|(t, talk)| (0..talk.len()).map(move |s| (t, s)))
                .collect();
            all.shuffle(&mut rng);
            let mut rest = &all[..];
            order
                .iter()
                .map(|&t| {
                    let (head, tail) = rest.split_at(talks[t].len());
                    rest = tail;
                    head.to_vec()
                })
                .collect()
        }
    };
    Ok(EpochPlan { batches })
}

impl EpochPlan {
    /// Materialises batch `b` as a pseudo-talk.
    pub fn batch_talk(&self, talks: &[Talk], b: usize) -> Talk {
        let refs = &self.batches[b];
        let single_talk = refs.iter().all(|(t, _)| *t == refs[0].0);
        let id = if single_talk && refs.len() == talks[refs[0].0].len() {
            talks[refs[0].0].id.clone()
        } else {
            format!("mixed-{b}")
        };
        let has_targets = refs.iter().all(|&(t, _)| talks[t].has_targets());
        Talk {
            id,
            source: refs.iter().map(|&(t, s)| talks[t].source[s].clone()).collect(),
            target: if has_targets {
                refs.iter().map(|&(t, s)| talks[t].target[s].clone()).collect()
            } else {
                Vec::new()
            },
        }
    }
}
