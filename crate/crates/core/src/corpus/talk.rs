//! Talks and the document text format.
//!
//! A document file is UTF-8 with one pre-tokenized sentence per line
//! (tokens separated by single spaces) and talks separated by exactly one
//! empty line. A sentence with no tokens is written as a line holding a single
//! space, so that it cannot be confused with a talk separator.

use std::path::Path;

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub type Sentence = Vec<usize>;

/// Sentences of one talk as token strings.
pub type TextTalk = Vec<Vec<String>>;

pub const MAX_TALK_SENTENCES: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Talk {
    pub id: String,
    pub source: Vec<Sentence>,
    /// Empty at inference time; otherwise aligned 1:1 with `source`.
    pub target: Vec<Sentence>,
}

impl Talk {
    pub fn new(id: impl Into<String>, source: Vec<Sentence>, target: Vec<Sentence>) -> Result<Self> {
        let id = id.into();
        if !target.is_empty() && target.len() != source.len() {
            return Err(Error::StructureMismatch(format!(
                "talk `{id}`: {} source vs {} target sentences",
                source.len(),
                target.len()
            )));
        }
        Ok(Talk { id, source, target })
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
}

/// Greedy chunking into pieces of `max_sentences`, in order. Only the last
/// piece may be shorter. A talk that already fits is returned unchanged;
/// otherwise chunk `k` gets id `<id>.<k>`.
pub fn split_talk(talk: &Talk, max_sentences: usize) -> Vec<Talk> {
    assert!(max_sentences >= 1, "max_sentences must be positive");
    if talk.is_empty() {
        return Vec::new();
    }
    if talk.len() <= max_sentences {
        return vec![talk.clone()];
    }
    talk.source
        .chunks(max_sentences)
        .enumerate()
        .map(|(k, src)| {
            let start = k * max_sentences;
            let tgt = if talk.has_targets() {
                talk.target[start..start + src.len()].to_vec()
            } else {
                Vec::new()
            };
            Talk {
                id: format!("{}.{}", talk.id, k),
                source: src.to_vec(),
                target: tgt,
            }
        })
        .collect()
}

pub fn parse_documents(text: &str) -> Result<Vec<TextTalk>> {
    let mut talks = Vec::new();
    let mut current: TextTalk = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            if current.is_empty() {
                return Err(Error::Format(format!(
                    "line {}: empty talk (talks are separated by exactly one blank line)",
                    lineno + 1
                )));
            }
            talks.push(std::mem::take(&mut current));
        } else {
            current.push(line.split_whitespace().map(String::from).collect());
        }
    }
    if !current.is_empty() {
        talks.push(current);
    }
    Ok(talks)
}

pub fn format_documents<S: AsRef<str>>(talks: &[Vec<Vec<S>>]) -> String {
    let mut out = String::new();
    for (i, talk) in talks.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for sentence in talk {
            if sentence.is_empty() {
                out.push(' ');
            } else {
                for (j, tok) in sentence.iter().enumerate() {
                    if j > 0 {
                        out.push(' ');
                    }
                    out.push_str(tok.as_ref());
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn read_documents(path: &Path) -> Result<Vec<TextTalk>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_documents(&text)
}

pub fn write_documents<S: AsRef<str>>(path: &Path, talks: &[Vec<Vec<S>>]) -> Result<()> {
    std::fs::write(path, format_documents(talks)).map_err(|e| Error::io(path, e))
}

/// Checks that two document sets have the same talk and sentence counts.
pub fn check_same_structure<A, B>(a: &[Vec<A>], b: &[Vec<B>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::StructureMismatch(format!(
            "{} vs {} talks",
            a.len(),
            b.len()
        )));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return Err(Error::StructureMismatch(format!(
                "talk {i}: {} vs {} sentences",
                x.len(),
                y.len()
            )));
        }
    }
    Ok(())
}

/// Encodes parallel documents into talks with ids `talk-<k>`, splitting any
/// talk longer than `max_sentences`.
pub fn encode_talks(
    source: &[TextTalk],
    target: Option<&[TextTalk]>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_sentences: usize,
) -> Result<Vec<Talk>> {
    if let Some(t) = target {
        check_same_structure(source, t)?;
    }
    let mut talks = Vec::new();
    for (k, src) in source.iter().enumerate() {
        let s = src.iter().map(|x| src_vocab.encode(x)).collect();
        let t = target.map_or_else(Vec::new, |t| {
            t[k].iter().map(|x| tgt_vocab.encode(x)).collect()
        });
        talks.extend(split_talk(&Talk::new(format!("talk-{k}"), s, t)?, max_sentences));
    }
    Ok(talks)
}
