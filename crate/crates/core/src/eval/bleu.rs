//! Corpus BLEU with a single reference per segment.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuConfig {
    pub max_n: usize,
    /// Add-one smoothing of the precisions of order 2 and up.
    pub smoothing: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_n: 4,
            smoothing: false,
        }
    }
}

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    /// Score in percent.
    pub fn score(&self, smoothing: bool) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (n, (&m, &t)) in self.matches.iter().zip(&self.totals).enumerate() {
            let (m, t) = if smoothing && n > 0 {
                (m as f64 + 1.0, t as f64 + 1.0)
            } else {
                (m as f64, t as f64)
            };
            if m == 0.0 || t == 0.0 {
                return 0.0;
            }
            log_sum += (m / t).ln();
        }
        let log_bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0);
        100.0 * (log_bp + log_sum / self.matches.len() as f64).exp()
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu_stats<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<BleuStats> {
    if refs.is_empty() {
        return Err(Error::Metric("BLEU needs at least one reference".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Metric("BLEU order must be positive".into()));
    }
    let mut s = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        hyp_len: 0,
        ref_len: 0,
    };
    for (h, r) in hyps.iter().zip(refs) {
        s.hyp_len += h.len();
        s.ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                s.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                s.totals[n - 1] += c;
            }
        }
    }
    Ok(s)
}

/// Corpus BLEU in percent.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], config: BleuConfig) -> Result<f64> {
    Ok(bleu_stats(hyps, refs, config.max_n)?.score(config.smoothing))
}

/// Concatenates the sentences of each talk into one segment.
pub fn concatenate_talks<T: Clone>(talks: &[Vec<Vec<T>>]) -> Vec<Vec<T>> {
    talks.iter().map(|t| t.concat()).collect()
}

/// BLEU over talk-level segments.
pub fn bleu_doc<T: Eq + Hash + Clone>(
    hyp_talks: &[Vec<Vec<T>>],
    ref_talks: &[Vec<Vec<T>>],
    config: BleuConfig,
) -> Result<f64> {
    crate::corpus::check_same_structure(hyp_talks, ref_talks)?;
    bleu(&concatenate_talks(hyp_talks), &concatenate_talks(ref_talks), config)
}
