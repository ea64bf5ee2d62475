//! Coherence as the cosine similarity of adjacent sentences, each sentence
//! represented by the sum of its word vectors.

use log::warn;

use super::vectors::WordVectors;
use crate::error::{Error, Result};

/// Sum of the vectors of the in-vocabulary words of a sentence.
pub fn sentence_vector<S: AsRef<str>>(sentence: &[S], vectors: &WordVectors) -> Vec<f64> {
    let mut sum = vec![0.0; vectors.dim()];
    for w in sentence {
        if let Some(v) = vectors.get(w.as_ref()) {
            sum.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
    }
    sum
}

fn pair_similarity(a: &[f64], b: &[f64]) -> f64 {
    match delib_tensor::cosine_similarity(a, b) {
        Ok(c) => c,
        Err(_) => {
            warn!("sentence with no known words; counting its pair as similarity 0");
            0.0
        }
    }
}

/// Similarities of every adjacent pair of a document.
pub fn adjacent_similarities<S: AsRef<str>>(doc: &[Vec<S>], vectors: &WordVectors) -> Result<Vec<f64>> {
    if doc.len() < 2 {
        return Err(Error::Metric("coherence needs at least two sentences".into()));
    }
    let vs: Vec<Vec<f64>> = doc.iter().map(|s| sentence_vector(s, vectors)).collect();
    Ok(vs.windows(2).map(|w| pair_similarity(&w[0], &w[1])).collect())
}

/// Mean adjacent similarity of one document.
pub fn coherence<S: AsRef<str>>(doc: &[Vec<S>], vectors: &WordVectors) -> Result<f64> {
    let sims = adjacent_similarities(doc, vectors)?;
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Mean over all adjacent pairs of all documents, pooled. Documents with a
/// single sentence contribute no pairs.
pub fn corpus_coherence<S: AsRef<str>>(docs: &[Vec<Vec<S>>], vectors: &WordVectors) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for d in docs.iter().filter(|d| d.len() >= 2) {
        let sims = adjacent_similarities(d, vectors)?;
        n += sims.len();
        sum += sims.iter().sum::<f64>();
    }
    if n == 0 {
        return Err(Error::Metric("no document has two or more sentences".into()));
    }
    Ok(sum / n as f64)
}
