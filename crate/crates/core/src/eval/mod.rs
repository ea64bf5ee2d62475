//! Translation metrics: BLEU, talk-level BLEU, coherence and sentence-initial
//! conjunction counts.

mod bleu;
mod coherence;
mod vectors;

use serde::Serialize;

use crate::corpus::TextTalk;
use crate::error::Result;

pub use bleu::{bleu, bleu_doc, bleu_stats, concatenate_talks, BleuConfig, BleuStats};
pub use coherence::{adjacent_similarities, coherence, corpus_coherence, sentence_vector};
pub use vectors::{train_word_vectors, SkipGramConfig, WordVectors};

pub const DEFAULT_CONJUNCTIONS: [&str; 5] = ["And", "But", "In", "So", "What"];

/// Number of sentences opening with each listed token, in list order.
pub fn conjunction_stats<S: AsRef<str>>(talks: &[Vec<Vec<S>>], list: &[&str]) -> Vec<(String, usize)> {
    let mut counts: Vec<(String, usize)> = list.iter().map(|c| (c.to_string(), 0)).collect();
    for s in talks.iter().flatten() {
        if let Some(first) = s.first() {
            if let Some(slot) = counts.iter_mut().find(|(c, _)| c == first.as_ref()) {
                slot.1 += 1;
            }
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub bleu_doc: f64,
    /// `None` when no word vectors were supplied.
    pub coherence: Option<f64>,
    pub conjunctions: Vec<(String, usize)>,
}

#[derive(Serialize)]
struct Record<'a> {
    metric: &'a str,
    value: serde_json::Value,
}

impl EvalReport {
    pub fn compute(
        hyps: &[TextTalk],
        refs: &[TextTalk],
        vectors: Option<&WordVectors>,
        conjunctions: &[&str],
        bleu_config: BleuConfig,
    ) -> Result<Self> {
        let flat_h: Vec<Vec<String>> = hyps.iter().flatten().cloned().collect();
        let flat_r: Vec<Vec<String>> = refs.iter().flatten().cloned().collect();
        crate::corpus::check_same_structure(hyps, refs)?;
        Ok(EvalReport {
            bleu: bleu(&flat_h, &flat_r, bleu_config)?,
            bleu_doc: bleu_doc(hyps, refs, bleu_config)?,
            coherence: vectors.map(|v| corpus_coherence(hyps, v)).transpose()?,
            conjunctions: conjunction_stats(hyps, conjunctions),
        })
    }

    fn rows(&self) -> Vec<(String, serde_json::Value)> {
        let mut rows = vec![
            ("BLEU".to_string(), serde_json::json!(self.bleu)),
            ("BLEU_doc".to_string(), serde_json::json!(self.bleu_doc)),
            (
                "coherence".to_string(),
                self.coherence
                    .map_or(serde_json::json!("unavailable"), |c| serde_json::json!(c)),
            ),
            ("METEOR".to_string(), serde_json::json!("unavailable")),
        ];
        for (c, n) in &self.conjunctions {
            rows.push((format!("conj:{c}"), serde_json::json!(n)));
        }
        rows
    }

    /// One `NAME<TAB>VALUE` line per metric.
    pub fn to_text(&self) -> String {
        self.rows()
            .into_iter()
            .map(|(k, v)| match v {
                serde_json::Value::String(s) => format!("{k}\t{s}\n"),
                serde_json::Value::Number(n) if n.is_f64() => {
                    format!("{k}\t{:.4}\n", n.as_f64().expect("checked"))
                }
                other => format!("{k}\t{other}\n"),
            })
            .collect()
    }

    /// One JSON object per metric per line.
    pub fn to_jsonl(&self) -> String {
        self.rows()
            .into_iter()
            .map(|(k, v)| {
                let rec = Record { metric: &k, value: v };
                serde_json::to_string(&rec).expect("plain record") + "\n"
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn talk(lines: &[&str]) -> TextTalk {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn conjunction_counts_on_constructed_corpus() {
        let talks = vec![
            talk(&["And so it goes", "But not here", "And again"]),
            talk(&["In the end", "so lower case", "What now"]),
            talk(&["Nothing", "", "And", "So what And"]),
        ];
        let stats = conjunction_stats(&talks, &DEFAULT_CONJUNCTIONS);
        assert_eq!(
            stats,
            vec![
                ("And".to_string(), 3),
                ("But".to_string(), 1),
                ("In".to_string(), 1),
                ("So".to_string(), 1),
                ("What".to_string(), 1),
            ]
        );
        let empty: Vec<TextTalk> = Vec::new();
        assert!(conjunction_stats(&empty, &DEFAULT_CONJUNCTIONS).iter().all(|(_, n)| *n == 0));
    }

    #[test]
    fn report_formats() {
        let refs = vec![talk(&["a b c d", "e f g h"])];
        let r = EvalReport::compute(&refs, &refs, None, &DEFAULT_CONJUNCTIONS, BleuConfig::default()).unwrap();
        let text = r.to_text();
        assert!(text.starts_with("BLEU\t100.0000\nBLEU_doc\t100.0000\ncoherence\tunavailable\nMETEOR\tunavailable\n"));
        assert!(text.contains("conj:And\t0\n"));
        for line in r.to_jsonl().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("metric").is_some());
        }
    }
}
