//! Greedy, sampling and beam decoding over any next-token scorer.

use rand::Rng;

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};

/// Log-probabilities of the next token after `prefix` (which starts with
/// BOS).
pub trait NextToken {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[usize]) -> Result<Vec<f64>>> NextToken for F {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens without BOS and EOS.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of every emitted step, EOS included.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of scored steps.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }
}

/// `log_prob / steps^alpha`; an empty unfinished hypothesis scores its raw
/// log-probability.
pub fn length_normalized(h: &Hypothesis, alpha: f64) -> f64 {
    let steps = h.steps().max(1) as f64;
    h.log_prob / steps.powf(alpha)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn checked(lp: Vec<f64>) -> Result<Vec<f64>> {
    if lp.len() <= EOS {
        return Err(Error::Config("scorer vocabulary smaller than the reserved ids".into()));
    }
    Ok(lp)
}

fn decode_with(
    scorer: &mut dyn NextToken,
    max_len: usize,
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<Hypothesis> {
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    while prefix.len() <= max_len {
        let lp = checked(scorer.log_probs(&prefix)?)?;
        let tok = choose(&lp);
        log_prob += lp[tok];
        if tok == EOS {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                log_prob,
                finished: true,
            });
        }
        prefix.push(tok);
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
        finished: false,
    })
}

/// Argmax token per step (lowest id on ties) until EOS or `max_len` tokens.
pub fn greedy_decode(scorer: &mut dyn NextToken, max_len: usize) -> Result<Hypothesis> {
    decode_with(scorer, max_len, argmax)
}

/// Multinomial sampling at temperature 1.
pub fn sample_decode<R: Rng + ?Sized>(
    scorer: &mut dyn NextToken,
    max_len: usize,
    rng: &mut R,
) -> Result<Hypothesis> {
    decode_with(scorer, max_len, |lp| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &l) in lp.iter().enumerate() {
            let p = l.exp();
            if p > 0.0 {
                last = i;
            }
            acc += p;
            if u < acc {
                return i;
            }
        }
        last
    })
}

/// Beam search. Each step keeps the `beam_size - finished` best extensions by
/// cumulative log-probability; the result is the hypothesis with the best
/// [`length_normalized`] score among finished ones and those cut off at
/// `max_len`. With `beam_size == 1` this is exactly greedy decoding.
pub fn beam_decode(
    scorer: &mut dyn NextToken,
    max_len: usize,
    beam_size: usize,
    alpha: f64,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut len = 0;
    while !live.is_empty() && done.len() < beam_size && len < max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&hyp.tokens);
            let lp = checked(scorer.log_probs(&prefix)?)?;
            for (tok, l) in lp.into_iter().enumerate() {
                cands.push((hyp.log_prob + l, h, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let keep = beam_size - done.len();
        let mut next = Vec::with_capacity(keep);
        for &(lp, h, tok) in cands.iter().take(keep) {
            let mut tokens = live[h].tokens.clone();
            if tok == EOS {
                done.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    finished: true,
                });
            } else {
                tokens.push(tok);
                next.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    finished: false,
                });
            }
        }
        live = next;
        len += 1;
    }
    let mut pool = done;
    if len >= max_len {
        pool.extend(live);
    }
    let best = pool
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            length_normalized(a, alpha)
                .total_cmp(&length_normalized(b, alpha))
                .then(j.cmp(i))
        })
        .map(|(_, h)| h)
        .expect("beam search produces at least one hypothesis");
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixed(dist: Vec<f64>) -> impl FnMut(&[usize]) -> Result<Vec<f64>> {
        move |_| Ok(dist.iter().map(|p: &f64| p.ln()).collect())
    }

    #[test]
    fn eos_only_model_gives_empty_translation() {
        let mut s = fixed(vec![0.0, 0.0, 1.0, 0.0]);
        for h in [
            greedy_decode(&mut s, 10).unwrap(),
            beam_decode(&mut s, 10, 3, 1.0).unwrap(),
            sample_decode(&mut s, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
        ] {
            assert!(h.tokens.is_empty());
            assert!(h.finished);
            assert_eq!(h.log_prob, 0.0);
        }
    }

    #[test]
    fn never_ending_model_stops_at_limit() {
        let mut s = fixed(vec![0.0, 0.0, 0.0, 1.0]);
        let h = greedy_decode(&mut s, 5).unwrap();
        assert_eq!(h.tokens, vec![3; 5]);
        assert!(!h.finished);
        let b = beam_decode(&mut s, 5, 2, 1.0).unwrap();
        assert_eq!(b.tokens.len(), 5);
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_id() {
        let mut s = fixed(vec![0.0, 0.0, 0.5, 0.5]);
        assert!(greedy_decode(&mut s, 4).unwrap().tokens.is_empty());
    }

    #[test]
    fn beam_finds_path_greedy_misses() {
        // greedy takes token 3 (p 0.6) then faces a flat tail; the 0.4
        // branch ends almost surely
        let mut s = |p: &[usize]| -> Result<Vec<f64>> {
            let d = match p {
                [_] => vec![0.0, 0.0, 0.0, 0.6, 0.4],
                [_, 3] => vec![0.0, 0.0, 0.25, 0.25, 0.5],
                [_, 4] => vec![0.0, 0.0, 0.99, 0.005, 0.005],
                _ => vec![0.0, 0.0, 1.0, 0.0, 0.0],
            };
            Ok(d.into_iter().map(f64::ln).collect())
        };
        let g = greedy_decode(&mut s, 6).unwrap();
        let b = beam_decode(&mut s, 6, 2, 0.0).unwrap();
        assert_eq!(b.tokens, vec![4]);
        assert!(b.log_prob > g.log_prob);
    }
}
