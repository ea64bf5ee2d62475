use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ↔ id map. Ids `0..4` are the reserved PAD, BOS, EOS and UNK entries;
/// every other token has exactly one id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from non-reserved tokens in id order (first token gets id 4).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: RESERVED
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect(),
        };
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary token {t:?}")));
            }
            if v.index.contains_key(&t) {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
            v.index.insert(t.clone(), v.tokens.len());
            v.tokens.push(t);
        }
        Ok(v)
    }

    /// Keeps the `size_limit - 4` most frequent tokens, ties broken by first
    /// occurrence. Reserved spellings in the corpus are not counted.
    pub fn build<'a, I>(sentences: I, size_limit: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if size_limit < RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary size {size_limit} is smaller than the {} reserved entries",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut seen = 0usize;
        for sentence in sentences {
            for tok in sentence {
                if RESERVED.contains(&tok.as_str()) {
                    continue;
                }
                let order = counts.len();
                counts.entry(tok.as_str()).or_insert((0, order)).0 += 1;
                seen += 1;
            }
        }
        if seen == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(size_limit - RESERVED.len());
        Self::from_tokens(ranked.into_iter().map(|(t, _, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Token strings for `ids`, dropping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// FNV-1a over the newline-joined token list; identifies a vocabulary in
    /// checkpoint metadata.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.bytes().chain(std::iter::once(b'\n')) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }

    /// One token per line; line `k` (0-based) holds id `k + 4`.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in self.entries() {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn frequency_order_with_first_occurrence_ties() {
        let corpus = [toks("b a c a"), toks("c d b")];
        let v = Vocabulary::build(corpus.iter().map(Vec::as_slice), 100).unwrap();
        // a, b, c all occur twice; first occurrences are b, a, c
        assert_eq!(v.entries(), &["b", "a", "c", "d"]);
        assert_eq!(v.id("b"), 4);
    }

    #[test]
    fn size_limit_counts_reserved_entries() {
        let corpus = [toks("x x x y y z")];
        let v = Vocabulary::build(corpus.iter().map(Vec::as_slice), 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("z"), UNK);
        assert_eq!(v.id("x"), 4);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let corpus: [Vec<String>; 1] = [vec![]];
        assert!(matches!(
            Vocabulary::build(corpus.iter().map(Vec::as_slice), 10),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::from_tokens(["And", "we", "build"]).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "And\nwe\nbuild\n");
        assert_eq!(Vocabulary::parse(std::str::from_utf8(&buf).unwrap()).unwrap(), v);
    }

    #[test]
    fn decode_drops_control_ids() {
        let v = Vocabulary::from_tokens(["a", "b"]).unwrap();
        assert_eq!(v.decode(&[BOS, 4, UNK, 5, EOS, PAD]), vec!["a", "<unk>", "b"]);
    }
}
