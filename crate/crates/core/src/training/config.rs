//! Training configuration and the flat `key = value` config file.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Recognised keys:
//!
//! ```text
//! mode            first-pass | first-pass-rl | two-pass | two-pass-rl |
//!                 two-pass-bleu | two-pass-bleu-rl
//! lambda1         first-pass balance factor in [0, 1]        (0.85)
//! lambda2         second-pass balance factor in [0, 1]       (0.80)
//! beta            BLEU_doc reward weight, two-pass-bleu-rl   (1.0)
//! seed            master seed                                 (1)
//! epochs          passes over the training talks              (10)
//! max_steps       optional hard step budget
//! lr              Adam learning rate                          (0.001)
//! beam_size       beam width for translation (1 = greedy)     (1)
//! length_penalty  length-normalisation exponent of beam search (1.0)
//! shuffle         talk | sentence                             (talk)
//! warmup_steps    likelihood-only steps before RL terms start (0)
//! patience        epochs without dev improvement before stopping
//! d_model, heads, d_ff, enc_layers, dec_layers, max_len       model size
//! vocab_size      vocabulary size limit, reserved ids included (20000)
//! train_src, train_tgt, dev_src, dev_tgt, src_vocab, tgt_vocab,
//! teacher, out_dir                                            paths
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::ShuffleStrategy;
use crate::error::{Error, Result};
use crate::training::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    FirstPass,
    FirstPassRl,
    TwoPass,
    TwoPassRl,
    /// Both passes with policy learning on the talk-level BLEU reward only.
    TwoPassBleu,
    /// Both passes with the teacher reward plus `beta` times talk-level BLEU.
    TwoPassBleuRl,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::FirstPass,
        Mode::FirstPassRl,
        Mode::TwoPass,
        Mode::TwoPassRl,
        Mode::TwoPassBleu,
        Mode::TwoPassBleuRl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FirstPass => "first-pass",
            Mode::FirstPassRl => "first-pass-rl",
            Mode::TwoPass => "two-pass",
            Mode::TwoPassRl => "two-pass-rl",
            Mode::TwoPassBleu => "two-pass-bleu",
            Mode::TwoPassBleuRl => "two-pass-bleu-rl",
        }
    }

    pub fn two_pass(self) -> bool {
        !matches!(self, Mode::FirstPass | Mode::FirstPassRl)
    }

    pub fn uses_rl(self) -> bool {
        !matches!(self, Mode::FirstPass | Mode::TwoPass)
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, Mode::FirstPassRl | Mode::TwoPassRl | Mode::TwoPassBleuRl)
    }

    /// Loss weights for this mode; passes without RL get λ = 1.
    pub fn weights(self, lambda1: f64, lambda2: f64) -> LossWeights {
        LossWeights {
            second_pass: self.two_pass(),
            lambda1: if self.uses_rl() { lambda1 } else { 1.0 },
            lambda2: if self.uses_rl() && self.two_pass() { lambda2 } else { 1.0 },
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub seed: u64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub beam_size: usize,
    pub length_penalty: f64,
    pub shuffle: ShuffleStrategy,
    pub warmup_steps: usize,
    pub patience: Option<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub paths: BTreeMap<String, PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::TwoPassRl,
            lambda1: 0.85,
            lambda2: 0.80,
            beta: 1.0,
            seed: 1,
            epochs: 10,
            max_steps: None,
            lr: 1e-3,
            beam_size: 1,
            length_penalty: 1.0,
            shuffle: ShuffleStrategy::Talk,
            warmup_steps: 0,
            patience: None,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 64,
            vocab_size: 20_000,
            paths: BTreeMap::new(),
        }
    }
}

pub const PATH_KEYS: [&str; 8] = [
    "train_src",
    "train_tgt",
    "dev_src",
    "dev_tgt",
    "src_vocab",
    "tgt_vocab",
    "teacher",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps" => self.max_steps = Some(parse(key, value)?),
            "lr" => self.lr = parse(key, value)?,
            "beam_size" => self.beam_size = parse(key, value)?,
            "length_penalty" => self.length_penalty = parse(key, value)?,
            "shuffle" => self.shuffle = value.parse()?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "patience" => self.patience = Some(parse(key, value)?),
            "d_model" => self.d_model = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "enc_layers" => self.enc_layers = parse(key, value)?,
            "dec_layers" => self.dec_layers = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            k if PATH_KEYS.contains(&k) => {
                self.paths.insert(k.to_string(), PathBuf::from(value));
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.weights(self.lambda1, self.lambda2).validate()?;
        LossWeights {
            second_pass: true,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
        .validate()?;
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(PathBuf::as_path)
    }

    pub fn weights(&self) -> LossWeights {
        self.mode.weights(self.lambda1, self.lambda2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_balance() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda1, c.lambda2), (0.85, 0.80));
        assert_eq!(c.beta, 1.0);
    }

    #[test]
    fn parses_flat_file() {
        let c = TrainConfig::parse_text(
            "# run\nmode = first-pass-rl\nlambda1 = 0.9  # override\n\nshuffle = sentence\ntrain_src = a/b.txt\n",
        )
        .unwrap();
        assert_eq!(c.mode, Mode::FirstPassRl);
        assert_eq!(c.lambda1, 0.9);
        assert_eq!(c.shuffle, ShuffleStrategy::Sentence);
        assert_eq!(c.path("train_src"), Some(Path::new("a/b.txt")));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse_text("lambda1 = 1.5").is_err());
        assert!(TrainConfig::parse_text("mode = three-pass").is_err());
        assert!(TrainConfig::parse_text("colour = blue").is_err());
        assert!(TrainConfig::parse_text("seed").is_err());
    }

    #[test]
    fn modes_select_terms() {
        let w = Mode::TwoPass.weights(0.5, 0.5);
        assert_eq!((w.lambda1, w.lambda2, w.second_pass), (1.0, 1.0, true));
        let w = Mode::FirstPassRl.weights(0.5, 0.5);
        assert_eq!((w.lambda1, w.lambda2, w.second_pass), (0.5, 1.0, false));
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
    }
}
