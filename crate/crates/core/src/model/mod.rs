//! Shared Transformer encoder with a first-pass and a second-pass decoder.
//!
//! Both decoders are pre-layer-norm stacks. The second-pass stack has one
//! extra attention block per layer that reads the embedded first-pass drafts
//! of every sentence in the talk. Block order in a second-pass layer is:
//! masked self-attention, draft attention, source attention, feed-forward.
//!
//! Parameter naming:
//!
//! ```text
//! src_embed, tgt_embed                      embedding tables (tgt shared by
//!                                           both decoders and the drafts)
//! enc.<l>.{ln_self,self_attn,ln_ff,ff}, enc.norm
//! dec1.<l>.{ln_self,self_attn,ln_src,src_attn,ln_ff,ff}, dec1.norm, dec1.proj
//! dec2.<l>.{ln_self,self_attn,ln_draft,draft_attn,ln_src,src_attn,ln_ff,ff},
//! dec2.norm, dec2.proj, dec2.draft_norm, dec2.draft_offset
//! ```
//!
//! Draft tokens are positioned by their index in the concatenated talk draft
//! (each draft sentence followed by EOS) plus a learned embedding of the
//! sentence offset `j - i` between the draft sentence `j` and the sentence
//! `i` being decoded, clipped to `±max_draft_offset`.

mod decode;

use std::collections::BTreeMap;
use std::path::Path;

use delib_tensor::nn::{
    causal_mask, sinusoidal_positions, AttnMemory, Embedding, FeedForward, LayerNorm, Linear,
    MultiHeadAttention,
};
use delib_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};

const OUTPUT_INIT_SCALE: f64 = 0.1;

pub use decode::{
    beam_decode, greedy_decode, length_normalized, sample_decode, Hypothesis, NextToken,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Longest token sequence a sentence may occupy, counting BOS or EOS.
    pub max_len: usize,
    pub max_draft_offset: usize,
}

impl ModelConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 64,
            max_draft_offset: 4,
        }
    }

    /// Width-8, single-layer model for gradient checks.
    pub fn tiny(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 8,
            enc_layers: 1,
            dec_layers: 1,
            max_len: 16,
            ..ModelConfig::new(src_vocab, tgt_vocab)
        }
    }

    fn to_meta(&self) -> BTreeMap<String, String> {
        [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_len", self.max_len),
            ("max_draft_offset", self.max_draft_offset),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks model setting `{k}`")))
        };
        Ok(ModelConfig {
            src_vocab: get("src_vocab")?,
            tgt_vocab: get("tgt_vocab")?,
            d_model: get("d_model")?,
            heads: get("heads")?,
            d_ff: get("d_ff")?,
            enc_layers: get("enc_layers")?,
            dec_layers: get("dec_layers")?,
            max_len: get("max_len")?,
            max_draft_offset: get("max_draft_offset")?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    First,
    Second,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    draft: Option<(LayerNorm, MultiHeadAttention)>,
    ln_src: LayerNorm,
    src_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Decoder {
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    proj: Linear,
}

/// Per-source-token encoder states, one `[len + 1, d_model]` matrix per
/// sentence (the encoder appends EOS to every source sentence).
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub states: Vec<Var>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// First-pass translations of a whole talk, one token sequence (without BOS
/// or EOS) per source sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FirstPassDraft {
    pub sentences: Vec<Vec<usize>>,
}

impl FirstPassDraft {
    /// Token ids as embedded: every sentence followed by EOS.
    pub fn flat_tokens(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for s in &self.sentences {
            out.extend_from_slice(s);
            out.push(EOS);
        }
        out
    }

    /// Index of the draft sentence each flat token belongs to.
    pub fn token_sentences(&self) -> Vec<usize> {
        self.sentences
            .iter()
            .enumerate()
            .flat_map(|(j, s)| std::iter::repeat_n(j, s.len() + 1))
            .collect()
    }

    /// `[start, end)` of each sentence within [`Self::flat_tokens`].
    pub fn boundaries(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.sentences
            .iter()
            .map(|s| {
                let b = (start, start + s.len() + 1);
                start = b.1;
                b
            })
            .collect()
    }
}

/// Attention memories one decoder pass needs for a talk, projected once per
/// sentence and layer.
#[derive(Clone, Debug)]
pub struct PassContext {
    pub pass: Pass,
    source: Vec<Vec<AttnMemory>>,
    draft: Vec<Vec<AttnMemory>>,
}

impl PassContext {
    pub fn sentences(&self) -> usize {
        self.source.len()
    }
}

#[derive(Clone, Debug)]
pub struct NmtModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    src_embed: Embedding,
    tgt_embed: Embedding,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    dec1: Decoder,
    dec2: Decoder,
    draft_norm: LayerNorm,
    draft_offset: ParamId,
    positions: Tensor,
}

fn build_decoder(
    store: &mut ParamStore,
    prefix: &str,
    c: &ModelConfig,
    with_draft: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Decoder> {
    let d = c.d_model;
    let mut layers = Vec::with_capacity(c.dec_layers);
    for l in 0..c.dec_layers {
        let p = format!("{prefix}.{l}");
        let ln_self = LayerNorm::new(store, &format!("{p}.ln_self"), d)?;
        let self_attn = MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, c.heads, rng)?;
        let draft = if with_draft {
            Some((
                LayerNorm::new(store, &format!("{p}.ln_draft"), d)?,
                MultiHeadAttention::new(store, &format!("{p}.draft_attn"), d, c.heads, rng)?,
            ))
        } else {
            None
        };
        layers.push(DecoderLayer {
            ln_self,
            self_attn,
            draft,
            ln_src: LayerNorm::new(store, &format!("{p}.ln_src"), d)?,
            src_attn: MultiHeadAttention::new(store, &format!("{p}.src_attn"), d, c.heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d)?,
            ff: FeedForward::new(store, &format!("{p}.ff"), d, c.d_ff, rng)?,
        });
    }
    // small output weights keep the untrained distribution close to uniform
    let proj = Linear::new(store, &format!("{prefix}.proj"), d, c.tgt_vocab, rng)?;
    store.get_mut(proj.w).data_mut().iter_mut().for_each(|v| *v *= OUTPUT_INIT_SCALE);
    Ok(Decoder {
        layers,
        norm: LayerNorm::new(store, &format!("{prefix}.norm"), d)?,
        proj,
    })
}

impl NmtModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.src_vocab == 0 || config.tgt_vocab <= EOS || config.max_len < 2 {
            return Err(Error::Config(format!("invalid model settings {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let src_embed = Embedding::new(&mut store, "src_embed", config.src_vocab, d, &mut rng)?;
        let tgt_embed = Embedding::new(&mut store, "tgt_embed", config.tgt_vocab, d, &mut rng)?;
        let mut encoder = Vec::with_capacity(config.enc_layers);
        for l in 0..config.enc_layers {
            let p = format!("enc.{l}");
            encoder.push(EncoderLayer {
                ln_self: LayerNorm::new(&mut store, &format!("{p}.ln_self"), d)?,
                self_attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("{p}.self_attn"),
                    d,
                    config.heads,
                    &mut rng,
                )?,
                ln_ff: LayerNorm::new(&mut store, &format!("{p}.ln_ff"), d)?,
                ff: FeedForward::new(&mut store, &format!("{p}.ff"), d, config.d_ff, &mut rng)?,
            });
        }
        let enc_norm = LayerNorm::new(&mut store, "enc.norm", d)?;
        let dec1 = build_decoder(&mut store, "dec1", &config, false, &mut rng)?;
        let dec2 = build_decoder(&mut store, "dec2", &config, true, &mut rng)?;
        let draft_norm = LayerNorm::new(&mut store, "dec2.draft_norm", d)?;
        let bound = (1.0 / d as f64).sqrt();
        let draft_offset = store.add_uniform(
            "dec2.draft_offset",
            2 * config.max_draft_offset + 1,
            d,
            bound,
            &mut rng,
        )?;
        let positions = sinusoidal_positions(config.max_len, d);
        Ok(NmtModel {
            config,
            store,
            src_embed,
            tgt_embed,
            encoder,
            enc_norm,
            dec1,
            dec2,
            draft_norm,
            draft_offset,
            positions,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.store.save(path, &self.config.to_meta())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = ParamStore::load(path)?;
        let mut model = NmtModel::new(ModelConfig::from_meta(&meta)?, 0)?;
        model.store.load_values_from(&store)?;
        Ok(model)
    }

    /// Graph reading this model's parameters.
    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.store)
    }

    fn position_rows(&self, g: &mut Graph, len: usize) -> Var {
        let d = self.config.d_model;
        let rows = if len <= self.config.max_len {
            Tensor::matrix(len, d, self.positions.data()[..len * d].to_vec())
                .expect("sized from table")
        } else {
            sinusoidal_positions(len, d)
        };
        g.constant(rows)
    }

    fn embed(&self, g: &mut Graph, table: &Embedding, ids: &[usize]) -> Result<Var> {
        let e = table.forward(g, ids)?;
        let e = g.scale(e, (self.config.d_model as f64).sqrt());
        let p = self.position_rows(g, ids.len());
        Ok(g.add(e, p)?)
    }

    /// Runs the shared encoder over every source sentence of a talk.
    pub fn encode(&self, g: &mut Graph, sources: &[&[usize]]) -> Result<EncoderOutput> {
        let mut states = Vec::with_capacity(sources.len());
        for s in sources {
            if s.len() + 1 > self.config.max_len {
                return Err(Error::SentenceTooLong {
                    len: s.len(),
                    max: self.config.max_len - 1,
                });
            }
            let mut ids = s.to_vec();
            ids.push(EOS);
            let mut x = self.embed(g, &self.src_embed, &ids)?;
            for layer in &self.encoder {
                let h = layer.ln_self.forward(g, x)?;
                let a = layer.self_attn.forward(g, h, h, None)?;
                x = g.add(x, a)?;
                let h = layer.ln_ff.forward(g, x)?;
                let f = layer.ff.forward(g, h)?;
                x = g.add(x, f)?;
            }
            states.push(self.enc_norm.forward(g, x)?);
        }
        Ok(EncoderOutput { states })
    }

    fn source_memories(&self, g: &mut Graph, dec: &Decoder, enc: &EncoderOutput) -> Result<Vec<Vec<AttnMemory>>> {
        enc.states
            .iter()
            .map(|&h| {
                dec.layers
                    .iter()
                    .map(|l| Ok(l.src_attn.project_memory(g, h)?))
                    .collect()
            })
            .collect()
    }

    pub fn first_pass_context(&self, g: &mut Graph, enc: &EncoderOutput) -> Result<PassContext> {
        Ok(PassContext {
            pass: Pass::First,
            source: self.source_memories(g, &self.dec1, enc)?,
            draft: Vec::new(),
        })
    }

    pub fn second_pass_context(
        &self,
        g: &mut Graph,
        enc: &EncoderOutput,
        draft: Option<&FirstPassDraft>,
    ) -> Result<PassContext> {
        let draft = draft.ok_or(Error::MissingDraft)?;
        if draft.sentences.len() != enc.len() {
            return Err(Error::MissingDraft);
        }
        let tokens = draft.flat_tokens();
        if tokens.iter().any(|&t| t >= self.config.tgt_vocab) {
            return Err(Error::Config("draft token outside the target vocabulary".into()));
        }
        let base = self.embed(g, &self.tgt_embed, &tokens)?;
        let owner = draft.token_sentences();
        let offsets = g.param(self.draft_offset)?;
        let m = self.config.max_draft_offset as isize;
        let mut per_sentence = Vec::with_capacity(enc.len());
        for i in 0..enc.len() {
            let rows: Vec<usize> = owner
                .iter()
                .map(|&j| ((j as isize - i as isize).clamp(-m, m) + m) as usize)
                .collect();
            let off = g.gather_rows(offsets, &rows)?;
            let x = g.add(base, off)?;
            let x = self.draft_norm.forward(g, x)?;
            let mut layers = Vec::with_capacity(self.dec2.layers.len());
            for l in &self.dec2.layers {
                let (_, attn) = l.draft.as_ref().expect("second-pass layers carry draft attention");
                layers.push(attn.project_memory(g, x)?);
            }
            per_sentence.push(layers);
        }
        Ok(PassContext {
            pass: Pass::Second,
            source: self.source_memories(g, &self.dec2, enc)?,
            draft: per_sentence,
        })
    }

    /// Next-token logits `[prefix.len(), tgt_vocab]` for sentence `i` of the
    /// talk; row `t` predicts the token following `prefix[..=t]`.
    pub fn logits(&self, g: &mut Graph, ctx: &PassContext, i: usize, prefix: &[usize]) -> Result<Var> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::MissingBos);
        }
        if prefix.len() > self.config.max_len {
            return Err(Error::SentenceTooLong {
                len: prefix.len() - 1,
                max: self.config.max_len - 1,
            });
        }
        if i >= ctx.sentences() {
            return Err(Error::Config(format!("sentence {i} outside the talk")));
        }
        let dec = match ctx.pass {
            Pass::First => &self.dec1,
            Pass::Second => &self.dec2,
        };
        let mask = causal_mask(prefix.len());
        let mut x = self.embed(g, &self.tgt_embed, prefix)?;
        for (l, layer) in dec.layers.iter().enumerate() {
            let h = layer.ln_self.forward(g, x)?;
            let a = layer.self_attn.forward(g, h, h, Some(&mask))?;
            x = g.add(x, a)?;
            if let Some((ln, attn)) = &layer.draft {
                let h = ln.forward(g, x)?;
                let a = attn.attend(g, h, &ctx.draft[i][l], None)?;
                x = g.add(x, a)?;
            }
            let h = layer.ln_src.forward(g, x)?;
            let a = layer.src_attn.attend(g, h, &ctx.source[i][l], None)?;
            x = g.add(x, a)?;
            let h = layer.ln_ff.forward(g, x)?;
            let f = layer.ff.forward(g, h)?;
            x = g.add(x, f)?;
        }
        let x = dec.norm.forward(g, x)?;
        dec.proj.forward(g, x)
            .map_err(Into::into)
    }

    /// Longest output the decoders may emit for a source sentence.
    pub fn decode_limit(&self, source_len: usize) -> usize {
        (2 * source_len + 4).min(self.config.max_len - 1)
    }

    /// Zeroes the output projection of every draft-attention block.
    pub fn zero_draft_output(&mut self) {
        for layer in &self.dec2.layers {
            let (_, attn) = layer.draft.as_ref().expect("second-pass layers carry draft attention");
            for id in [attn.output.w, attn.output.b] {
                self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Scores next tokens of sentence `i` with one decoder pass.
pub struct ModelScorer<'m, 'g> {
    pub model: &'m NmtModel,
    pub graph: &'g mut Graph<'m>,
    pub ctx: &'g PassContext,
    pub sentence: usize,
}

impl NextToken for ModelScorer<'_, '_> {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = self.model.logits(self.graph, self.ctx, self.sentence, prefix)?;
        let t = self.graph.value(logits);
        let mut row = t.row(t.rows() - 1).to_vec();
        row[PAD] = f64::NEG_INFINITY;
        row[BOS] = f64::NEG_INFINITY;
        Ok(log_softmax(&row))
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// How each sentence of a talk is decoded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Greedy,
    Sample { seed: u64 },
    Beam { size: usize, alpha: f64 },
}

impl NmtModel {
    /// Decodes every sentence of a talk with one pass. The second pass
    /// requires `draft`.
    pub fn translate(
        &self,
        sources: &[&[usize]],
        pass: Pass,
        draft: Option<&FirstPassDraft>,
        strategy: Strategy,
    ) -> Result<Vec<Hypothesis>> {
        let mut g = self.graph();
        let enc = self.encode(&mut g, sources)?;
        let ctx = match pass {
            Pass::First => self.first_pass_context(&mut g, &enc)?,
            Pass::Second => self.second_pass_context(&mut g, &enc, draft)?,
        };
        let mut rng = match strategy {
            Strategy::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        let mut out = Vec::with_capacity(sources.len());
        for (i, s) in sources.iter().enumerate() {
            let limit = self.decode_limit(s.len());
            let mut scorer = ModelScorer {
                model: self,
                graph: &mut g,
                ctx: &ctx,
                sentence: i,
            };
            out.push(match strategy {
                Strategy::Greedy => greedy_decode(&mut scorer, limit)?,
                Strategy::Sample { .. } => {
                    sample_decode(&mut scorer, limit, rng.as_mut().expect("seeded above"))?
                }
                Strategy::Beam { size, alpha } => beam_decode(&mut scorer, limit, size, alpha)?,
            });
        }
        Ok(out)
    }

    /// Greedy first-pass translation of a talk, used as the second pass's
    /// draft.
    pub fn draft(&self, sources: &[&[usize]]) -> Result<FirstPassDraft> {
        self.draft_with(sources, Strategy::Greedy)
    }

    pub fn draft_with(&self, sources: &[&[usize]], strategy: Strategy) -> Result<FirstPassDraft> {
        Ok(FirstPassDraft {
            sentences: self
                .translate(sources, Pass::First, None, strategy)?
                .into_iter()
                .map(|h| h.tokens)
                .collect(),
        })
    }
}
