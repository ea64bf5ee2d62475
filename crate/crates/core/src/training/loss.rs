//! Per-talk objectives: the two likelihood terms, the self-critical terms and
//! their weighted combination.

use delib_tensor::{Gradients, Graph, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Talk, BOS, EOS};
use crate::error::{Error, Result};
use crate::eval::{bleu, BleuConfig};
use crate::model::{
    greedy_decode, sample_decode, FirstPassDraft, ModelScorer, NmtModel, Pass, PassContext,
};
use crate::teacher::RewardTeacher;

/// Where the document-level reward comes from.
#[derive(Clone, Copy, Debug)]
pub enum Reward<'t> {
    Teacher(&'t RewardTeacher),
    /// Smoothed talk-level BLEU as a fraction in `[0, 1]`.
    BleuDoc,
    /// Teacher reward plus `beta` times the talk-level BLEU fraction.
    Mixed { teacher: &'t RewardTeacher, beta: f64 },
}

fn talk_bleu(generated: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    let cfg = BleuConfig {
        smoothing: true,
        ..BleuConfig::default()
    };
    Ok(bleu(&[generated.concat()], &[gold.concat()], cfg)? / 100.0)
}

impl Reward<'_> {
    pub fn score(&self, generated: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
        match *self {
            Reward::Teacher(t) => t.order_reward(generated, gold),
            Reward::BleuDoc => talk_bleu(generated, gold),
            Reward::Mixed { teacher, beta } => {
                Ok(mixed_reward(teacher.order_reward(generated, gold)?, talk_bleu(generated, gold)?, beta))
            }
        }
    }
}

/// `teacher_r + beta * bleu_doc`; applied to both the sampled and the greedy
/// translation, the difference is `ΔR_teacher + beta · ΔBLEU_doc`.
pub fn mixed_reward(teacher_r: f64, bleu_doc: f64, beta: f64) -> f64 {
    teacher_r + beta * bleu_doc
}

/// Summed NLL of `sentences[i]` (plus EOS) under sentence `i` of `ctx`.
pub(crate) fn pass_nll(
    model: &NmtModel,
    g: &mut Graph,
    ctx: &PassContext,
    sentences: &[Vec<usize>],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, s) in sentences.iter().enumerate() {
        let mut prefix = Vec::with_capacity(s.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(s);
        let targets: Vec<Option<usize>> = s.iter().copied().chain([EOS]).map(Some).collect();
        let logits = model.logits(g, ctx, i, &prefix)?;
        let nll = g.nll(logits, &targets)?;
        total = Some(match total {
            None => nll,
            Some(t) => g.add(t, nll)?,
        });
    }
    total.ok_or(Error::EmptyDocument)
}

fn targets(talk: &Talk) -> Result<&[Vec<usize>]> {
    if !talk.has_targets() {
        return Err(Error::MissingTargets(talk.id.clone()));
    }
    Ok(&talk.target)
}

fn sources(talk: &Talk) -> Vec<&[usize]> {
    talk.source.iter().map(Vec::as_slice).collect()
}

/// `L_mle1`: teacher-forced NLL of the gold targets under the first pass.
pub fn mle_loss_first(model: &NmtModel, talk: &Talk) -> Result<f64> {
    let tgt = targets(talk)?;
    let mut g = model.graph();
    let enc = model.encode(&mut g, &sources(talk))?;
    let ctx = model.first_pass_context(&mut g, &enc)?;
    let l = pass_nll(model, &mut g, &ctx, tgt)?;
    Ok(g.value(l).item()?)
}

/// `L_mle2`: as [`mle_loss_first`] through the second pass given `draft`.
pub fn mle_loss_second(model: &NmtModel, talk: &Talk, draft: Option<&FirstPassDraft>) -> Result<f64> {
    let tgt = targets(talk)?;
    let mut g = model.graph();
    let enc = model.encode(&mut g, &sources(talk))?;
    let ctx = model.second_pass_context(&mut g, &enc, draft)?;
    let l = pass_nll(model, &mut g, &ctx, tgt)?;
    Ok(g.value(l).item()?)
}

/// `L_mle1 + L_mle2` with the draft greedily decoded by the first pass.
pub fn joint_mle_loss(model: &NmtModel, talk: &Talk) -> Result<f64> {
    let draft = model.draft(&sources(talk))?;
    Ok(mle_loss_first(model, talk)? + mle_loss_second(model, talk, Some(&draft))?)
}

/// `R · NLL(sampled)` through one pass; `advantage` is a constant.
pub fn rl_loss(
    model: &NmtModel,
    talk: &Talk,
    pass: Pass,
    draft: Option<&FirstPassDraft>,
    sampled: &[Vec<usize>],
    advantage: f64,
) -> Result<f64> {
    let mut g = model.graph();
    let enc = model.encode(&mut g, &sources(talk))?;
    let ctx = match pass {
        Pass::First => model.first_pass_context(&mut g, &enc)?,
        Pass::Second => model.second_pass_context(&mut g, &enc, draft)?,
    };
    let nll = pass_nll(model, &mut g, &ctx, sampled)?;
    let l = g.scale(nll, advantage);
    Ok(g.value(l).item()?)
}

/// Sampled and greedy translations of a talk and their rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCritical {
    pub sampled: Vec<Vec<usize>>,
    pub greedy: Vec<Vec<usize>>,
    pub reward_sampled: f64,
    pub reward_greedy: f64,
    /// `R = r(sampled) − r(greedy)`, shared by every token of the talk.
    pub advantage: f64,
}

/// Sentences of one talk.
type Sentences = Vec<Vec<usize>>;

fn decode_pass(
    model: &NmtModel,
    talk: &Talk,
    pass: Pass,
    draft: Option<&FirstPassDraft>,
    seed: u64,
) -> Result<(Sentences, Sentences)> {
    let src = sources(talk);
    let mut g = model.graph();
    let enc = model.encode(&mut g, &src)?;
    let ctx = match pass {
        Pass::First => model.first_pass_context(&mut g, &enc)?,
        Pass::Second => model.second_pass_context(&mut g, &enc, draft)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled = Vec::with_capacity(src.len());
    let mut greedy = Vec::with_capacity(src.len());
    for (i, s) in src.iter().enumerate() {
        let limit = model.decode_limit(s.len());
        let mut scorer = ModelScorer {
            model,
            graph: &mut g,
            ctx: &ctx,
            sentence: i,
        };
        sampled.push(sample_decode(&mut scorer, limit, &mut rng)?.tokens);
        greedy.push(greedy_decode(&mut scorer, limit)?.tokens);
    }
    Ok((sampled, greedy))
}

/// Samples `ŷ` and greedily decodes `y*` from one pass and scores both
/// against the gold talk.
pub fn self_critical(
    model: &NmtModel,
    talk: &Talk,
    pass: Pass,
    draft: Option<&FirstPassDraft>,
    reward: &Reward,
    seed: u64,
) -> Result<SelfCritical> {
    let gold = targets(talk)?;
    let (sampled, greedy) = decode_pass(model, talk, pass, draft, seed)?;
    let reward_sampled = reward.score(&sampled, gold)?;
    let reward_greedy = reward.score(&greedy, gold)?;
    Ok(SelfCritical {
        advantage: reward_sampled - reward_greedy,
        sampled,
        greedy,
        reward_sampled,
        reward_greedy,
    })
}

/// `L_rl` for a freshly sampled talk, with its self-critical record.
pub fn self_critical_loss(
    model: &NmtModel,
    talk: &Talk,
    pass: Pass,
    draft: Option<&FirstPassDraft>,
    reward: &Reward,
    seed: u64,
) -> Result<(f64, SelfCritical)> {
    let sc = self_critical(model, talk, pass, draft, reward, seed)?;
    let l = rl_loss(model, talk, pass, draft, &sc.sampled, sc.advantage)?;
    Ok((l, sc))
}

/// Which terms of the combined objective are active, and their weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub second_pass: bool,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("{name} = {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Terms of one combined-loss evaluation. Absent terms are inactive.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mle1: f64,
    pub mle2: Option<f64>,
    pub rl1: Option<f64>,
    pub rl2: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub loss: f64,
    pub first: Option<SelfCritical>,
    pub second: Option<SelfCritical>,
    pub target_tokens: usize,
}

impl LossTerms {
    /// Recombines the reported terms.
    pub fn recombined(&self) -> f64 {
        let mut l = self.mle1 * self.lambda1;
        if let Some(r) = self.rl1 {
            l += r * (1.0 - self.lambda1);
        }
        if let Some(m) = self.mle2 {
            l += m * self.lambda2;
        }
        if let Some(r) = self.rl2 {
            l += r * (1.0 - self.lambda2);
        }
        l
    }
}

/// Seeds for the two passes' sampling within one step.
pub fn sample_seeds(seed: u64) -> (u64, u64) {
    let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    (s ^ 0x5151, s ^ 0xa2a2)
}

/// Evaluates `λ1·L_mle1 + (1−λ1)·L_rl1 + λ2·L_mle2 + (1−λ2)·L_rl2` for a talk.
/// An RL term is computed only when its λ is below 1; second-pass terms only
/// when `weights.second_pass`. The draft is the greedy first-pass
/// translation unless one is supplied. Gradients are returned when
/// `with_grads` is set.
pub fn combined_loss(
    model: &NmtModel,
    talk: &Talk,
    reward: Option<&Reward>,
    weights: LossWeights,
    draft: Option<&FirstPassDraft>,
    seed: u64,
    with_grads: bool,
) -> Result<(LossTerms, Option<Gradients>)> {
    weights.validate()?;
    targets(talk)?;
    let rl1 = weights.lambda1 < 1.0;
    let rl2 = weights.second_pass && weights.lambda2 < 1.0;
    let need_reward = || reward.ok_or_else(|| Error::Config("RL terms need a reward".into()));
    let (seed1, seed2) = sample_seeds(seed);
    let own_draft;
    let draft = if weights.second_pass && draft.is_none() {
        own_draft = model.draft(&sources(talk))?;
        Some(&own_draft)
    } else {
        draft
    };
    let first = if rl1 {
        Some(self_critical(model, talk, Pass::First, None, need_reward()?, seed1)?)
    } else {
        None
    };
    let second = if rl2 {
        Some(self_critical(model, talk, Pass::Second, draft, need_reward()?, seed2)?)
    } else {
        None
    };
    combined_loss_given(model, talk, weights, draft, first, second, with_grads)
}

/// [`combined_loss`] with the draft and the self-critical samples fixed, so
/// the loss is a deterministic function of the parameters.
pub fn combined_loss_given(
    model: &NmtModel,
    talk: &Talk,
    weights: LossWeights,
    draft: Option<&FirstPassDraft>,
    first: Option<SelfCritical>,
    second: Option<SelfCritical>,
    with_grads: bool,
) -> Result<(LossTerms, Option<Gradients>)> {
    weights.validate()?;
    let gold = targets(talk)?;
    let src = sources(talk);
    let mut g = model.graph();
    let enc = model.encode(&mut g, &src)?;
    let ctx1 = model.first_pass_context(&mut g, &enc)?;
    let mle1 = pass_nll(model, &mut g, &ctx1, gold)?;
    let mut terms = LossTerms {
        mle1: g.value(mle1).item()?,
        lambda1: weights.lambda1,
        lambda2: if weights.second_pass { weights.lambda2 } else { 1.0 },
        target_tokens: gold.iter().map(|s| s.len() + 1).sum(),
        ..LossTerms::default()
    };
    let mut loss = g.scale(mle1, weights.lambda1);
    if let (true, Some(sc)) = (weights.lambda1 < 1.0, &first) {
        let nll = pass_nll(model, &mut g, &ctx1, &sc.sampled)?;
        let l = g.scale(nll, sc.advantage);
        terms.rl1 = Some(g.value(l).item()?);
        let w = g.scale(l, 1.0 - weights.lambda1);
        loss = g.add(loss, w)?;
    }
    if weights.second_pass {
        let ctx2 = model.second_pass_context(&mut g, &enc, draft)?;
        let mle2 = pass_nll(model, &mut g, &ctx2, gold)?;
        terms.mle2 = Some(g.value(mle2).item()?);
        let w = g.scale(mle2, weights.lambda2);
        loss = g.add(loss, w)?;
        if let (true, Some(sc)) = (weights.lambda2 < 1.0, &second) {
            let nll = pass_nll(model, &mut g, &ctx2, &sc.sampled)?;
            let l = g.scale(nll, sc.advantage);
            terms.rl2 = Some(g.value(l).item()?);
            let w = g.scale(l, 1.0 - weights.lambda2);
            loss = g.add(loss, w)?;
        }
    }
    terms.loss = g.value(loss).item()?;
    terms.first = first;
    terms.second = second;
    let grads = if with_grads { Some(g.backward(loss)?) } else { None };
    Ok((terms, grads))
}
