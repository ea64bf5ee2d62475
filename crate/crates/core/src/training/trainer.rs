//! Training loop, evaluation and the balance-factor sweep.

use std::fmt::Write as _;
use std::path::Path;

use delib_tensor::{Adam, AdamConfig};
use log::info;
use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use super::loss::{combined_loss, pass_nll, LossTerms, LossWeights, Reward};
use crate::corpus::{shuffle_epoch, EpochPlan, Talk};
use crate::error::{Error, Result};
use crate::eval::{bleu, bleu_doc, BleuConfig};
use crate::model::{ModelConfig, NmtModel, Pass, Strategy};
use crate::teacher::RewardTeacher;

/// One line of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub talk: String,
    pub mode: Mode,
    pub l_mle1: f64,
    pub l_mle2: Option<f64>,
    pub l_rl1: Option<f64>,
    pub l_rl2: Option<f64>,
    pub loss: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub reward_sampled1: Option<f64>,
    pub reward_greedy1: Option<f64>,
    pub advantage1: Option<f64>,
    pub reward_sampled2: Option<f64>,
    pub reward_greedy2: Option<f64>,
    pub advantage2: Option<f64>,
    /// Weight of every sampled token in `L_rl1` (one entry per token, EOS
    /// included).
    pub token_weights1: Vec<f64>,
    pub token_weights2: Vec<f64>,
    pub target_tokens: usize,
    pub grad_norm: f64,
}

impl StepReport {
    fn new(step: usize, epoch: usize, talk: &Talk, mode: Mode, t: &LossTerms, grad_norm: f64) -> Self {
        let weights = |sc: &Option<super::SelfCritical>| {
            sc.as_ref().map_or_else(Vec::new, |sc| {
                let n: usize = sc.sampled.iter().map(|s| s.len() + 1).sum();
                vec![sc.advantage; n]
            })
        };
        StepReport {
            step,
            epoch,
            talk: talk.id.clone(),
            mode,
            l_mle1: t.mle1,
            l_mle2: t.mle2,
            l_rl1: t.rl1,
            l_rl2: t.rl2,
            loss: t.loss,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            reward_sampled1: t.first.as_ref().map(|s| s.reward_sampled),
            reward_greedy1: t.first.as_ref().map(|s| s.reward_greedy),
            advantage1: t.first.as_ref().map(|s| s.advantage),
            reward_sampled2: t.second.as_ref().map(|s| s.reward_sampled),
            reward_greedy2: t.second.as_ref().map(|s| s.reward_greedy),
            advantage2: t.second.as_ref().map(|s| s.advantage),
            token_weights1: weights(&t.first),
            token_weights2: weights(&t.second),
            target_tokens: t.target_tokens,
            grad_norm,
        }
    }

    /// The combined loss rebuilt from the reported terms.
    pub fn recombined(&self) -> f64 {
        let mut l = self.l_mle1 * self.lambda1;
        if let Some(r) = self.l_rl1 {
            l += r * (1.0 - self.lambda1);
        }
        if let Some(m) = self.l_mle2 {
            l += m * self.lambda2;
        }
        if let Some(r) = self.l_rl2 {
            l += r * (1.0 - self.lambda2);
        }
        l
    }
}

/// Builds the reward a mode needs.
pub fn reward_for<'t>(mode: Mode, teacher: Option<&'t RewardTeacher>, beta: f64) -> Result<Option<Reward<'t>>> {
    let need = || teacher.ok_or_else(|| Error::Config(format!("mode {mode} needs a reward teacher")));
    Ok(match mode {
        Mode::FirstPass | Mode::TwoPass => None,
        Mode::FirstPassRl | Mode::TwoPassRl => Some(Reward::Teacher(need()?)),
        Mode::TwoPassBleu => Some(Reward::BleuDoc),
        Mode::TwoPassBleuRl => Some(Reward::Mixed {
            teacher: need()?,
            beta,
        }),
    })
}

pub fn model_config(config: &TrainConfig, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: config.d_model,
        heads: config.heads,
        d_ff: config.d_ff,
        enc_layers: config.enc_layers,
        dec_layers: config.dec_layers,
        max_len: config.max_len,
        ..ModelConfig::new(src_vocab, tgt_vocab)
    }
}

/// Resumable training state. Cloning a trainer forks an identical run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: NmtModel,
    adam: Adam,
    pub steps: usize,
    pub epoch: usize,
    cursor: usize,
    plan: Option<EpochPlan>,
    pub history: Vec<StepReport>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: NmtModel) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        Ok(Trainer {
            config,
            model,
            adam,
            steps: 0,
            epoch: 0,
            cursor: 0,
            plan: None,
            history: Vec::new(),
        })
    }

    /// Weights in force for the next step: likelihood only during warm-up.
    pub fn current_weights(&self) -> LossWeights {
        if self.steps < self.config.warmup_steps {
            self.config.mode.weights(1.0, 1.0)
        } else {
            self.config.weights()
        }
    }

    fn step_seed(&self) -> u64 {
        self.config
            .seed
            .wrapping_mul(0x2545_f491_4f6c_dd1d)
            .wrapping_add(self.steps as u64)
    }

    /// One optimiser step on one talk.
    pub fn step_talk(&mut self, talk: &Talk, reward: Option<&Reward>) -> Result<StepReport> {
        let weights = self.current_weights();
        let seed = self.step_seed();
        let (terms, grads) = combined_loss(&self.model, talk, reward, weights, None, seed, true)?;
        let grads = grads.expect("requested gradients");
        let norm = self.adam.step(&mut self.model.store, &grads);
        let report = StepReport::new(self.steps, self.epoch, talk, self.config.mode, &terms, norm);
        self.steps += 1;
        self.history.push(report.clone());
        Ok(report)
    }

    /// Starts the next epoch's plan when the current one is exhausted.
    fn ensure_plan(&mut self, talks: &[Talk]) -> Result<()> {
        if self.plan.as_ref().is_none_or(|p| self.cursor >= p.batches.len()) {
            if self.plan.is_some() {
                self.epoch += 1;
            }
            let seed = self.config.seed.wrapping_add(1000 * self.epoch as u64);
            self.plan = Some(shuffle_epoch(talks, self.config.shuffle, seed)?);
            self.cursor = 0;
        }
        Ok(())
    }

    fn next_batch(&mut self, talks: &[Talk]) -> Result<Talk> {
        self.ensure_plan(talks)?;
        let plan = self.plan.as_ref().expect("planned above");
        let talk = plan.batch_talk(talks, self.cursor);
        self.cursor += 1;
        Ok(talk)
    }

    /// Runs `n` steps over `talks`, continuing the current epoch.
    pub fn train_steps(&mut self, talks: &[Talk], reward: Option<&Reward>, n: usize) -> Result<()> {
        for _ in 0..n {
            let talk = self.next_batch(talks)?;
            self.step_talk(&talk, reward)?;
        }
        Ok(())
    }

    /// Runs the rest of the current epoch (a whole new one if the current
    /// epoch is finished), stopping early at `max_steps`.
    pub fn train_epoch(&mut self, talks: &[Talk], reward: Option<&Reward>) -> Result<()> {
        self.ensure_plan(talks)?;
        let len = self.plan.as_ref().map_or(0, |p| p.batches.len());
        while self.cursor < len {
            if self.config.max_steps.is_some_and(|m| self.steps >= m) {
                break;
            }
            let talk = self.next_batch(talks)?;
            self.step_talk(&talk, reward)?;
        }
        Ok(())
    }

    pub fn write_history(&self, out: &mut dyn std::io::Write) -> Result<()> {
        for r in &self.history {
            let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io("<history>", e))?;
        }
        Ok(())
    }
}

/// Per-token likelihood loss on held-out talks, summed over the passes the
/// mode trains (the second pass conditions on greedy drafts).
pub fn dev_loss(model: &NmtModel, talks: &[Talk], mode: Mode) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for talk in talks {
        if !talk.has_targets() {
            return Err(Error::MissingTargets(talk.id.clone()));
        }
        let src: Vec<&[usize]> = talk.source.iter().map(Vec::as_slice).collect();
        let mut g = model.graph();
        let enc = model.encode(&mut g, &src)?;
        let ctx = model.first_pass_context(&mut g, &enc)?;
        let l1 = pass_nll(model, &mut g, &ctx, &talk.target)?;
        total += g.value(l1).item()?;
        if mode.two_pass() {
            drop(g);
            let draft = model.draft(&src)?;
            let mut g = model.graph();
            let enc = model.encode(&mut g, &src)?;
            let ctx = model.second_pass_context(&mut g, &enc, Some(&draft))?;
            let l2 = pass_nll(model, &mut g, &ctx, &talk.target)?;
            total += g.value(l2).item()?;
        }
        tokens += talk.target.iter().map(|s| s.len() + 1).sum::<usize>();
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(total / tokens as f64)
}

fn strategy(beam_size: usize, alpha: f64) -> Strategy {
    if beam_size <= 1 {
        Strategy::Greedy
    } else {
        Strategy::Beam {
            size: beam_size,
            alpha,
        }
    }
}

/// Translates talks with the final pass of `mode`. Two-pass modes draft with
/// the first pass, then decode the second pass; both use the same strategy.
pub fn translate_talks(
    model: &NmtModel,
    talks: &[Talk],
    two_pass: bool,
    beam_size: usize,
    alpha: f64,
) -> Result<Vec<Vec<Vec<usize>>>> {
    let strat = strategy(beam_size, alpha);
    talks
        .iter()
        .map(|t| {
            let src: Vec<&[usize]> = t.source.iter().map(Vec::as_slice).collect();
            let draft = model.draft_with(&src, strat)?;
            if !two_pass {
                return Ok(draft.sentences);
            }
            Ok(model
                .translate(&src, Pass::Second, Some(&draft), strat)?
                .into_iter()
                .map(|h| h.tokens)
                .collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub bleu: f64,
    pub bleu_doc: f64,
    pub loss: f64,
}

pub fn evaluate(model: &NmtModel, talks: &[Talk], mode: Mode, beam_size: usize, alpha: f64) -> Result<DevMetrics> {
    let hyps = translate_talks(model, talks, mode.two_pass(), beam_size, alpha)?;
    let refs: Vec<Vec<Vec<usize>>> = talks.iter().map(|t| t.target.clone()).collect();
    let flat_h: Vec<Vec<usize>> = hyps.iter().flatten().cloned().collect();
    let flat_r: Vec<Vec<usize>> = refs.iter().flatten().cloned().collect();
    Ok(DevMetrics {
        bleu: bleu(&flat_h, &flat_r, BleuConfig::default())?,
        bleu_doc: bleu_doc(&hyps, &refs, BleuConfig::default())?,
        loss: dev_loss(model, talks, mode)?,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: NmtModel,
    pub history: Vec<StepReport>,
    pub dev_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Full training run: epochs over `train`, dev loss after each epoch, a
/// checkpoint per epoch under `out_dir`, early stopping after `patience`
/// epochs without improvement. Returns the best model by dev loss.
pub fn train(
    config: &TrainConfig,
    model: NmtModel,
    train_talks: &[Talk],
    dev_talks: &[Talk],
    teacher: Option<&RewardTeacher>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let reward = reward_for(config.mode, teacher, config.beta)?;
    let mut trainer = Trainer::new(config.clone(), model)?;
    let mut best: Option<(f64, usize, NmtModel)> = None;
    let mut dev_losses = Vec::new();
    for epoch in 0..config.epochs {
        trainer.train_epoch(train_talks, reward.as_ref())?;
        let loss = if dev_talks.is_empty() {
            f64::NAN
        } else {
            dev_loss(&trainer.model, dev_talks, config.mode)?
        };
        info!("epoch {epoch}: step {} dev loss {loss:.4}", trainer.steps);
        dev_losses.push(loss);
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            trainer.model.save(&dir.join(format!("epoch-{epoch}.ckpt")))?;
        }
        let improved = best.as_ref().is_none_or(|(b, _, _)| loss < *b || b.is_nan());
        if improved {
            best = Some((loss, epoch, trainer.model.clone()));
        } else if let Some(p) = config.patience {
            let best_epoch = best.as_ref().map_or(0, |b| b.1);
            if epoch - best_epoch >= p {
                info!("early stop after epoch {epoch}");
                break;
            }
        }
        if config.max_steps.is_some_and(|m| trainer.steps >= m) {
            break;
        }
    }
    let (_, best_epoch, model) = best.ok_or_else(|| Error::Config("epochs must be positive".into()))?;
    if let Some(dir) = out_dir {
        model.save(&dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome {
        model,
        history: trainer.history,
        dev_losses,
        best_epoch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub stage: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub bleu: f64,
    pub bleu_doc: f64,
    pub dev_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub best_lambda1: f64,
    pub best_lambda2: f64,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut out = String::from("stage\tlambda1\tlambda2\tBLEU\tBLEU_doc\tdev_loss\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.2}\t{:.2}\t{:.4}\t{:.4}\t{:.4}",
                r.stage, r.lambda1, r.lambda2, r.bleu, r.bleu_doc, r.dev_loss
            );
        }
        out
    }
}

/// `0.70, 0.75, …, 1.00`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=6).map(|k| (70 + 5 * k) as f64 / 100.0).collect()
}

/// Sweeps λ1 in first-pass-rl, then λ2 in two-pass-rl with λ1 fixed at the
/// best first-stage value (by dev BLEU_doc). Every grid point continues from
/// a copy of `warm` for `steps` steps.
pub fn lambda_sweep(
    warm: &Trainer,
    train_talks: &[Talk],
    dev_talks: &[Talk],
    teacher: &RewardTeacher,
    grid: &[f64],
    steps: usize,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let mut rows = Vec::new();
    let run = |mode: Mode, l1: f64, l2: f64, stage: &str| -> Result<SweepRow> {
        let mut t = warm.clone();
        t.config.mode = mode;
        t.config.lambda1 = l1;
        t.config.lambda2 = l2;
        t.config.validate()?;
        let reward = reward_for(mode, Some(teacher), t.config.beta)?;
        t.train_steps(train_talks, reward.as_ref(), steps)?;
        let m = evaluate(&t.model, dev_talks, mode, t.config.beam_size, t.config.length_penalty)?;
        info!("sweep {stage} λ1={l1:.2} λ2={l2:.2}: BLEU_doc {:.3}", m.bleu_doc);
        Ok(SweepRow {
            stage: stage.to_string(),
            lambda1: l1,
            lambda2: l2,
            bleu: m.bleu,
            bleu_doc: m.bleu_doc,
            dev_loss: m.loss,
        })
    };
    let l2_default = warm.config.lambda2;
    let mut best1 = (f64::NEG_INFINITY, grid[0]);
    for &l1 in grid {
        let row = run(Mode::FirstPassRl, l1, l2_default, "lambda1")?;
        if row.bleu_doc > best1.0 {
            best1 = (row.bleu_doc, l1);
        }
        rows.push(row);
    }
    let mut best2 = (f64::NEG_INFINITY, grid[0]);
    for &l2 in grid {
        let row = run(Mode::TwoPassRl, best1.1, l2, "lambda2")?;
        if row.bleu_doc > best2.0 {
            best2 = (row.bleu_doc, l2);
        }
        rows.push(row);
    }
    Ok(SweepTable {
        rows,
        best_lambda1: best1.1,
        best_lambda2: best2.1,
    })
}
