use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use delib_core::corpus::{
    encode_talks, make_synthetic_discourse_corpus, read_documents, write_documents, SynthConfig,
    Talk, TextTalk, Vocabulary, MAX_TALK_SENTENCES,
};
use delib_core::eval::{train_word_vectors, BleuConfig, EvalReport, SkipGramConfig, WordVectors, DEFAULT_CONJUNCTIONS};
use delib_core::model::NmtModel;
use delib_core::teacher::{train_teacher, RewardTeacher, TeacherConfig, TeacherTrainConfig};
use delib_core::training::{
    default_lambda_grid, lambda_sweep, model_config, reward_for, train, translate_talks, Mode,
    TrainConfig, Trainer,
};
use log::info;

#[derive(Parser)]
#[command(name = "delib", version, about = "Two-pass document translation with an order-reward teacher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by the commands that read the training config.
#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "beam-size")]
    beam_size: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(m) = &self.mode {
            c.set("mode", m)?;
        }
        if let Some(v) = self.lambda1 {
            c.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            c.lambda2 = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.beam_size {
            c.beam_size = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file from a tokenized document file.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        /// Tokenized documents.
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Size limit including the four reserved entries (default: config `vocab_size`).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Write a synthetic parallel corpus (train.src/tgt, dev.src/tgt, test.src/tgt).
    MakeSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 600)]
        train_talks: usize,
        #[arg(long, default_value_t = 100)]
        dev_talks: usize,
        #[arg(long, default_value_t = 100)]
        test_talks: usize,
    },
    /// Train the order-reward teacher on target-side documents.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Target-side documents (default: config `train_tgt`).
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Target vocabulary (default: config `tgt_vocab`).
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
    },
    /// Train a translation model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training source documents (default: config `train_src`).
        #[arg(long)]
        src: Option<PathBuf>,
        /// Training target documents (default: config `train_tgt`).
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Output directory for checkpoints and the metrics history.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Translate a document file.
    Translate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score translations: BLEU, BLEU_doc, coherence, conjunction counts.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Word vectors for the coherence score.
        #[arg(long)]
        vectors: Option<PathBuf>,
        /// Also write the report as JSON lines here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated conjunction list.
        #[arg(long)]
        conjunctions: Option<String>,
        /// Add-one smoothing for n-gram orders above one.
        #[arg(long)]
        smooth: bool,
    },
    /// Train skip-gram word vectors on a document file.
    TrainVectors {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Balance-factor sweep: λ1 in first-pass-rl, then λ2 in two-pass-rl.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Where to write the table (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Likelihood-only steps shared by every grid point.
        #[arg(long, default_value_t = 500)]
        warm_steps: usize,
        /// Steps per grid point.
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
}

fn require<'a>(config: &'a TrainConfig, key: &str) -> Result<&'a Path> {
    config
        .path(key)
        .with_context(|| format!("config key `{key}` is required"))
}

fn read_docs(path: &Path) -> Result<Vec<TextTalk>> {
    read_documents(path).with_context(|| format!("reading {}", path.display()))
}

struct Data {
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

impl Data {
    fn load(config: &TrainConfig) -> Result<Self> {
        Ok(Data {
            src_vocab: Vocabulary::load(require(config, "src_vocab")?)?,
            tgt_vocab: Vocabulary::load(require(config, "tgt_vocab")?)?,
        })
    }

    fn talks(&self, src: &Path, tgt: Option<&Path>) -> Result<Vec<Talk>> {
        let s = read_docs(src)?;
        let t = tgt.map(read_docs).transpose()?;
        Ok(encode_talks(&s, t.as_deref(), &self.src_vocab, &self.tgt_vocab, MAX_TALK_SENTENCES)?)
    }
}

fn load_teacher(config: &TrainConfig, data: &Data) -> Result<Option<RewardTeacher>> {
    if !config.mode.uses_teacher() {
        return Ok(None);
    }
    let t = RewardTeacher::load(require(config, "teacher")?)?;
    if !t.vocab_fingerprint.is_empty() && t.vocab_fingerprint != data.tgt_vocab.fingerprint() {
        bail!("the teacher was trained with a different target vocabulary");
    }
    Ok(Some(t))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab { common, src, out, size } => {
            let config = common.load()?;
            let docs = read_docs(&src)?;
            let v = Vocabulary::build(docs.iter().flatten().map(Vec::as_slice), size.unwrap_or(config.vocab_size))?;
            v.save(&out)?;
            println!("{} entries written to {}", v.len(), out.display());
        }
        Command::MakeSynth {
            out,
            seed,
            train_talks,
            dev_talks,
            test_talks,
        } => {
            std::fs::create_dir_all(&out)?;
            let cfg = SynthConfig {
                n_talks: train_talks + dev_talks + test_talks,
                seed,
                ..SynthConfig::default()
            };
            let (src, tgt) = make_synthetic_discourse_corpus(&cfg)?;
            let cuts = [
                ("train", 0, train_talks),
                ("dev", train_talks, train_talks + dev_talks),
                ("test", train_talks + dev_talks, cfg.n_talks),
            ];
            for (name, a, b) in cuts {
                write_documents(&out.join(format!("{name}.src")), &src[a..b])?;
                write_documents(&out.join(format!("{name}.tgt")), &tgt[a..b])?;
            }
            println!("wrote {} talks to {}", cfg.n_talks, out.display());
        }
        Command::TrainTeacher {
            common,
            reference,
            vocab,
            out,
            epochs,
        } => {
            let config = common.load()?;
            let docs_path = match &reference {
                Some(p) => p.as_path(),
                None => require(&config, "train_tgt")?,
            };
            let vocab_path = match &vocab {
                Some(p) => p.as_path(),
                None => require(&config, "tgt_vocab")?,
            };
            let v = Vocabulary::load(vocab_path)?;
            let docs: Vec<Vec<Vec<usize>>> = read_docs(docs_path)?
                .iter()
                .flat_map(|t| t.chunks(MAX_TALK_SENTENCES))
                .map(|t| t.iter().map(|s| v.encode(s)).collect())
                .collect();
            let train_cfg = TeacherTrainConfig {
                epochs,
                seed: config.seed,
                ..TeacherTrainConfig::default()
            };
            let (mut teacher, history) = train_teacher(&docs, TeacherConfig::new(v.len()), &train_cfg)?;
            teacher.vocab_fingerprint = v.fingerprint();
            teacher.save(&out)?;
            for (e, l) in history.iter().enumerate() {
                println!("epoch\t{e}\tL_abs\t{l:.6}");
            }
        }
        Command::Train {
            common,
            src,
            reference,
            out,
        } => {
            let mut config = common.load()?;
            if let Some(p) = src {
                config.paths.insert("train_src".into(), p);
            }
            if let Some(p) = reference {
                config.paths.insert("train_tgt".into(), p);
            }
            let data = Data::load(&config)?;
            let train_talks = data.talks(require(&config, "train_src")?, Some(require(&config, "train_tgt")?))?;
            let dev_talks = match (config.path("dev_src"), config.path("dev_tgt")) {
                (Some(s), Some(t)) => data.talks(s, Some(t))?,
                _ => Vec::new(),
            };
            let teacher = load_teacher(&config, &data)?;
            let out_dir = out.or_else(|| config.path("out_dir").map(Path::to_path_buf));
            let model = NmtModel::new(
                model_config(&config, data.src_vocab.len(), data.tgt_vocab.len()),
                config.seed,
            )?;
            info!("training {} on {} talks", config.mode, train_talks.len());
            let outcome = train(&config, model, &train_talks, &dev_talks, teacher.as_ref(), out_dir.as_deref())?;
            if let Some(dir) = &out_dir {
                let path = dir.join("history.jsonl");
                let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                for r in &outcome.history {
                    use std::io::Write;
                    writeln!(f, "{}", serde_line(r)?)?;
                }
            }
            for (e, l) in outcome.dev_losses.iter().enumerate() {
                println!("epoch\t{e}\tdev_loss\t{l:.6}");
            }
            println!("best_epoch\t{}", outcome.best_epoch);
        }
        Command::Translate {
            common,
            model,
            src,
            out,
        } => {
            let config = common.load()?;
            let data = Data::load(&config)?;
            let m = NmtModel::load(&model)?;
            let docs = read_docs(&src)?;
            let mut lines: Vec<TextTalk> = Vec::with_capacity(docs.len());
            for (k, doc) in docs.iter().enumerate() {
                let talks = encode_talks(
                    std::slice::from_ref(doc),
                    None,
                    &data.src_vocab,
                    &data.tgt_vocab,
                    MAX_TALK_SENTENCES,
                )?;
                let hyps = translate_talks(&m, &talks, config.mode.two_pass(), config.beam_size, config.length_penalty)
                    .with_context(|| format!("translating talk {k}"))?;
                lines.push(
                    hyps.iter()
                        .flatten()
                        .map(|s| data.tgt_vocab.decode(s))
                        .collect(),
                );
            }
            write_documents(&out, &lines)?;
        }
        Command::Evaluate {
            hyp,
            reference,
            vectors,
            out,
            conjunctions,
            smooth,
        } => {
            let h = read_docs(&hyp)?;
            let r = read_docs(&reference)?;
            let v = vectors.as_deref().map(WordVectors::load).transpose()?;
            let list: Vec<&str> = match &conjunctions {
                Some(c) => c.split(',').map(str::trim).filter(|s| !s.is_empty()).collect(),
                None => DEFAULT_CONJUNCTIONS.to_vec(),
            };
            let cfg = BleuConfig {
                smoothing: smooth,
                ..BleuConfig::default()
            };
            let report = EvalReport::compute(&h, &r, v.as_ref(), &list, cfg)?;
            print!("{}", report.to_text());
            if let Some(p) = out {
                std::fs::write(&p, report.to_jsonl()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::TrainVectors {
            reference,
            out,
            dim,
            epochs,
            seed,
        } => {
            let docs = read_docs(&reference)?;
            let sentences: Vec<Vec<String>> = docs.into_iter().flatten().collect();
            let cfg = SkipGramConfig {
                dim,
                epochs,
                seed,
                ..SkipGramConfig::default()
            };
            let v = train_word_vectors(&sentences, &cfg)?;
            v.save(&out)?;
            println!("{} vectors of dimension {dim} written to {}", v.len(), out.display());
        }
        Command::Sweep {
            common,
            out,
            warm_steps,
            steps,
        } => {
            let config = common.load()?;
            let data = Data::load(&config)?;
            let train_talks = data.talks(require(&config, "train_src")?, Some(require(&config, "train_tgt")?))?;
            let dev_talks = data.talks(require(&config, "dev_src")?, Some(require(&config, "dev_tgt")?))?;
            let teacher = RewardTeacher::load(require(&config, "teacher")?)?;
            let model = NmtModel::new(
                model_config(&config, data.src_vocab.len(), data.tgt_vocab.len()),
                config.seed,
            )?;
            let mut warm_cfg = config.clone();
            warm_cfg.mode = Mode::TwoPass;
            let mut warm = Trainer::new(warm_cfg, model)?;
            let none = reward_for(Mode::TwoPass, None, config.beta)?;
            warm.train_steps(&train_talks, none.as_ref(), warm_steps)?;
            let table = lambda_sweep(&warm, &train_talks, &dev_talks, &teacher, &default_lambda_grid(), steps)?;
            let text = table.to_text();
            match out {
                Some(p) => std::fs::write(&p, &text)?,
                None => print!("{text}"),
            }
            println!("best\tlambda1={:.2}\tlambda2={:.2}", table.best_lambda1, table.best_lambda2);
        }
    }
    Ok(())
}

fn serde_line(r: &delib_core::training::StepReport) -> Result<String> {
    Ok(serde_json::to_string(r)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
