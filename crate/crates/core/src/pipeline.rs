//! Pipeline stages over one output directory.
//!
//! Each stage reads the artifacts of earlier stages from the directory and
//! writes its own. A missing prerequisite is reported with the stage that
//! produces it. Every run stores the effective config in `config.toml`, a
//! per-stage snapshot under `snapshots/`, and appends to `run.log`. A lock
//! file keeps two runs out of the same directory.
//!
//! | stage              | reads                          | writes                                        |
//! |--------------------|--------------------------------|-----------------------------------------------|
//! | `gen-corpus`       |                                | `corpus/{train,val,test}.txt`, `corpus/vocab.txt` |
//! | `pretrain-encoder` | corpus                         | `encoder.ckpt`, `encoder_curve.csv`           |
//! | `fit-normalizer`   | corpus, encoder                | `normalizer.ckpt`, `normalizer.csv`           |
//! | `train-decoder`    | corpus, encoder, normalizer    | `decoder.ckpt`, `decoder_curve.csv`           |
//! | `train-diffusion`  | corpus, encoder, normalizer    | `diffusion.ckpt`, `training_curve.csv`        |
//! | `sample`           | corpus, diffusion, decoder     | `samples.txt`, `trace.csv`                    |
//! | `eval`             | corpus, diffusion, decoder     | `metrics.csv`, `metrics_summary.csv`          |
//! | `analyze`          | corpus, encoder, normalizer, diffusion, decoder | `analysis/*.csv`              |

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use autograd::{Checkpoint, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{CorpusKind, ExperimentConfig};
use crate::corpus::{
    duplicate_rate, generate_paraphrase_pairs, generate_story_corpus, read_lines, split_corpus, tokenize_all,
    write_lines, ParaphraseOptions, TokenSeq, Vocab,
};
use crate::decoder::{train_decoder, DecoderData, DecoderModel, DecoderVariant};
use crate::denoiser::{train_denoiser, Denoise, DenoiserModel};
use crate::encoder::{pretrain_encoder, EncoderMode, EncoderModel, LatentSpace, Normalizer};
use crate::error::{Error, Result};
use crate::grammar::{is_valid_story, paraphrase};
use crate::metrics::{
    diversity, magnitude, memorization, repeated_sc_probe, timestep_difficulty, FourGramIndex, MeanStd,
};
use crate::sampler::{generate, sample_latents, SamplerConfig, TraceRow};
use crate::schedule::{uniform_grid, NoiseSchedule};
use crate::trainer::select;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    GenCorpus,
    PretrainEncoder,
    FitNormalizer,
    TrainDecoder,
    TrainDiffusion,
    Sample,
    Eval,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenCorpus,
        Stage::PretrainEncoder,
        Stage::FitNormalizer,
        Stage::TrainDecoder,
        Stage::TrainDiffusion,
        Stage::Sample,
        Stage::Eval,
        Stage::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::PretrainEncoder => "pretrain-encoder",
            Stage::FitNormalizer => "fit-normalizer",
            Stage::TrainDecoder => "train-decoder",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::Sample => "sample",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Command-line overrides of config values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Training steps of the stage being run, or `T` for sampling stages.
    pub steps: Option<usize>,
    pub schedule: Option<String>,
    pub self_cond: Option<bool>,
    pub mbr: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig, stage: Stage) {
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.sampler.seed = seed;
        }
        if let Some(s) = &self.schedule {
            config.schedule = s.clone();
        }
        if let Some(on) = self.self_cond {
            config.denoiser.self_condition = on;
            config.sampler.self_condition = on;
        }
        if let Some(k) = self.mbr {
            config.sampler.mbr_k = k;
        }
        if let Some(n) = self.steps {
            match stage {
                Stage::PretrainEncoder => config.encoder.pretrain.max_steps = n,
                Stage::TrainDecoder => config.decoder.train.steps = n,
                Stage::TrainDiffusion => config.denoiser.train.steps = n,
                Stage::Sample | Stage::Eval | Stage::Analyze => config.sampler.steps = n,
                Stage::GenCorpus | Stage::FitNormalizer => {
                    log::warn!("--steps has no effect on {stage}")
                }
            }
        }
    }
}

const CONFIG: &str = "config.toml";
const LOCK: &str = ".lock";
const ENCODER: &str = "encoder.ckpt";
const NORMALIZER: &str = "normalizer.ckpt";
const DECODER: &str = "decoder.ckpt";
const DIFFUSION: &str = "diffusion.ckpt";

/// Removes the lock file when dropped.
#[derive(Debug)]
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path.display().to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// A text split with optional sources (paraphrase corpora).
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub targets: Vec<String>,
    pub sources: Option<Vec<String>>,
}

/// Loaded corpus, tokenized.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub train_tokens: Vec<TokenSeq>,
    pub val_tokens: Vec<TokenSeq>,
    pub train_sources: Option<Vec<TokenSeq>>,
    pub val_sources: Option<Vec<TokenSeq>>,
    pub test_sources: Option<Vec<TokenSeq>>,
}

/// An open output directory plus the config in force.
#[derive(Debug)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    out: PathBuf,
    _lock: RunLock,
}

fn stage_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    step: usize,
    loss: f64,
    val_accuracy: f64,
}

#[derive(Serialize)]
struct TrainRow {
    step: usize,
    loss: f64,
    branch: &'static str,
}

#[derive(Serialize)]
struct MetricRow<'a> {
    metric: &'a str,
    value: f64,
    seed: u64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    metric: &'a str,
    mean: f64,
    std: f64,
}

/// Texts too short for n-grams leave a metric undefined; that is a result
/// of the run, not a failure of the stage.
fn undefined_as_nan(name: &str, value: Result<f64>) -> Result<f64> {
    match value {
        Err(Error::Empty(what)) => {
            log::warn!("{name} undefined: no {what}");
            Ok(f64::NAN)
        }
        other => other,
    }
}

fn trace_rows(trace: &[TraceRow]) -> Vec<(usize, f64, f64)> {
    trace.iter().map(|r| (r.step, r.t, r.magnitude)).collect()
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "t", "magnitude"])?;
    for row in trace_rows(trace) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

impl Pipeline {
    /// Opens (creating if needed) `out` for `stage`. The base config is
    /// `config_path` if given, else the directory's `config.toml`, else the
    /// defaults; `overrides` apply on top.
    pub fn open(out: &Path, config_path: Option<&Path>, overrides: &Overrides, stage: Stage) -> Result<Self> {
        fs::create_dir_all(out)?;
        let lock = RunLock::acquire(out)?;
        let existing = out.join(CONFIG);
        let mut config = match config_path {
            Some(p) => ExperimentConfig::load(p)?,
            None if existing.exists() => ExperimentConfig::load(&existing)?,
            None => ExperimentConfig::default(),
        };
        overrides.apply(&mut config, stage);
        config.validate()?;
        let p = Self {
            config,
            out: out.to_path_buf(),
            _lock: lock,
        };
        let text = p.config.to_toml()?;
        fs::write(out.join(CONFIG), &text)?;
        fs::create_dir_all(out.join("snapshots"))?;
        let header = format!(
            "# {} {}\n# stage {stage}\n# seed {}\n",
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION"),
            p.config.seed
        );
        fs::write(out.join("snapshots").join(format!("{stage}.toml")), header + &text)?;
        Ok(p)
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    fn log(&self, stage: Stage, msg: &str) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.out.join("run.log"))?;
        writeln!(f, "[{stage}] {msg}")?;
        log::info!("[{stage}] {msg}");
        Ok(())
    }

    fn need(&self, file: &str, producer: Stage) -> Result<PathBuf> {
        let path = self.out.join(file);
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingStage {
                stage: producer.name(),
                artifact: path.display().to_string(),
            })
        }
    }

    /// Runs one stage.
    pub fn run(&mut self, stage: Stage) -> Result<()> {
        let start = Instant::now();
        self.log(stage, "started")?;
        match stage {
            Stage::GenCorpus => self.gen_corpus(),
            Stage::PretrainEncoder => self.pretrain_encoder(),
            Stage::FitNormalizer => self.fit_normalizer(),
            Stage::TrainDecoder => self.train_decoder(),
            Stage::TrainDiffusion => self.train_diffusion(),
            Stage::Sample => self.sample(),
            Stage::Eval => self.eval(),
            Stage::Analyze => self.analyze(),
        }?;
        self.log(stage, &format!("finished in {:.1}s", start.elapsed().as_secs_f64()))
    }

    fn corpus_dir(&self) -> PathBuf {
        self.out.join("corpus")
    }

    fn gen_corpus(&self) -> Result<()> {
        let c = &self.config.corpus;
        let dir = self.corpus_dir();
        fs::create_dir_all(&dir)?;
        let vocab = Vocab::synthetic();
        let (train, val, test, dup) = match c.kind {
            CorpusKind::Stories => {
                let texts = generate_story_corpus(c.seed, c.size);
                let s = split_corpus(&texts, c.val, c.test)?;
                (s.train, s.val, s.test, duplicate_rate(&texts))
            }
            CorpusKind::Paraphrase => {
                let pairs = generate_paraphrase_pairs(c.seed, c.size, ParaphraseOptions { allow_identity: false });
                let joined: Vec<String> = pairs.iter().map(|(s, t)| format!("{s}\t{t}")).collect();
                let s = split_corpus(&joined, c.val, c.test)?;
                (s.train, s.val, s.test, duplicate_rate(&joined))
            }
        };
        for (name, lines) in [("train", &train), ("val", &val), ("test", &test)] {
            for line in lines.iter() {
                for text in line.split('\t') {
                    tokenize_all(&[text.to_string()], c.seq_len, &vocab)?;
                }
            }
            write_lines(&dir.join(format!("{name}.txt")), lines)?;
        }
        write_lines(&dir.join("vocab.txt"), vocab.tokens())?;
        write_csv(
            &dir.join("stats.csv"),
            &[
                MetricRow { metric: "generated", value: c.size as f64, seed: c.seed },
                MetricRow { metric: "train", value: train.len() as f64, seed: c.seed },
                MetricRow { metric: "duplicate_rate", value: dup, seed: c.seed },
            ],
        )?;
        self.log(
            Stage::GenCorpus,
            &format!("{} train / {} val / {} test, duplicate rate {dup:.4}", train.len(), val.len(), test.len()),
        )
    }

    /// Reads and tokenizes the corpus written by `gen-corpus`.
    pub fn load_corpus(&self) -> Result<Corpus> {
        let dir = self.corpus_dir();
        let read = |name: &str| -> Result<Split> {
            let file = format!("corpus/{name}.txt");
            let lines = read_lines(&self.need(&file, Stage::GenCorpus)?)?;
            Ok(match self.config.corpus.kind {
                CorpusKind::Stories => Split { targets: lines, sources: None },
                CorpusKind::Paraphrase => {
                    let mut sources = Vec::new();
                    let mut targets = Vec::new();
                    for l in lines {
                        let (s, t) = l
                            .split_once('\t')
                            .ok_or_else(|| Error::Corpus(format!("{}: line without a tab", dir.display())))?;
                        sources.push(s.to_string());
                        targets.push(t.to_string());
                    }
                    Split { targets, sources: Some(sources) }
                }
            })
        };
        let (train, val, test) = (read("train")?, read("val")?, read("test")?);
        let vocab = Vocab::synthetic();
        let m = self.config.corpus.seq_len;
        let tok = |s: &Option<Vec<String>>| s.as_ref().map(|v| tokenize_all(v, m, &vocab)).transpose();
        Ok(Corpus {
            train_tokens: tokenize_all(&train.targets, m, &vocab)?,
            val_tokens: tokenize_all(&val.targets, m, &vocab)?,
            train_sources: tok(&train.sources)?,
            val_sources: tok(&val.sources)?,
            test_sources: tok(&test.sources)?,
            vocab,
            train,
            val,
            test,
        })
    }

    fn pretrain_encoder(&self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let mut train = corpus.train_tokens.clone();
        train.extend(corpus.train_sources.iter().flatten().cloned());
        let cfg = &self.config.encoder;
        let contextual = crate::encoder::EncoderConfig {
            mode: EncoderMode::Contextual,
            ..cfg.model.clone()
        };
        let (model, report) = pretrain_encoder(
            &train,
            &corpus.val_tokens,
            contextual,
            corpus.vocab.len(),
            &cfg.pretrain,
            stage_seed(self.config.seed, 1),
        )?;
        let model = model.with_mode(cfg.model.mode);
        model.to_checkpoint().save(self.out.join(ENCODER))?;
        let rows: Vec<CurveRow> = report
            .history
            .iter()
            .map(|&(step, loss, val_accuracy)| CurveRow { step, loss, val_accuracy })
            .collect();
        write_csv(&self.out.join("encoder_curve.csv"), &rows)?;
        self.log(
            Stage::PretrainEncoder,
            &format!("{} steps, best val masked accuracy {:.4}", report.steps, report.best_val_accuracy),
        )
    }

    fn load_encoder(&self) -> Result<EncoderModel> {
        EncoderModel::from_checkpoint(&Checkpoint::load(self.need(ENCODER, Stage::PretrainEncoder)?)?)
    }

    fn fit_normalizer(&self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let mut space = LatentSpace::new(self.load_encoder()?);
        let norm = space.fit(&corpus.train_tokens)?.clone();
        norm.to_checkpoint()?.save(self.out.join(NORMALIZER))?;
        let mut w = csv::Writer::from_path(self.out.join("normalizer.csv"))?;
        w.write_record(["coord", "mean", "std"])?;
        for (i, (m, s)) in norm.mean.iter().zip(&norm.std).enumerate() {
            w.serialize((i, m, s))?;
        }
        w.flush()?;
        self.log(Stage::FitNormalizer, &format!("fitted on {} sequences", corpus.train_tokens.len()))
    }

    /// Encoder with its fitted normalizer.
    pub fn load_latent_space(&self) -> Result<LatentSpace> {
        let mut space = LatentSpace::new(self.load_encoder()?);
        let ck = Checkpoint::load(self.need(NORMALIZER, Stage::FitNormalizer)?)?;
        space.normalizer = Some(Normalizer::from_checkpoint(&ck)?);
        Ok(space)
    }

    fn train_decoder(&self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let space = self.load_latent_space()?;
        let norm = space.normalizer()?.clone();
        let cfg = self.config.decoder.clone();
        let (model, summary) = if cfg.variant == DecoderVariant::Rounding {
            if space.encoder.config.mode != EncoderMode::Embedding {
                return Err(Error::Config("the rounding decoder needs an embedding-mode encoder".into()));
            }
            let model = DecoderModel::rounding(space.encoder.embeddings().clone(), norm, space.seq_len())?;
            (model, "rounding decoder (no training)".to_string())
        } else {
            let ztr = space.encode(&corpus.train_tokens)?;
            let zva = space.encode(&corpus.val_tokens)?;
            let use_cond = cfg.variant == DecoderVariant::Transformer;
            let (model, report) = train_decoder(
                DecoderData {
                    latents: &ztr,
                    tokens: &corpus.train_tokens,
                    cond: corpus.train_sources.as_deref().filter(|_| use_cond),
                },
                DecoderData {
                    latents: &zva,
                    tokens: &corpus.val_tokens,
                    cond: corpus.val_sources.as_deref().filter(|_| use_cond),
                },
                corpus.vocab.len(),
                norm,
                &self.config.schedule()?,
                cfg,
                stage_seed(self.config.seed, 2),
            )?;
            let rows: Vec<CurveRow> = report
                .history
                .iter()
                .map(|&(step, loss, val_accuracy)| CurveRow { step, loss, val_accuracy })
                .collect();
            write_csv(&self.out.join("decoder_curve.csv"), &rows)?;
            let msg = format!("{} steps, best val accuracy {:.4}", report.steps, report.best_val_accuracy);
            (model, msg)
        };
        model.to_checkpoint()?.save(self.out.join(DECODER))?;
        self.log(Stage::TrainDecoder, &summary)
    }

    fn train_diffusion(&self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let space = self.load_latent_space()?;
        let schedule = self.config.schedule()?;
        let z = space.encode(&corpus.train_tokens)?;
        let cond = corpus.train_sources.as_deref().map(|s| (s, corpus.vocab.len()));
        let (model, opt, curve) = train_denoiser(
            &z,
            cond,
            &schedule,
            self.config.denoiser.clone(),
            stage_seed(self.config.seed, 3),
        )?;
        let mut ck = model.to_checkpoint(Some(&opt))?;
        ck.set_meta("schedule", schedule.to_string());
        ck.save(self.out.join(DIFFUSION))?;
        let rows: Vec<TrainRow> = curve
            .iter()
            .map(|c| TrainRow {
                step: c.step,
                loss: c.loss,
                branch: if c.self_cond { "self_cond" } else { "zero" },
            })
            .collect();
        write_csv(&self.out.join("training_curve.csv"), &rows)?;
        let tail = &curve[curve.len().saturating_sub(100)..];
        let mean = tail.iter().map(|c| c.loss).sum::<f64>() / tail.len().max(1) as f64;
        self.log(Stage::TrainDiffusion, &format!("{} steps, final mean loss {mean:.4}", curve.len()))
    }

    /// Trained denoiser and the schedule it was trained with.
    pub fn load_diffusion(&self) -> Result<(DenoiserModel, NoiseSchedule)> {
        let ck = Checkpoint::load(self.need(DIFFUSION, Stage::TrainDiffusion)?)?;
        let (model, _) = DenoiserModel::from_checkpoint(&ck)?;
        let schedule: NoiseSchedule = ck
            .meta("schedule")
            .ok_or_else(|| Error::Config("diffusion checkpoint lacks its schedule".into()))?
            .parse()?;
        if schedule.to_string() != self.config.schedule()?.to_string() {
            log::warn!("config schedule {} differs from training schedule {schedule}; using the latter", self.config.schedule);
        }
        Ok((model, schedule))
    }

    pub fn load_decoder(&self) -> Result<DecoderModel> {
        DecoderModel::from_checkpoint(&Checkpoint::load(self.need(DECODER, Stage::TrainDecoder)?)?)
    }

    /// Sources for `n` outputs, cycling through the test split.
    fn sources(corpus: &Corpus, n: usize) -> Option<Vec<TokenSeq>> {
        corpus
            .test_sources
            .as_ref()
            .map(|src| (0..n).map(|i| src[i % src.len()].clone()).collect())
    }

    fn generate_texts(&self, corpus: &Corpus, sampler: &SamplerConfig) -> Result<(Vec<String>, Vec<TraceRow>)> {
        let (model, schedule) = self.load_diffusion()?;
        let decoder = self.load_decoder()?;
        let n = self.config.eval.samples;
        let cond = Self::sources(corpus, n);
        let dec_cond = cond.as_deref().filter(|_| decoder.is_conditional());
        if decoder.is_conditional() != model.is_conditional() {
            return Err(Error::Config("decoder and diffusion disagree on conditioning".into()));
        }
        let g = generate(
            &model,
            &decoder,
            &corpus.vocab,
            n,
            model.seq_len(),
            sampler,
            &schedule,
            dec_cond.or(cond.as_deref()),
        )?;
        Ok((g.texts, g.trace))
    }

    fn sample(&self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let (texts, trace) = self.generate_texts(&corpus, &self.config.sampler)?;
        write_lines(&self.out.join("samples.txt"), &texts)?;
        write_trace(&self.out.join("trace.csv"), &trace)?;
        self.log(Stage::Sample, &format!("{} samples with T = {}", texts.len(), self.config.sampler.steps))
    }

    /// Stories: share of grammar-valid texts. Paraphrase: share of outputs
    /// equal to the reference paraphrase of their source.
    fn quality(&self, corpus: &Corpus, texts: &[String]) -> f64 {
        let hits = match &corpus.test.sources {
            Some(src) if self.config.corpus.kind == CorpusKind::Paraphrase => texts
                .iter()
                .enumerate()
                .filter(|(i, t)| **t == paraphrase(&src[i % src.len()]))
                .count(),
            _ => texts.iter().filter(|t| is_valid_story(t)).count(),
        };
        hits as f64 / texts.len().max(1) as f64
    }

    fn quality_name(&self) -> &'static str {
        match self.config.corpus.kind {
            CorpusKind::Stories => "grammar_valid_rate",
            CorpusKind::Paraphrase => "exact_match",
        }
    }

    fn eval(&self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let index = FourGramIndex::new(&corpus.train.targets);
        let mut rows = Vec::new();
        let mut per_metric: [(&str, Vec<f64>); 3] = [("div", vec![]), ("mem", vec![]), (self.quality_name(), vec![])];
        for r in 0..self.config.eval.repeats {
            let sampler = SamplerConfig {
                seed: self.config.sampler.seed.wrapping_add(r as u64),
                ..self.config.sampler.clone()
            };
            let (texts, _) = self.generate_texts(&corpus, &sampler)?;
            let values = [
                undefined_as_nan("div", diversity(&texts))?,
                undefined_as_nan("mem", memorization(&texts, &index))?,
                self.quality(&corpus, &texts),
            ];
            for ((name, acc), v) in per_metric.iter_mut().zip(values) {
                rows.push(MetricRow { metric: name, value: v, seed: sampler.seed });
                acc.push(v);
            }
        }
        write_csv(&self.out.join("metrics.csv"), &rows)?;
        let c = &self.config.corpus;
        let dup = match c.kind {
            CorpusKind::Stories => duplicate_rate(&generate_story_corpus(c.seed, c.size)),
            CorpusKind::Paraphrase => {
                let pairs = generate_paraphrase_pairs(c.seed, c.size, ParaphraseOptions { allow_identity: false });
                duplicate_rate(&pairs.iter().map(|(s, t)| format!("{s}\t{t}")).collect::<Vec<_>>())
            }
        };
        let n = self.config.eval.samples.min(corpus.train.targets.len());
        let reference_div = diversity(&corpus.train.targets[..n])?;
        let mut summary: Vec<SummaryRow> = per_metric
            .iter()
            .map(|(name, v)| {
                let ms = MeanStd::of(v);
                SummaryRow { metric: name, mean: ms.mean, std: ms.std }
            })
            .collect();
        summary.push(SummaryRow { metric: "corpus_duplicate_rate", mean: dup, std: 0.0 });
        summary.push(SummaryRow { metric: "train_reference_div", mean: reference_div, std: 0.0 });
        write_csv(&self.out.join("metrics_summary.csv"), &summary)?;
        let text: Vec<String> = per_metric
            .iter()
            .map(|(name, v)| format!("{name} {}", MeanStd::of(v)))
            .collect();
        self.log(Stage::Eval, &text.join(", "))
    }

    fn analyze(&self) -> Result<()> {
        let dir = self.out.join("analysis");
        fs::create_dir_all(&dir)?;
        let a = &self.config.analyze;
        let mut sched_rows = Vec::new();
        let mut schedules = vec![NoiseSchedule::cosine(), NoiseSchedule::sqrt()];
        schedules.extend(a.schedule_d.iter().map(|&d| NoiseSchedule::tan(d)));
        for s in &schedules {
            for r in s.report(&uniform_grid(a.schedule_points))? {
                sched_rows.push((s.to_string(), r.t, r.sqrt_alpha, r.noise_var));
            }
        }
        let mut w = csv::Writer::from_path(dir.join("schedule.csv"))?;
        w.write_record(["schedule", "t", "sqrt_alpha", "noise_var"])?;
        for r in sched_rows {
            w.serialize(r)?;
        }
        w.flush()?;

        let corpus = self.load_corpus()?;
        let space = self.load_latent_space()?;
        let (model, schedule) = self.load_diffusion()?;
        let decoder = self.load_decoder()?;
        let (seq, dim) = (model.seq_len(), model.dim());
        let n = a.samples;
        let cond = Self::sources(&corpus, n);

        let mut mags = csv::Writer::from_path(dir.join("magnitude.csv"))?;
        mags.write_record(["steps", "self_cond", "final_magnitude"])?;
        for &steps in &a.trace_steps {
            for sc in [true, false] {
                let cfg = SamplerConfig {
                    steps,
                    self_condition: sc,
                    mbr_k: 0,
                    seed: self.config.sampler.seed,
                };
                let traj = sample_latents(&model, n, seq, dim, &cfg, &schedule, cond.as_deref())?;
                let last = traj.trace.last().map_or(f64::NAN, |r| r.magnitude);
                mags.serialize((steps, sc, last))?;
                let tag = if sc { "on" } else { "off" };
                write_trace(&dir.join(format!("trace_{steps}_{tag}.csv")), &traj.trace)?;
            }
        }
        mags.flush()?;

        let take: Vec<usize> = (0..n.min(corpus.train_tokens.len())).collect();
        let train_tokens: Vec<TokenSeq> = take.iter().map(|&i| corpus.train_tokens[i].clone()).collect();
        let z_train = space.encode(&train_tokens)?;
        let train_cond: Option<Vec<TokenSeq>> = corpus
            .train_sources
            .as_ref()
            .map(|s| take.iter().map(|&i| s[i].clone()).collect());
        let pred = model.denoise(&z_train, &vec![0.0; take.len()], None, train_cond.as_deref())?;
        write_csv(
            &dir.join("reference.csv"),
            &[
                SummaryRow { metric: "train_latent_magnitude", mean: magnitude(&z_train), std: 0.0 },
                SummaryRow { metric: "train_prediction_magnitude", mean: magnitude(&pred), std: 0.0 },
            ],
        )?;

        let val_n = corpus.val_tokens.len().min(n);
        let val_idx: Vec<usize> = (0..val_n).collect();
        let z_val_all = space.encode(&corpus.val_tokens)?;
        let z_val = select(&z_val_all, &val_idx);
        let val_cond: Option<Vec<TokenSeq>> =
            corpus.val_sources.as_ref().map(|s| s[..val_n].to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(self.config.seed, 4));
        let eps = Tensor::randn(z_val.shape(), 1.0, &mut rng);
        let z_t = schedule.forward_sample(&z_val, a.probe_t, &eps)?;
        let probe = repeated_sc_probe(&model, &z_t, a.probe_t, a.probe_iterates, val_cond.as_deref())?;
        let mut w = csv::Writer::from_path(dir.join("probe.csv"))?;
        w.write_record(["iterate", "magnitude"])?;
        for (i, m) in probe.iter().enumerate() {
            w.serialize((i, m))?;
        }
        w.flush()?;

        let full_cond = corpus.val_sources.as_deref();
        let rows = timestep_difficulty(
            &model,
            &decoder,
            &z_val_all,
            &corpus.val_tokens,
            &a.difficulty_grid,
            &schedule,
            stage_seed(self.config.seed, 5),
            full_cond.filter(|_| model.is_conditional()),
        )?;
        let mut w = csv::Writer::from_path(dir.join("difficulty.csv"))?;
        w.write_record(["t", "mse", "accuracy"])?;
        for r in &rows {
            w.serialize((r.t, r.mse, r.accuracy))?;
        }
        w.flush()?;
        self.log(Stage::Analyze, &format!("wrote {}", dir.display()))
    }
}

/// Opens `out` and runs `stage` with the given config and overrides.
pub fn run_stage(stage: Stage, out: &Path, config: Option<&Path>, overrides: &Overrides) -> Result<()> {
    Pipeline::open(out, config, overrides, stage)?.run(stage)
}

/// Reads a whole file, for comparing artifacts.
pub fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::io::Read::read_to_end(&mut File::open(path)?, &mut buf)?;
    Ok(buf)
}
