//! Experiment configuration: one TOML file describing a whole run.
//!
//! Every field has a default, so a config file only needs the values it
//! changes:
//!
//! ```toml
//! seed = 3
//! schedule = "tan-9"
//!
//! [corpus]
//! size = 5000
//!
//! [denoiser]
//! layers = 4
//!
//! [denoiser.train]
//! steps = 20000
//!
//! [decoder.corruption]
//! mode = "zt"
//! t_max = 0.15
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::denoiser::DenoiserConfig;
use crate::encoder::{EncoderConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// Unconditional mini-stories.
    Stories,
    /// Sentence pairs; the diffusion generates the paraphrase of a source.
    Paraphrase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    pub size: usize,
    pub seed: u64,
    pub seq_len: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            kind: CorpusKind::Stories,
            size: 5000,
            seed: 1,
            seq_len: 32,
            val: 200,
            test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct EncoderSection {
    #[serde(flatten)]
    pub model: EncoderConfig,
    pub pretrain: PretrainConfig,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Texts generated per repeat.
    pub samples: usize,
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            repeats: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    /// Chains per magnitude trace.
    pub samples: usize,
    /// Step counts for the final-magnitude sweep.
    pub trace_steps: Vec<usize>,
    pub probe_t: f64,
    pub probe_iterates: usize,
    /// Timesteps of the reconstruction-difficulty sweep.
    pub difficulty_grid: Vec<f64>,
    /// Noise-rate values of the tan family included in the schedule report.
    pub schedule_d: Vec<f64>,
    pub schedule_points: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            trace_steps: vec![10, 50, 200],
            probe_t: 0.5,
            probe_iterates: 8,
            difficulty_grid: (0..=20).map(|i| f64::from(i) * 0.05).collect(),
            schedule_d: vec![1.0, 3.0, 7.0, 9.0],
            schedule_points: 101,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for model initialization, training and sampling.
    pub seed: u64,
    /// `cosine`, `sqrt` or `tan-<d>`.
    pub schedule: String,
    pub corpus: CorpusConfig,
    pub encoder: EncoderSection,
    pub denoiser: DenoiserConfig,
    pub decoder: DecoderConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: "tan-9".into(),
            corpus: CorpusConfig::default(),
            encoder: EncoderSection::default(),
            denoiser: DenoiserConfig::default(),
            decoder: DecoderConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        let c = &self.corpus;
        if c.seq_len < 3 {
            return Err(Error::Config(format!("seq_len {} leaves no room for content", c.seq_len)));
        }
        if c.val == 0 || c.test == 0 || c.size <= c.val + c.test {
            return Err(Error::Config(format!(
                "corpus of {} cannot hold {} validation and {} test items",
                c.size, c.val, c.test
            )));
        }
        let e = &self.encoder.model;
        if e.dim == 0 || e.heads == 0 || !e.dim.is_multiple_of(e.heads) || !e.dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "latent width {} must be even and divisible by {} heads",
                e.dim, e.heads
            )));
        }
        if self.decoder.heads == 0 || !e.dim.is_multiple_of(self.decoder.heads) || !e.dim.is_multiple_of(self.denoiser.heads.max(1)) {
            return Err(Error::Config("decoder and denoiser heads must divide the latent width".into()));
        }
        self.decoder.corruption.validate()?;
        self.denoiser.train.validate()?;
        self.decoder.train.validate()?;
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if self.eval.samples == 0 || self.eval.repeats == 0 {
            return Err(Error::Config("eval needs at least one sample and one repeat".into()));
        }
        if self.analyze.probe_iterates < 2 || !(0.0..=1.0).contains(&self.analyze.probe_t) {
            return Err(Error::Config("probe needs t in [0, 1] and at least two iterates".into()));
        }
        if self.analyze.difficulty_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("difficulty grid must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
