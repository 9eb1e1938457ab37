//! Sectioned run configuration (TOML) and the per-run manifest.
//!
//! `[sampler]`, `[shaping]` and `[tdw]` live at the top level and are copied
//! into the trainer when the config is resolved, so there is exactly one
//! place to set each value.

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::nn::MlpArch;
use crate::shaping::ShapingConfig;
use crate::tdw::TdwConfig;
use crate::trainer::{PretrainConfig, SftConfig, TrainConfig, METRICS_HEADER};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![128, 128] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub conditions: usize,
    /// Seed of the held-out condition set, independent of the run seed.
    pub holdout_seed: u64,
    pub fft_trajectories: usize,
    pub fft_cutoff: f64,
    /// Analyze stochastic rather than deterministic trajectories.
    pub fft_stochastic: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conditions: 64,
            holdout_seed: 7,
            fft_trajectories: 32,
            fft_cutoff: 0.5,
            fft_stochastic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output directory; `MOGRPO_OUT` and `--out` take precedence.
    pub out: Option<PathBuf>,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub shaping: ShapingConfig,
    pub tdw: TdwConfig,
    pub pretrain: PretrainConfig,
    pub trainer: TrainConfig,
    pub sft: SftConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let trainer = TrainConfig::default();
        Self {
            out: None,
            env: EnvConfig::default(),
            model: ModelConfig::default(),
            sampler: trainer.sampler,
            shaping: trainer.shaping,
            tdw: trainer.tdw,
            pretrain: PretrainConfig::default(),
            trainer,
            sft: SftConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

const SHARED_SECTIONS: [&str; 3] = ["sampler", "shaping", "tdw"];

impl RunConfig {
    /// Parse TOML text. `origin` names the source in diagnostics.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| diagnostic(text, origin, &e))?;
        if let Some(toml::Value::Table(t)) = raw.get("trainer") {
            if let Some(k) = SHARED_SECTIONS.iter().find(|k| t.contains_key(**k)) {
                return Err(Error::Config(format!(
                    "{origin}: `trainer.{k}` is not accepted; set `[{k}]` at the top level"
                )));
            }
        }
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| diagnostic(text, origin, &e))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// `default` selects the built-in configuration, anything else is a path.
    pub fn load(spec: &str) -> Result<Self> {
        if spec == "default" {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(spec).map_err(|e| Error::Config(format!("{spec}: {e}")))?;
        Self::from_toml_str(&text, spec)
    }

    fn sync(&mut self) {
        self.trainer.sampler = self.sampler;
        self.trainer.shaping = self.shaping;
        self.trainer.tdw = self.tdw;
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.pretrain.validate()?;
        self.trainer.validate()?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden needs at least one non-zero layer width".into()));
        }
        if self.eval.conditions == 0 || self.eval.fft_trajectories == 0 {
            return Err(Error::Config("eval counts must be positive".into()));
        }
        if !(self.eval.fft_cutoff > 0.0 && self.eval.fft_cutoff <= 1.0) {
            return Err(Error::Config(format!("eval.fft_cutoff must lie in (0, 1], got {}", self.eval.fft_cutoff)));
        }
        Ok(())
    }

    /// Seed every stochastic stage from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.trainer.seed = seed;
        self.sft.fit.seed = seed;
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.shaping.alpha = alpha;
        self.sync();
    }

    pub fn arch(&self) -> MlpArch {
        MlpArch::new(self.env.pixels(), self.env.cond_dim(), self.model.hidden.clone())
    }

    /// `--out`, then `MOGRPO_OUT`, then `out` in the file, then `runs`.
    pub fn resolve_out(&self, flag: Option<&Path>, env_var: Option<&str>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| env_var.filter(|s| !s.is_empty()).map(PathBuf::from))
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// The shared sections appear once, at the top level.
    pub fn to_toml(&self) -> Result<String> {
        let err = |e: &dyn std::fmt::Display| Error::Config(format!("serializing config: {e}"));
        let mut table = toml::Table::try_from(self).map_err(|e| err(&e))?;
        if let Some(toml::Value::Table(t)) = table.get_mut("trainer") {
            for k in SHARED_SECTIONS {
                t.remove(k);
            }
        }
        toml::to_string_pretty(&table).map_err(|e| err(&e))
    }
}

fn diagnostic(text: &str, origin: &str, e: &toml::de::Error) -> Error {
    let msg = e.message().trim();
    match e.span() {
        Some(span) => {
            let (line, col) = line_col(text, span.start);
            let src = text.lines().nth(line - 1).unwrap_or("");
            Error::Config(format!("{origin}:{line}:{col}: {msg}\n  | {src}"))
        }
        None => Error::Config(format!("{origin}: {msg}")),
    }
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, col)
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub file: String,
    pub version: u32,
    pub header: String,
}

/// Headers of every CSV the tool can emit.
pub fn csv_schemas() -> Vec<CsvSchema> {
    let s = |file: &str, header: &str| CsvSchema {
        file: file.into(),
        version: SCHEMA_VERSION,
        header: header.into(),
    };
    vec![
        s("metrics.csv", METRICS_HEADER),
        s("sars_cross_section.csv", "a_id,a_final_naive,a_final_sars"),
        s("conflict.csv", "class,fraction"),
        s("tdw.csv", "step,w_prompt,w_id"),
        s("fft_bands.csv", "step,tau,dc,low,high,low_frac,high_frac"),
        s("eval_points.csv", "r_id,r_prompt"),
        s("pretrain_loss.csv", "step,loss"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seeds: Seeds,
    pub config: RunConfig,
    pub csv_schemas: Vec<CsvSchema>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub pretrain: u64,
    pub trainer: u64,
    pub sft: u64,
    pub holdout: u64,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, outputs: Vec<String>) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seeds: Seeds {
                pretrain: config.pretrain.seed,
                trainer: config.trainer.seed,
                sft: config.sft.fit.seed,
                holdout: config.eval.holdout_seed,
            },
            config: config.clone(),
            csv_schemas: csv_schemas(),
            outputs,
        }
    }
}

/// Write `config.toml` and `manifest.json` into `dir`.
pub fn write_run_files(dir: &Path, command: &str, config: &RunConfig, outputs: Vec<String>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    let manifest = Manifest::new(command, config, outputs);
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
