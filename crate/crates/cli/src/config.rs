//! Run configuration: defaults, an optional TOML file, then flag overrides.

use std::path::Path;

use mvq_core::conditioner::{CompressorKind, ConditionerConfig};
use mvq_core::eval::EvaluatorConfig;
use mvq_core::pipeline::{CfgParams, DecodeSchedule, GenerateOptions, Sampling};
use mvq_core::rvq::RvqConfig;
use mvq_core::transformer::TransformerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SEED_ENV: &str = "MVQ_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: usize,
    pub test: usize,
    /// Seed for every stage of a run.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: 8192,
            test: 1024,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvqSection {
    pub layers: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub downsample_ratio: usize,
    pub beta: f64,
    pub ema_decay: f64,
    pub dead_after: u32,
    pub commit_from: usize,
    pub steps: usize,
    pub batch: usize,
    pub window: usize,
    pub lr: f64,
    pub warmup: u64,
}

impl Default for RvqSection {
    fn default() -> Self {
        let c = RvqConfig::default();
        Self {
            layers: c.layers,
            codebook_size: c.codebook_size,
            latent_dim: c.latent_dim,
            width: c.width,
            downsample_ratio: c.downsample_ratio,
            beta: c.beta,
            ema_decay: c.ema_decay,
            dead_after: c.dead_after,
            commit_from: c.commit_from,
            steps: 1500,
            batch: 32,
            window: 32,
            lr: 1e-3,
            warmup: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionerSection {
    pub kind: String,
    pub memory_tokens: usize,
    pub memory_dim: usize,
    pub cond_dim: usize,
    pub drop_rate: f64,
}

impl Default for ConditionerSection {
    fn default() -> Self {
        Self {
            kind: CompressorKind::MemRetr.to_string(),
            memory_tokens: 64,
            memory_dim: 64,
            cond_dim: 64,
            drop_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerSection {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub grad_clip: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
}

impl TransformerSection {
    fn masked() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            max_positions: 64,
            grad_clip: 1.0,
            steps: 3000,
            batch: 16,
            lr: 1e-3,
            warmup: 200,
        }
    }

    fn residual() -> Self {
        Self {
            steps: 2000,
            ..Self::masked()
        }
    }
}

impl Default for TransformerSection {
    fn default() -> Self {
        Self::masked()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub iterations: usize,
    pub cfg_masked: f64,
    pub cfg_residual: f64,
    pub temperature: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let cfg = CfgParams::default();
        Self {
            iterations: DecodeSchedule::default().iterations,
            cfg_masked: cfg.masked,
            cfg_residual: cfg.residual,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub embed_dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub samples: usize,
    pub r_pool: usize,
    pub diversity_pairs: usize,
    pub mm_conditions: usize,
    pub mm_repeats: usize,
    pub repeats: usize,
    pub bench_samples: usize,
    pub bench_warmup: usize,
    pub bench_length: usize,
    pub recognizer_steps: usize,
    pub text_steps: usize,
    pub ablation_masked_steps: usize,
    pub ablation_residual_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvaluatorConfig::default();
        Self {
            embed_dim: e.embed_dim,
            hidden: e.hidden,
            temperature: e.temperature,
            steps: 1500,
            batch: 32,
            lr: 1e-3,
            warmup: 100,
            samples: 256,
            r_pool: 32,
            diversity_pairs: 300,
            mm_conditions: 32,
            mm_repeats: 10,
            repeats: 5,
            bench_samples: 256,
            bench_warmup: 8,
            bench_length: 30,
            recognizer_steps: 1500,
            text_steps: 1500,
            ablation_masked_steps: 1000,
            ablation_residual_steps: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub rvq: RvqSection,
    pub conditioner: ConditionerSection,
    pub masked: TransformerSection,
    pub residual: TransformerSection,
    pub pipeline: PipelineSection,
    pub eval: EvalSection,
}

impl Config {
    pub fn defaults() -> Self {
        Self {
            residual: TransformerSection::residual(),
            ..Self::default()
        }
    }

    /// Parses a TOML document layered over the defaults. Unknown sections
    /// or keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let mut base = toml::Table::try_from(Self::defaults()).expect("defaults serialize");
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for (section, value) in overlay {
            let Some(slot) = base.get_mut(&section) else {
                return Err(CliError::Config(format!("unknown section `{section}`")));
            };
            let (Some(slot), toml::Value::Table(entries)) = (slot.as_table_mut(), value) else {
                return Err(CliError::Config(format!("`{section}` must be a table")));
            };
            for (key, v) in entries {
                if !slot.contains_key(&key) {
                    return Err(CliError::Config(format!("unknown key `{section}.{key}`")));
                }
                slot.insert(key, v);
            }
        }
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file, then `MVQ_SEED` if the file left the seed
    /// unset, then an explicit seed flag.
    pub fn resolve(path: Option<&Path>, seed_flag: Option<u64>) -> Result<Self, CliError> {
        let (mut cfg, file_sets_seed) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(p.display().to_string(), e))?;
                let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
                let sets = table
                    .get("data")
                    .and_then(toml::Value::as_table)
                    .is_some_and(|t| t.contains_key("seed"));
                (Self::from_toml(&text)?, sets)
            }
            None => (Self::defaults(), false),
        };
        if !file_sets_seed {
            if let Ok(raw) = std::env::var(SEED_ENV) {
                cfg.data.seed = raw
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
            }
        }
        if let Some(seed) = seed_flag {
            cfg.data.seed = seed;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.compressor()?;
        self.rvq_config().validate()?;
        self.transformer_config(&self.masked).validate()?;
        self.transformer_config(&self.residual).validate()?;
        self.generate_options(false).cfg.validate()?;
        if self.pipeline.iterations == 0 {
            return Err(CliError::Config("pipeline.iterations must be positive".into()));
        }
        if self.pipeline.temperature <= 0.0 {
            return Err(CliError::Config("pipeline.temperature must be positive".into()));
        }
        Ok(())
    }

    /// Canonical rendering echoed into artifacts; the digest covers exactly
    /// these bytes.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        digest_text(&self.canonical())
    }

    pub fn compressor(&self) -> Result<CompressorKind, CliError> {
        Ok(self.conditioner.kind.parse()?)
    }

    pub fn rvq_config(&self) -> RvqConfig {
        let r = &self.rvq;
        RvqConfig {
            layers: r.layers,
            codebook_size: r.codebook_size,
            latent_dim: r.latent_dim,
            width: r.width,
            downsample_ratio: r.downsample_ratio,
            beta: r.beta,
            ema_decay: r.ema_decay,
            dead_after: r.dead_after,
            commit_from: r.commit_from,
        }
    }

    pub fn conditioner_config(&self) -> Result<ConditionerConfig, CliError> {
        let c = &self.conditioner;
        Ok(ConditionerConfig {
            kind: self.compressor()?,
            memory_tokens: c.memory_tokens,
            memory_dim: c.memory_dim,
            cond_dim: c.cond_dim,
            drop_rate: c.drop_rate,
        })
    }

    pub fn transformer_config(&self, s: &TransformerSection) -> TransformerConfig {
        TransformerConfig {
            layers: s.layers,
            heads: s.heads,
            model_dim: s.model_dim,
            ffn_dim: s.ffn_dim,
            max_positions: s.max_positions,
            drop_rate: self.conditioner.drop_rate,
            grad_clip: s.grad_clip,
        }
    }

    pub fn evaluator_config(&self) -> EvaluatorConfig {
        EvaluatorConfig {
            embed_dim: self.eval.embed_dim,
            hidden: self.eval.hidden,
            temperature: self.eval.temperature,
        }
    }

    pub fn generate_options(&self, greedy: bool) -> GenerateOptions {
        let p = &self.pipeline;
        GenerateOptions {
            schedule: DecodeSchedule {
                iterations: p.iterations,
            },
            cfg: CfgParams {
                masked: p.cfg_masked,
                residual: p.cfg_residual,
            },
            sampling: if greedy {
                Sampling::Greedy
            } else {
                Sampling::Categorical {
                    temperature: p.temperature,
                }
            },
        }
    }
}

pub fn digest_text(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = Config::defaults();
        cfg.data.seed = 11;
        cfg.conditioner.kind = "avgpool32".into();
        let back = Config::from_toml(&cfg.canonical()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("[rvq]\nlayer = 3\n").is_err());
        assert!(Config::from_toml("[training]\nsteps = 3\n").is_err());
        let partial = Config::from_toml("[masked]\nsteps = 7\n").unwrap();
        assert_eq!(partial.masked.steps, 7);
        assert_eq!(partial.residual, Config::defaults().residual);
    }

    #[test]
    fn bad_kind_is_a_config_error() {
        assert!(Config::from_toml("[conditioner]\nkind = \"lstm\"\n").is_err());
    }
}
