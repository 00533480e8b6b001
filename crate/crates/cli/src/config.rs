//! Experiment configuration: one JSON document with a `version` field.

use std::path::Path;

use roomdiff::codec::CodecConfig;
use roomdiff::corpus::{CaptionStyle, SceneDomain};
use roomdiff::curriculum::{CurriculumSchedule, ScheduleFamily, TrainConfig};
use roomdiff::diffusion::DiffusionConfig;
use roomdiff::dual_encoder::{DualEncoderConfig, StageConfig};
use roomdiff::metrics::ClassifierConfig;
use roomdiff::optim::OptimConfig;
use roomdiff::rlcf::RlcfConfig;
use roomdiff::text::TextEncoderConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSection {
    /// Design-domain scenes (training, RLCF prompts and evaluation).
    pub n: usize,
    /// General-domain scenes for the first encoder stage.
    pub general_n: usize,
    pub high_res: usize,
    pub low_res: usize,
    pub captions: CaptionStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSection {
    pub model: DiffusionConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSection {
    pub family: ScheduleFamily,
    pub epochs: usize,
    /// Epochs over which the low-resolution weight decays to 0.
    pub span: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSection {
    pub classifier: ClassifierConfig,
    pub n_samples: usize,
    pub splits: usize,
    pub sample_steps: usize,
    pub guidance_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub corpus: CorpusSection,
    pub codec: CodecConfig,
    pub encoder: DualEncoderConfig,
    pub diffusion: DiffusionSection,
    pub curriculum: CurriculumSection,
    pub rlcf: RlcfConfig,
    pub metrics: MetricsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let epochs = 40;
        Self {
            version: CONFIG_VERSION,
            seed: 42,
            corpus: CorpusSection {
                n: 400,
                general_n: 400,
                high_res: 32,
                low_res: 16,
                captions: CaptionStyle::Template,
            },
            codec: CodecConfig::default(),
            encoder: DualEncoderConfig::default(),
            diffusion: DiffusionSection {
                model: DiffusionConfig {
                    widths: [16, 32, 64],
                    ..DiffusionConfig::default()
                },
                train: TrainConfig {
                    batch_size: 16,
                    optim: OptimConfig {
                        warmup_steps: 50,
                        ..OptimConfig::adam(2e-3)
                    },
                    train_text: true,
                },
            },
            curriculum: CurriculumSection {
                family: ScheduleFamily::Step,
                epochs,
                span: epochs / 2,
            },
            rlcf: RlcfConfig {
                resolution: 32,
                ..RlcfConfig::default()
            },
            metrics: MetricsSection {
                classifier: ClassifierConfig::default(),
                n_samples: 40,
                splits: 1,
                sample_steps: 25,
                guidance_scale: 1.0,
            },
        }
    }
}

impl ExperimentConfig {
    /// Seconds-scale profile for smoke runs and tests: 32px scenes, narrow
    /// networks, one or two epochs per phase, no classifier accuracy gate.
    pub fn smoke() -> Self {
        let text = TextEncoderConfig {
            dim: 16,
            layers: 1,
            max_len: 80,
        };
        let stage = StageConfig {
            epochs: 1,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 0,
        };
        let base = Self::default();
        Self {
            corpus: CorpusSection {
                n: 48,
                general_n: 32,
                high_res: 32,
                low_res: 16,
                ..base.corpus
            },
            encoder: DualEncoderConfig {
                embed_dim: 16,
                image_res: 16,
                image_widths: [4, 8, 8],
                text: text.clone(),
                stage1: stage.clone(),
                stage2: stage,
                ..base.encoder
            },
            diffusion: DiffusionSection {
                model: DiffusionConfig {
                    timesteps: 50,
                    widths: [4, 8, 8],
                    text,
                    ..base.diffusion.model
                },
                train: TrainConfig {
                    batch_size: 8,
                    ..base.diffusion.train
                },
            },
            curriculum: CurriculumSection {
                family: ScheduleFamily::Step,
                epochs: 2,
                span: 1,
            },
            rlcf: RlcfConfig {
                k: 2,
                batch_size: 2,
                max_stages: 2,
                topk: 1,
                finetune_steps: 2,
                finetune_batch: 2,
                window: 2,
                sample_steps: 3,
                resolution: 32,
                ..base.rlcf
            },
            metrics: MetricsSection {
                classifier: ClassifierConfig {
                    resolution: 16,
                    widths: [4, 8, 8],
                    feature_dim: 8,
                    epochs: 1,
                    batch_size: 16,
                    target_accuracy: 0.0,
                    ..base.metrics.classifier
                },
                n_samples: 6,
                splits: 1,
                sample_steps: 3,
                guidance_scale: 1.0,
            },
            ..base
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io("config", e))
    }

    /// SHA-256 of the canonical (compact) JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.schedule()?;
        self.rlcf.validate().map_err(|e| CliError::core("config", e))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<CurriculumSchedule, CliError> {
        let c = &self.curriculum;
        CurriculumSchedule::new(c.family, c.epochs, c.span, self.corpus.low_res, self.corpus.high_res)
            .map_err(|e| CliError::core("config", e))
    }

    pub fn corpus_config(&self) -> roomdiff::corpus::CorpusConfig {
        roomdiff::corpus::CorpusConfig {
            n: self.corpus.n,
            seed: self.phase_seed("corpus"),
            high_res: self.corpus.high_res,
            low_res: self.corpus.low_res,
            domain: SceneDomain::Design,
            captions: self.corpus.captions,
        }
    }

    pub fn general_corpus_config(&self) -> roomdiff::corpus::CorpusConfig {
        roomdiff::corpus::CorpusConfig {
            n: self.corpus.general_n,
            seed: self.phase_seed("corpus.general"),
            domain: SceneDomain::General,
            ..self.corpus_config()
        }
    }

    /// Seed of a named phase, derived from the global seed.
    pub fn phase_seed(&self, phase: &str) -> u64 {
        roomdiff::seed::derive(self.seed, phase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use roomdiff::rlcf::SelectionMode;

    #[test]
    fn default_is_valid_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), ExperimentConfig::from_json(&cfg.to_json()).unwrap().hash());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn rejects_unknown_version() {
        let mut cfg = ExperimentConfig::default();
        cfg.version = 99;
        let err = ExperimentConfig::from_json(&cfg.to_json()).unwrap_err();
        assert_eq!(err.code, "ConfigError");
    }

    prop_compose! {
        fn any_config()(
            seed in any::<u64>(),
            n in 10usize..5000,
            general_n in 10usize..5000,
            hi in 0usize..3,
            style in 0usize..3,
            family in 0usize..4,
            epochs in 1usize..200,
            span_frac in 0.0f64..1.0,
            lr in 1e-6f64..1e-1,
            beta_start in 1e-5f64..1e-3,
            beta_end in 1e-2f64..0.2,
            timesteps in 2usize..2000,
            dropout in 0.0f64..0.5,
            k in 2usize..16,
            tol in 1e-4f64..1.0,
            topk_mode in any::<bool>(),
            splits in 1usize..5,
        ) -> ExperimentConfig {
            let mut cfg = ExperimentConfig::default();
            cfg.seed = seed;
            cfg.corpus.n = n;
            cfg.corpus.general_n = general_n;
            cfg.corpus.high_res = [32, 64, 128][hi];
            cfg.corpus.low_res = cfg.corpus.high_res / 2;
            cfg.corpus.captions = [CaptionStyle::Template, CaptionStyle::External, CaptionStyle::RawTags][style];
            cfg.curriculum.family = [ScheduleFamily::Step, ScheduleFamily::Linear, ScheduleFamily::Cosine, ScheduleFamily::HighResOnly][family];
            cfg.curriculum.epochs = epochs;
            cfg.curriculum.span = ((epochs as f64 * span_frac) as usize).max(1).min(epochs);
            cfg.diffusion.train.optim.lr = lr;
            cfg.diffusion.model.beta_start = beta_start;
            cfg.diffusion.model.beta_end = beta_end;
            cfg.diffusion.model.timesteps = timesteps;
            cfg.diffusion.model.cond_dropout = dropout;
            cfg.encoder.logit_scale_init = 1.0 / (0.01 + span_frac);
            cfg.rlcf.k = k;
            cfg.rlcf.relative_tolerance = tol;
            cfg.rlcf.selection_mode = if topk_mode { SelectionMode::TopkPlusOriginal } else { SelectionMode::BestOfK };
            cfg.rlcf.topk = 1;
            cfg.metrics.splits = splits;
            cfg
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn round_trip(cfg in any_config()) {
            prop_assume!(cfg.validate().is_ok());
            let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.hash(), cfg.hash());
        }
    }
}
