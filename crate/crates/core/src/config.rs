//! Run configuration file (TOML). Unknown keys are rejected and every
//! omitted key falls back to the documented default, so the serialized
//! form of a loaded config is a complete record of the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::condition::RecapStrategy;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{DivaError, Result};
use crate::io::CorpusSpec;
use crate::trainer::{Models, Phase, ScheduleConfig, TrainConfig};

macro_rules! phase_section {
    ($(#[$doc:meta])* $name:ident, $defaults:path) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            pub steps: usize,
            pub batch_size: usize,
            /// Timestep states drawn per image.
            pub states_per_image: usize,
            pub learning_rate: f64,
            pub momentum: f64,
        }

        impl Default for $name {
            fn default() -> Self {
                let c = $defaults(0);
                Self {
                    steps: c.steps,
                    batch_size: c.batch_size,
                    states_per_image: c.states_per_image,
                    learning_rate: c.learning_rate,
                    momentum: c.momentum,
                }
            }
        }
    };
}

phase_section!(
    /// Denoiser pretraining (phase A) optimizer settings.
    PretrainSection,
    TrainConfig::phase_a
);
phase_section!(
    /// Encoder tuning (phase B) optimizer settings.
    TuneSection,
    TrainConfig::phase_b
);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub pretrain: PretrainSection,
    pub tune: TuneSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecapSection {
    /// `class`, `random:P`, `pool:K`, or `all`.
    pub strategy: RecapStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub knn_k: usize,
    /// Maximum translation in pixels for the jitter-consistency probe.
    pub jitter: usize,
    /// Labeled images used by the jitter-consistency probe.
    pub consistency_images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            knn_k: 5,
            jitter: 1,
            consistency_images: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub trainer: TrainerSection,
    pub recap: RecapSection,
    pub dataset: CorpusSpec,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| DivaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DivaError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.models()?;
        self.train_config(Phase::A).validate()?;
        self.train_config(Phase::B).validate()?;
        if self.eval.knn_k == 0 || self.eval.knn_k.is_multiple_of(2) {
            return Err(DivaError::Config(format!(
                "eval.knn_k must be odd, got {}",
                self.eval.knn_k
            )));
        }
        Ok(())
    }

    pub fn models(&self) -> Result<Models> {
        Models::new(
            Encoder::new(self.encoder.clone())?,
            Denoiser::new(self.denoiser.clone())?,
            self.schedule.build()?,
        )
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let (p, t) = (&self.trainer.pretrain, &self.trainer.tune);
        let (steps, batch_size, states_per_image, learning_rate, momentum) = match phase {
            Phase::A => (
                p.steps,
                p.batch_size,
                p.states_per_image,
                p.learning_rate,
                p.momentum,
            ),
            Phase::B => (
                t.steps,
                t.batch_size,
                t.states_per_image,
                t.learning_rate,
                t.momentum,
            ),
        };
        TrainConfig {
            phase,
            steps,
            batch_size,
            states_per_image,
            learning_rate,
            momentum,
            seed: self.seed,
            strategy: self.recap.strategy,
        }
    }

    /// Uniform model width for both networks.
    pub fn with_model_size(mut self, embed_dim: usize, depth: usize, heads: usize) -> Self {
        self.encoder.embed_dim = embed_dim;
        self.encoder.depth = depth;
        self.encoder.heads = heads;
        self.denoiser.embed_dim = embed_dim;
        self.denoiser.depth = depth;
        self.denoiser.heads = heads;
        self.denoiser.time_embed_dim = embed_dim;
        self.denoiser.cond_dim = embed_dim;
        self
    }
}
