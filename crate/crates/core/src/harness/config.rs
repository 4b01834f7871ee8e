use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::TokenizerConfig;
use crate::align::IpaConfig;
use crate::error::{Error, Result};
use crate::genmodel::{ModelConfig, TrainConfig};
use crate::numerics::AdamConfig;
use crate::reward::{RewardConfig, RmTrainConfig};
use crate::simulator::SimConfig;

/// Seed-model training plus the held-out evaluation budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub eval_every: usize,
    pub target_eval_loss: Option<f64>,
    /// Held-out sessions used for periodic evaluation (0 = all).
    pub eval_sessions: usize,
}

impl Default for SeedTrainConfig {
    fn default() -> Self {
        SeedTrainConfig {
            steps: 3000,
            batch_size: 16,
            adam: AdamConfig { learning_rate: 2e-3, ..AdamConfig::default() },
            eval_every: 250,
            target_eval_loss: None,
            eval_sessions: 250,
        }
    }
}

impl SeedTrainConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            adam: self.adam,
            eval_every: self.eval_every,
            target_eval_loss: self.target_eval_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out users to generate for (0 = all).
    pub users: usize,
    /// Beam width and number of sessions scored per user.
    pub top_n: usize,
    pub use_kv_cache: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { users: 500, top_n: 16, use_kv_cache: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub scaling_dims: Vec<usize>,
    pub scaling_seeds: Vec<u64>,
    pub scaling_steps: usize,
    /// Peak Adam learning rate shared by every width of the scaling sweep;
    /// it ramps up over `scaling_warmup_steps` and decays to zero at the
    /// last step.
    pub scaling_learning_rate: f64,
    pub scaling_warmup_steps: u64,
    pub rdpo_ratios: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            scaling_dims: vec![32, 64, 128],
            scaling_seeds: vec![1, 2, 3],
            scaling_steps: 1000,
            scaling_learning_rate: 1e-3,
            scaling_warmup_steps: 50,
            rdpo_ratios: vec![0.01, 0.02, 0.05, 0.1],
        }
    }
}

/// Everything a run needs; serialized into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub simulator: SimConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub seed_train: SeedTrainConfig,
    pub reward: RewardConfig,
    pub reward_train: RmTrainConfig,
    pub ipa: IpaConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            simulator: SimConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            seed_train: SeedTrainConfig::default(),
            reward: RewardConfig::default(),
            reward_train: RmTrainConfig::default(),
            ipa: IpaConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, context: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(context, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Cross-section consistency: the generator, tokenizer, simulator and
    /// reward model must agree on shared sizes.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.reward.validate()?;
        self.ipa.validate()?;
        let mismatch = |what: &str, a: usize, b: usize| {
            if a != b {
                Err(Error::Config(format!("{what} disagree: {a} vs {b}")))
            } else {
                Ok(())
            }
        };
        mismatch("tokenizer.codebook_size and model.codebook_size", self.tokenizer.codebook_size, self.model.codebook_size)?;
        mismatch("tokenizer.levels and model.codebook_levels", self.tokenizer.levels, self.model.codebook_levels)?;
        mismatch("simulator.session_len and model.session_size", self.simulator.session_len, self.model.session_size)?;
        mismatch("simulator.dim and reward.input_dim", self.simulator.dim, self.reward.input_dim)?;
        if self.eval.top_n == 0 {
            return Err(Error::Config("eval.top_n must be positive".into()));
        }
        if !(self.sweep.scaling_learning_rate > 0.0) {
            return Err(Error::Config("sweep.scaling_learning_rate must be positive".into()));
        }
        Ok(())
    }
}
