//! Training run configuration, read from flat TOML with unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::sha256_hex;
use crate::dataset::Tier;
use crate::envs::ToyEnv;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceKind};
use crate::nn::Activation;
use crate::policy::{Algorithm, PolicyConfig, QGradPath, SamplerMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regimen {
    /// Critic and policy updated in lockstep from cold starts.
    Joint,
    /// Guidance pretrained on the dataset, frozen, then the policy is trained.
    Gfdt,
    /// GFDT with a second, differently seeded guidance used at inference.
    DoubleGuidance,
    /// Pure behavior cloning; a critic is still fitted for checkpoint pairs.
    NoGuidance,
    /// The policy's value signal is replaced by standard-normal noise.
    NoiseGuidance,
    /// GFDT whose pretrained guidance keeps training in stage two.
    GfdtUnfrozen,
}

impl Regimen {
    pub const ALL: [Regimen; 6] = [
        Regimen::Joint,
        Regimen::Gfdt,
        Regimen::DoubleGuidance,
        Regimen::NoGuidance,
        Regimen::NoiseGuidance,
        Regimen::GfdtUnfrozen,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Regimen::Joint => "joint",
            Regimen::Gfdt => "gfdt",
            Regimen::DoubleGuidance => "double_guidance",
            Regimen::NoGuidance => "no_guidance",
            Regimen::NoiseGuidance => "noise_guidance",
            Regimen::GfdtUnfrozen => "gfdt_unfrozen",
        }
    }

    pub fn pretrains_guidance(self) -> bool {
        matches!(self, Regimen::Gfdt | Regimen::DoubleGuidance | Regimen::GfdtUnfrozen)
    }
}

impl std::str::FromStr for Regimen {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Regimen::ALL
            .into_iter()
            .find(|r| r.label() == norm)
            .ok_or_else(|| Error::invalid_config(format!("unknown regimen `{s}`")))
    }
}

/// Every knob of a training run. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub regimen: Regimen,
    pub total_steps: u64,
    pub batch_size: usize,
    pub checkpoint_interval: u64,
    /// Stage-one guidance steps; `None` means `total_steps / 4`.
    pub guidance_pretrain_steps: Option<u64>,
    pub eta: f64,
    pub lambda: f64,
    pub alpha: f64,

    pub guidance_seed: u64,
    pub policy_seed: u64,
    pub inference_guidance_seed: u64,

    pub env_name: String,
    pub dataset_tier: Tier,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub dataset: Option<String>,
    pub output_dir: Option<String>,

    pub policy_hidden: Vec<usize>,
    pub policy_activation: Activation,
    pub policy_lr: f64,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub time_embed_dim: usize,
    pub sampler: Option<SamplerMode>,
    pub q_grad_path: QGradPath,
    pub one_step_k: Option<usize>,

    pub guidance_hidden: Vec<usize>,
    pub guidance_activation: Activation,
    pub guidance_lr: f64,
    pub gamma: f64,
    pub tau_ema: f64,
    pub expectile: f64,
    pub beta_weight: f64,
    pub w_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        let g = GuidanceConfig::default();
        Self {
            algorithm: Algorithm::Dql,
            regimen: Regimen::Gfdt,
            total_steps: 4000,
            batch_size: 256,
            checkpoint_interval: 400,
            guidance_pretrain_steps: None,
            eta: 1.0,
            lambda: 0.1,
            alpha: 0.0,
            guidance_seed: 0,
            policy_seed: 1,
            inference_guidance_seed: 2,
            env_name: "point2d".into(),
            dataset_tier: Tier::Medium,
            dataset_size: 20_000,
            dataset_seed: 0,
            dataset: None,
            output_dir: None,
            policy_hidden: p.hidden,
            policy_activation: p.activation,
            policy_lr: p.learning_rate,
            diffusion_steps: p.diffusion_steps,
            beta_min: p.beta_min,
            beta_max: p.beta_max,
            time_embed_dim: p.time_embed_dim,
            sampler: p.sampler,
            q_grad_path: p.q_grad_path,
            one_step_k: p.one_step_k,
            guidance_hidden: g.hidden,
            guidance_activation: g.activation,
            guidance_lr: g.learning_rate,
            gamma: g.gamma,
            tau_ema: g.tau_ema,
            expectile: g.expectile,
            beta_weight: g.beta_weight,
            w_max: g.w_max,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::invalid_config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Resolved config with every default made explicit.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.resolved()).expect("config is always representable as TOML")
    }

    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.guidance_pretrain_steps = Some(self.pretrain_steps());
        out.one_step_k = Some(self.one_step_k.unwrap_or(self.diffusion_steps));
        out.sampler = Some(self.sampler.unwrap_or(self.algorithm.default_sampler()));
        out
    }

    /// Hex SHA-256 of the resolved TOML.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }

    pub fn pretrain_steps(&self) -> u64 {
        self.guidance_pretrain_steps.unwrap_or(self.total_steps / 4)
    }

    pub fn guidance_kind(&self) -> GuidanceKind {
        match self.algorithm {
            Algorithm::Idql => GuidanceKind::Iql,
            Algorithm::Dql | Algorithm::Edp => GuidanceKind::DoubleQ,
        }
    }

    pub fn env(&self) -> Result<ToyEnv> {
        ToyEnv::by_name(&self.env_name)
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            hidden: self.policy_hidden.clone(),
            activation: self.policy_activation,
            learning_rate: self.policy_lr,
            diffusion_steps: self.diffusion_steps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            time_embed_dim: self.time_embed_dim,
            sampler: self.sampler,
            q_grad_path: self.q_grad_path,
            one_step_k: self.one_step_k,
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            hidden: self.guidance_hidden.clone(),
            activation: self.guidance_activation,
            learning_rate: self.guidance_lr,
            gamma: self.gamma,
            tau_ema: self.tau_ema,
            expectile: self.expectile,
            beta_weight: self.beta_weight,
            w_max: self.w_max,
            batch_size: self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid_config("batch_size must be at least 1"));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::invalid_config("checkpoint_interval must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::invalid_config(format!("eta must be finite and non-negative, got {}", self.eta)));
        }
        if !self.lambda.is_finite() || !self.alpha.is_finite() {
            return Err(Error::invalid_config("lambda and alpha must be finite"));
        }
        if self.regimen == Regimen::DoubleGuidance && self.inference_guidance_seed == self.guidance_seed {
            return Err(Error::invalid_config(
                "double guidance needs inference_guidance_seed different from guidance_seed",
            ));
        }
        self.env().map_err(|e| Error::invalid_config(e.to_string()))?;
        self.policy_config().validate()?;
        self.guidance_config().validate()?;
        Ok(())
    }
}
