//! Training regimens. Every run returns checkpoint pairs at steps
//! `0, c, 2c, ...` (with `c` the checkpoint interval), one loss row per policy
//! step, and the guidance to use at inference.
//!
//! Step counts always refer to policy updates. Regimens that pretrain
//! guidance spend their stage-one steps before step 0.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, HybridAgent, Module};
use crate::config::{Regimen, TrainConfig};
use crate::dataset::{OfflineDataset, Transition};
use crate::error::{Error, Result};
use crate::guidance::{annotate_step, clipped_exp_weight, pretrain_guidance, GuidanceHandle, GuidanceKind};
use crate::policy::{Algorithm, DiffusionPolicy, LossBundle, QSource};
use crate::rng;

/// Stream ids under the policy seed.
const STREAM_BATCHES: u64 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointPair {
    pub step: u64,
    pub guidance: GuidanceHandle,
    pub policy: DiffusionPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub l_diff: f64,
    pub l_q: f64,
    pub l_actor: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: TrainConfig,
    pub dataset_hash: String,
    pub checkpoints: Vec<CheckpointPair>,
    pub losses: Vec<LossRow>,
    /// Guidance attached at evaluation when it differs from the training
    /// guidance (double guidance).
    pub separate_inference_guidance: Option<GuidanceHandle>,
}

impl RunOutput {
    /// Guidance used at inference for checkpoint `i`, if any.
    pub fn inference_guidance(&self, i: usize) -> Option<&GuidanceHandle> {
        match self.config.regimen {
            Regimen::NoGuidance | Regimen::NoiseGuidance => None,
            Regimen::DoubleGuidance => self.separate_inference_guidance.as_ref(),
            Regimen::Joint | Regimen::Gfdt | Regimen::GfdtUnfrozen => Some(&self.checkpoints[i].guidance),
        }
    }

    /// Evaluable agent for checkpoint `i` under this run's inference settings.
    pub fn agent(&self, i: usize) -> Result<HybridAgent> {
        let pair = &self.checkpoints[i];
        let agent = HybridAgent::new(pair.policy.clone(), self.inference_guidance(i).cloned(), self.config.lambda)?
            .with_training_guidance(Some(pair.guidance.clone()))
            .with_alpha(self.config.alpha);
        Ok(agent)
    }

    /// Same policy checkpoint with an explicitly chosen inference guidance.
    pub fn agent_with_guidance(&self, i: usize, guidance: Option<&GuidanceHandle>) -> Result<HybridAgent> {
        let pair = &self.checkpoints[i];
        Ok(HybridAgent::new(pair.policy.clone(), guidance.cloned(), self.config.lambda)?
            .with_training_guidance(Some(pair.guidance.clone()))
            .with_alpha(self.config.alpha))
    }

    pub fn steps(&self) -> Vec<u64> {
        self.checkpoints.iter().map(|c| c.step).collect()
    }

    /// Writes checkpoints, the loss log, the resolved config and a manifest
    /// into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<RunManifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.checkpoints.len());
        for pair in &self.checkpoints {
            let g = format!("guidance_{:08}.ckpt", pair.step);
            let p = format!("policy_{:08}.ckpt", pair.step);
            save_checkpoint(&Module::Guidance(pair.guidance.clone()), dir.join(&g))?;
            save_checkpoint(&Module::Policy(pair.policy.clone()), dir.join(&p))?;
            entries.push(ManifestCheckpoint {
                step: pair.step,
                guidance: g,
                policy: p,
            });
        }
        let inference_guidance = match &self.separate_inference_guidance {
            Some(g) => {
                let name = "inference_guidance.ckpt".to_string();
                save_checkpoint(&Module::Guidance(g.clone()), dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        let mut csv = String::from("step,l_diff,l_q,l_actor\n");
        for row in &self.losses {
            csv.push_str(&format!("{},{:e},{:e},{:e}\n", row.step, row.l_diff, row.l_q, row.l_actor));
        }
        std::fs::write(dir.join("losses.csv"), csv)?;
        std::fs::write(dir.join("config.resolved.toml"), self.config.to_toml_string())?;
        let manifest = RunManifest {
            config_hash: self.config.content_hash(),
            dataset_hash: self.dataset_hash.clone(),
            regimen: self.config.regimen,
            algorithm: self.config.algorithm,
            lambda: self.config.lambda,
            alpha: self.config.alpha,
            inference_guidance,
            checkpoints: entries,
            config: self.config.resolved(),
        };
        std::fs::write(
            dir.join("manifest.toml"),
            toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCheckpoint {
    pub step: u64,
    pub guidance: String,
    pub policy: String,
}

/// Structured record of one run, stored as `manifest.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub dataset_hash: String,
    pub regimen: Regimen,
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub alpha: f64,
    pub inference_guidance: Option<String>,
    pub checkpoints: Vec<ManifestCheckpoint>,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Format(e.to_string()))
    }

    /// Rebuilds the evaluable agent of every checkpoint from files next to
    /// the manifest.
    pub fn load_agents(&self, dir: &Path) -> Result<Vec<(u64, HybridAgent)>> {
        let separate = match &self.inference_guidance {
            Some(name) => Some(crate::checkpoint::load_checkpoint(dir.join(name))?.into_guidance()?),
            None => None,
        };
        self.checkpoints
            .iter()
            .map(|c| {
                let g = crate::checkpoint::load_checkpoint(dir.join(&c.guidance))?.into_guidance()?;
                let p = crate::checkpoint::load_checkpoint(dir.join(&c.policy))?.into_policy()?;
                let inference = match self.regimen {
                    Regimen::NoGuidance | Regimen::NoiseGuidance => None,
                    Regimen::DoubleGuidance => separate.clone(),
                    _ => Some(g.clone()),
                };
                let agent = HybridAgent::new(p, inference, self.lambda)?
                    .with_training_guidance(Some(g))
                    .with_alpha(self.alpha);
                Ok((c.step, agent))
            })
            .collect()
    }

    pub fn paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.checkpoints
            .iter()
            .flat_map(|c| [dir.join(&c.guidance), dir.join(&c.policy)])
            .collect()
    }
}

fn check_dataset(config: &TrainConfig, dataset: &OfflineDataset) -> Result<()> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid_config("dataset is empty"));
    }
    let env = config.env()?;
    if dataset.state_dim() != env.state_dim() || dataset.action_dim() != env.action_dim() {
        return Err(Error::invalid_config(format!(
            "dataset dims {}/{} do not match env `{}`",
            dataset.state_dim(),
            dataset.action_dim(),
            env.name()
        )));
    }
    Ok(())
}

fn new_policy(config: &TrainConfig) -> Result<DiffusionPolicy> {
    let env = config.env()?;
    DiffusionPolicy::new(
        config.algorithm,
        env.state_dim(),
        env.action_box().clone(),
        &config.policy_config(),
        config.policy_seed,
    )
}

/// How guidance is handled while the policy trains.
enum GuidanceMode {
    /// Updated once per policy step with policy-sampled next actions.
    Online,
    /// Never touched.
    Frozen,
}

/// Where the policy's value signal comes from.
#[derive(Clone, Copy, PartialEq)]
enum ValueSignal {
    Critic,
    Noise,
    Off,
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    dataset: &'a OfflineDataset,
    guidance: GuidanceHandle,
    policy: DiffusionPolicy,
    mode: GuidanceMode,
    signal: ValueSignal,
}

impl Trainer<'_> {
    fn run(mut self, separate_inference_guidance: Option<GuidanceHandle>) -> Result<RunOutput> {
        let cfg = self.config;
        let mut rng = rng::derived(cfg.policy_seed, STREAM_BATCHES);
        let mut checkpoints = vec![self.snapshot(0)];
        let mut losses = Vec::with_capacity(cfg.total_steps as usize);
        for step in 1..=cfg.total_steps {
            let bundle = self.step(&mut rng).map_err(|e| annotate_step(e, step))?;
            if bundle.identity_gap() > 1e-12 {
                return Err(Error::NumericFailure(format!("step {step}: loss identity violated")));
            }
            losses.push(LossRow {
                step,
                l_diff: bundle.l_diff,
                l_q: bundle.l_q,
                l_actor: bundle.l_actor,
            });
            if step % cfg.checkpoint_interval == 0 {
                checkpoints.push(self.snapshot(step));
            }
        }
        Ok(RunOutput {
            config: cfg.clone(),
            dataset_hash: self.dataset.content_hash(),
            checkpoints,
            losses,
            separate_inference_guidance,
        })
    }

    fn snapshot(&self, step: u64) -> CheckpointPair {
        CheckpointPair {
            step,
            guidance: self.guidance.clone(),
            policy: self.policy.clone(),
        }
    }

    fn step<R: Rng>(&mut self, rng: &mut R) -> Result<LossBundle> {
        let ds = self.dataset;
        let idx = ds.sample_indices(self.config.batch_size, rng);
        if let GuidanceMode::Online = self.mode {
            let batch: Vec<Transition<'_>> = idx.iter().map(|&i| ds.transition(i)).collect();
            match self.guidance.kind() {
                GuidanceKind::DoubleQ => {
                    let policy = &self.policy;
                    self.guidance
                        .td_update_double_q(&batch, |t| policy.sample_action(t.next_state, rng, None, 0.0))?;
                }
                GuidanceKind::Iql => {
                    self.guidance.iql_expectile_update(&batch)?;
                }
            }
        }
        let states: Vec<&[f64]> = idx.iter().map(|&i| ds.state(i)).collect();
        let actions: Vec<&[f64]> = idx.iter().map(|&i| ds.action(i)).collect();
        match (self.config.algorithm, self.signal) {
            (Algorithm::Idql, ValueSignal::Critic) => self.policy.weighted_bc_update(&self.guidance, &states, &actions, rng),
            (Algorithm::Idql, ValueSignal::Noise) => {
                let weights: Vec<f64> = (0..states.len())
                    .map(|_| {
                        let adv: f64 = rng.sample(rand_distr::StandardNormal);
                        clipped_exp_weight(adv, self.config.beta_weight, self.config.w_max)
                    })
                    .collect();
                self.policy.weighted_denoising_update(&states, &actions, &weights, rng)
            }
            (_, ValueSignal::Off) => self.policy.actor_loss(QSource::Noise, &states, &actions, 0.0, rng),
            (_, ValueSignal::Critic) => {
                self.policy
                    .actor_loss(QSource::Critic(&self.guidance), &states, &actions, self.config.eta, rng)
            }
            (_, ValueSignal::Noise) => self.policy.actor_loss(QSource::Noise, &states, &actions, self.config.eta, rng),
        }
    }
}

fn cold_guidance(config: &TrainConfig, dataset: &OfflineDataset) -> Result<GuidanceHandle> {
    GuidanceHandle::new(
        config.guidance_kind(),
        dataset.state_dim(),
        dataset.action_dim(),
        &config.guidance_config(),
        config.guidance_seed,
    )
}

fn pretrained(config: &TrainConfig, dataset: &OfflineDataset, seed: u64) -> Result<GuidanceHandle> {
    pretrain_guidance(config.guidance_kind(), dataset, &config.guidance_config(), config.pretrain_steps(), seed)
}

fn expect_regimen(config: &TrainConfig, allowed: &[Regimen]) -> Result<()> {
    if !allowed.contains(&config.regimen) {
        return Err(Error::invalid_config(format!(
            "regimen `{}` is not handled here",
            config.regimen.label()
        )));
    }
    Ok(())
}

/// Both modules start cold and are updated once each per step.
pub fn train_joint(config: &TrainConfig, dataset: &OfflineDataset) -> Result<RunOutput> {
    expect_regimen(config, &[Regimen::Joint])?;
    check_dataset(config, dataset)?;
    Trainer {
        config,
        dataset,
        guidance: cold_guidance(config, dataset)?,
        policy: new_policy(config)?,
        mode: GuidanceMode::Online,
        signal: ValueSignal::Critic,
    }
    .run(None)
}

/// Stage one pretrains guidance on the dataset; stage two trains the policy
/// against it, frozen (or still learning for the unfrozen ablation).
pub fn train_gfdt(config: &TrainConfig, dataset: &OfflineDataset) -> Result<RunOutput> {
    expect_regimen(config, &[Regimen::Gfdt, Regimen::GfdtUnfrozen])?;
    check_dataset(config, dataset)?;
    let mut guidance = pretrained(config, dataset, config.guidance_seed)?;
    let mode = if config.regimen == Regimen::GfdtUnfrozen {
        guidance.unfreeze();
        GuidanceMode::Online
    } else {
        GuidanceMode::Frozen
    };
    Trainer {
        config,
        dataset,
        guidance,
        policy: new_policy(config)?,
        mode,
        signal: ValueSignal::Critic,
    }
    .run(None)
}

/// GFDT against guidance A, with an independently seeded guidance B attached
/// for inference.
pub fn train_double_guidance(config: &TrainConfig, dataset: &OfflineDataset) -> Result<RunOutput> {
    expect_regimen(config, &[Regimen::DoubleGuidance])?;
    check_dataset(config, dataset)?;
    double_guidance_run(config, dataset)
}

/// Double guidance without the distinct-seed check, so both modules may be
/// the same one. Intended for tests of the degenerate pairing.
pub fn train_double_guidance_unchecked(config: &TrainConfig, dataset: &OfflineDataset) -> Result<RunOutput> {
    let mut relaxed = config.clone();
    relaxed.regimen = Regimen::Gfdt;
    check_dataset(&relaxed, dataset)?;
    let mut out = double_guidance_run(&relaxed, dataset)?;
    out.config.regimen = Regimen::DoubleGuidance;
    Ok(out)
}

fn double_guidance_run(config: &TrainConfig, dataset: &OfflineDataset) -> Result<RunOutput> {
    let training = pretrained(config, dataset, config.guidance_seed)?;
    let inference = pretrained(config, dataset, config.inference_guidance_seed)?;
    Trainer {
        config,
        dataset,
        guidance: training,
        policy: new_policy(config)?,
        mode: GuidanceMode::Frozen,
        signal: ValueSignal::Critic,
    }
    .run(Some(inference))
}

/// Joint-style runs with the value signal removed (`eta = 0`) or replaced by
/// noise.
pub fn run_ablation(config: &TrainConfig, dataset: &OfflineDataset) -> Result<RunOutput> {
    expect_regimen(config, &[Regimen::NoGuidance, Regimen::NoiseGuidance])?;
    check_dataset(config, dataset)?;
    let signal = if config.regimen == Regimen::NoGuidance {
        ValueSignal::Off
    } else {
        ValueSignal::Noise
    };
    Trainer {
        config,
        dataset,
        guidance: cold_guidance(config, dataset)?,
        policy: new_policy(config)?,
        mode: GuidanceMode::Online,
        signal,
    }
    .run(None)
}

/// Dispatches on the configured regimen.
pub fn train(config: &TrainConfig, dataset: &OfflineDataset) -> Result<RunOutput> {
    match config.regimen {
        Regimen::Joint => train_joint(config, dataset),
        Regimen::Gfdt | Regimen::GfdtUnfrozen => train_gfdt(config, dataset),
        Regimen::DoubleGuidance => train_double_guidance(config, dataset),
        Regimen::NoGuidance | Regimen::NoiseGuidance => run_ablation(config, dataset),
    }
}
