//! Checkpoint evaluation: seeded rollouts scored as normalized returns, and
//! the per-checkpoint report format.

use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::checkpoint::HybridAgent;
use crate::envs::ToyEnv;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_EPISODES: usize = 50;

/// Anything that maps states to actions.
pub trait Agent {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn act(&self, state: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>>;
}

impl Agent for HybridAgent {
    fn state_dim(&self) -> usize {
        self.policy.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.policy.action_dim()
    }

    fn act(&self, state: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.policy
            .sample_action_with_alpha(state, rng, self.inference_guidance.as_ref(), self.lambda, self.alpha)
    }
}

/// The env's analytic controller.
pub struct ExpertAgent<'a>(pub &'a ToyEnv);

impl Agent for ExpertAgent<'_> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }

    fn act(&self, state: &[f64], _rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(self.0.expert_action(state))
    }
}

/// Uniform actions over the env's action box.
pub struct RandomAgent<'a>(pub &'a ToyEnv);

impl Agent for RandomAgent<'_> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }

    fn act(&self, _state: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(self.0.random_action(rng))
    }
}

/// Normalized returns of `n_episodes` rollouts. Episode `i` runs on its own
/// stream derived from `(eval_seed, i)`, so results do not depend on
/// evaluation order.
pub fn evaluate_checkpoint(agent: &dyn Agent, env: &ToyEnv, n_episodes: usize, eval_seed: u64) -> Result<Vec<f64>> {
    if n_episodes == 0 {
        return Err(Error::invalid_input("n_episodes must be at least 1"));
    }
    if agent.state_dim() != env.state_dim() || agent.action_dim() != env.action_dim() {
        return Err(Error::invalid_input(format!(
            "agent dims {}/{} do not match env `{}` ({}/{})",
            agent.state_dim(),
            agent.action_dim(),
            env.name(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    (0..n_episodes as u64)
        .map(|ep| {
            let mut r = rng::derived(eval_seed, ep);
            let raw = env.rollout(&mut r, |s, r| agent.act(s, r))?;
            Ok(env.normalized_return(raw))
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

impl EvalRecord {
    pub fn new(step: u64, returns: Vec<f64>) -> Self {
        Self {
            step,
            mean: mean(&returns),
            variance: sample_variance(&returns),
            returns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub label: String,
    pub env: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub eval_seed: u64,
    pub episodes: usize,
}

/// Evaluation of a checkpoint series. Stored as JSON lines: a metadata
/// object followed by one record per checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: EvalMeta,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn means(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.variance).collect()
    }

    pub fn steps(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.step).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.meta).expect("serializable");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let meta_line = lines.next().ok_or_else(|| Error::Format("empty report".into()))?;
        let meta: EvalMeta = serde_json::from_str(meta_line).map_err(|e| Error::Format(e.to_string()))?;
        let records = lines
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<Vec<EvalRecord>>>()?;
        for r in &records {
            if r.returns.len() != meta.episodes {
                return Err(Error::Format(format!(
                    "checkpoint {} lists {} returns, expected {}",
                    r.step,
                    r.returns.len(),
                    meta.episodes
                )));
            }
        }
        Ok(Self { meta, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

/// Evaluates every agent of a series with the same episode seeds.
pub fn evaluate_series(
    agents: &[(u64, HybridAgent)],
    env: &ToyEnv,
    n_episodes: usize,
    eval_seed: u64,
    meta_label: &str,
    config_hash: &str,
    seeds: Vec<u64>,
) -> Result<EvalReport> {
    let records = agents
        .iter()
        .map(|(step, agent)| Ok(EvalRecord::new(*step, evaluate_checkpoint(agent, env, n_episodes, eval_seed)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        meta: EvalMeta {
            label: meta_label.to_string(),
            env: env.name().to_string(),
            config_hash: config_hash.to_string(),
            seeds,
            eval_seed,
            episodes: n_episodes,
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_is_unbiased() {
        assert_eq!(sample_variance(&[1.0, 2.0, 3.0, 4.0]), 5.0 / 3.0);
        assert_eq!(sample_variance(&[7.0]), 0.0);
    }

    #[test]
    fn evaluation_is_deterministic_and_checks_dims() {
        let env = ToyEnv::lin_reg_1d();
        let a = evaluate_checkpoint(&RandomAgent(&env), &env, 5, 3).unwrap();
        let b = evaluate_checkpoint(&RandomAgent(&env), &env, 5, 3).unwrap();
        assert_eq!(a, b);
        let other = ToyEnv::point_reach_2d();
        assert!(matches!(
            evaluate_checkpoint(&RandomAgent(&other), &env, 5, 3),
            Err(Error::InvalidInput(_))
        ));
        assert!(evaluate_checkpoint(&RandomAgent(&env), &env, 0, 3).is_err());
    }

    #[test]
    fn report_round_trip() {
        let report = EvalReport {
            meta: EvalMeta {
                label: "x".into(),
                env: "point2d".into(),
                config_hash: "abc".into(),
                seeds: vec![1, 2],
                eval_seed: 9,
                episodes: 3,
            },
            records: vec![EvalRecord::new(0, vec![1.0, 2.0, 4.5]), EvalRecord::new(400, vec![0.1, 0.2, 0.3])],
        };
        let back = EvalReport::from_jsonl(&report.to_jsonl()).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.records[0].variance, sample_variance(&back.records[0].returns));
    }
}
