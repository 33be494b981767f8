//! Offline transition datasets: tiered generation, coherence, and the
//! columnar binary file format.
//!
//! File layout (little-endian): magic `MODDIFDS`, `u32` version, env
//! fingerprint `u64`, env name, tier `u8`, generation seed `u64`, count `u64`,
//! state/action dims `u32`, then five `f64` columns (states, actions, rewards,
//! next states, terminal flags as 0/1), then a SHA-256 of everything before.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{sha256_hex, ByteReader, ByteWriter};
use crate::envs::ToyEnv;
use crate::error::{Error, Result};
use crate::rng;

const MAGIC: &[u8; 8] = b"MODDIFDS";
const VERSION: u32 = 1;

pub const MEDIUM_NOISE: f64 = 0.3;
pub const REPLAY_NOISE_LEVELS: [f64; 4] = [0.1, 0.3, 0.6, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    Expert,
    Medium,
    MediumExpert,
    MediumReplay,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Expert, Tier::Medium, Tier::MediumExpert, Tier::MediumReplay];

    fn tag(self) -> u8 {
        match self {
            Tier::Expert => 0,
            Tier::Medium => 1,
            Tier::MediumExpert => 2,
            Tier::MediumReplay => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Tier::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown tier tag {tag}")))
    }

    /// Behavior noise for episode `episode` of this tier.
    fn episode_noise(self, episode: usize) -> f64 {
        match self {
            Tier::Expert => 0.0,
            Tier::Medium => MEDIUM_NOISE,
            Tier::MediumExpert => {
                if episode.is_multiple_of(2) {
                    0.0
                } else {
                    MEDIUM_NOISE
                }
            }
            Tier::MediumReplay => REPLAY_NOISE_LEVELS[episode % REPLAY_NOISE_LEVELS.len()],
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Expert => "expert",
            Tier::Medium => "medium",
            Tier::MediumExpert => "medium-expert",
            Tier::MediumReplay => "medium-replay",
        })
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "expert" => Ok(Tier::Expert),
            "medium" => Ok(Tier::Medium),
            "medium-expert" | "mediumexpert" => Ok(Tier::MediumExpert),
            "medium-replay" | "mediumreplay" => Ok(Tier::MediumReplay),
            other => Err(Error::invalid_config(format!("unknown dataset tier '{other}'"))),
        }
    }
}

/// Columnar `(s, a, r, s', terminal)` transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminals: Vec<bool>,
    tier: Tier,
    env_name: String,
    env_fingerprint: u64,
    seed: u64,
    /// Index of a transition starting at `s'`, for non-terminal rows.
    successor: Vec<Option<usize>>,
}

/// Borrowed view of one transition.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub reward: f64,
    pub next_state: &'a [f64],
    pub terminal: bool,
}

fn state_key(s: &[f64]) -> Vec<u64> {
    s.iter().map(|v| v.to_bits()).collect()
}

impl OfflineDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn from_columns(
        state_dim: usize,
        action_dim: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
        next_states: Vec<f64>,
        terminals: Vec<bool>,
        tier: Tier,
        env_name: impl Into<String>,
        env_fingerprint: u64,
        seed: u64,
    ) -> Result<Self> {
        let n = rewards.len();
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::invalid_input("dataset dims must be positive"));
        }
        if states.len() != n * state_dim
            || next_states.len() != n * state_dim
            || actions.len() != n * action_dim
            || terminals.len() != n
        {
            return Err(Error::invalid_input("dataset columns have inconsistent lengths"));
        }
        let mut first_index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(n);
        for i in 0..n {
            first_index
                .entry(state_key(&states[i * state_dim..(i + 1) * state_dim]))
                .or_insert(i);
        }
        let successor = (0..n)
            .map(|i| {
                if terminals[i] {
                    return None;
                }
                let next = &next_states[i * state_dim..(i + 1) * state_dim];
                // prefer the in-episode successor
                if i + 1 < n && states[(i + 1) * state_dim..(i + 2) * state_dim] == *next {
                    return Some(i + 1);
                }
                first_index.get(&state_key(next)).copied()
            })
            .collect();
        Ok(Self {
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
            next_states,
            terminals,
            tier,
            env_name: env_name.into(),
            env_fingerprint,
            seed,
            successor,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn env_name(&self) -> &str {
        &self.env_name
    }

    pub fn env_fingerprint(&self) -> u64 {
        self.env_fingerprint
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.rewards[i]
    }

    pub fn terminal(&self, i: usize) -> bool {
        self.terminals[i]
    }

    pub fn transition(&self, i: usize) -> Transition<'_> {
        Transition {
            state: self.state(i),
            action: self.action(i),
            reward: self.rewards[i],
            next_state: self.next_state(i),
            terminal: self.terminals[i],
        }
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// The dataset action taken at `s'` of transition `i` (SARSA-style `a'`).
    pub fn next_action(&self, i: usize) -> Option<&[f64]> {
        self.successor[i].map(|j| self.action(j))
    }

    /// Every non-terminal next state also appears as a state.
    pub fn is_coherent(&self) -> bool {
        self.successor
            .iter()
            .zip(&self.terminals)
            .all(|(succ, term)| *term || succ.is_some())
    }

    pub fn check_coherent(&self) -> Result<()> {
        match (0..self.len()).find(|&i| !self.terminals[i] && self.successor[i].is_none()) {
            None => Ok(()),
            Some(i) => Err(Error::invalid_config(format!(
                "dataset is not coherent: next state of transition {i} never appears as a state"
            ))),
        }
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        (0..batch_size).map(|_| rng.random_range(0..self.len())).collect()
    }

    /// Sum of rewards per episode, splitting at terminal flags.
    pub fn episode_returns(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut acc = 0.0;
        for (r, t) in self.rewards.iter().zip(&self.terminals) {
            acc += r;
            if *t {
                out.push(acc);
                acc = 0.0;
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.env_fingerprint);
        w.str(&self.env_name);
        w.u8(self.tier.tag());
        w.u64(self.seed);
        w.u64(self.len() as u64);
        w.u32(self.state_dim as u32);
        w.u32(self.action_dim as u32);
        w.f64s(&self.states);
        w.f64s(&self.actions);
        w.f64s(&self.rewards);
        w.f64s(&self.next_states);
        for t in &self.terminals {
            w.f64(if *t { 1.0 } else { 0.0 });
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::verified(bytes)?;
        if r.bytes(8)? != MAGIC {
            return Err(Error::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let fingerprint = r.u64()?;
        let env_name = r.str()?;
        let tier = Tier::from_tag(r.u8()?)?;
        let seed = r.u64()?;
        let n = r.u64()? as usize;
        let sd = r.u32()? as usize;
        let ad = r.u32()? as usize;
        let states = r.f64s(n * sd)?;
        let actions = r.f64s(n * ad)?;
        let rewards = r.f64s(n)?;
        let next_states = r.f64s(n * sd)?;
        let terminals = r
            .f64s(n)?
            .into_iter()
            .map(|v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(Error::Format(format!("terminal flag {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Self::from_columns(sd, ad, states, actions, rewards, next_states, terminals, tier, env_name, fingerprint, seed)
    }

    /// Hex SHA-256 of the serialized dataset.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the recorded fingerprint against `env`.
    pub fn load_for_env(path: impl AsRef<Path>, env: &ToyEnv) -> Result<Self> {
        let ds = Self::load(path)?;
        if ds.env_fingerprint != env.fingerprint() {
            return Err(Error::Format(format!(
                "dataset fingerprint {:#x} does not match env '{}' ({:#x})",
                ds.env_fingerprint,
                env.name(),
                env.fingerprint()
            )));
        }
        Ok(ds)
    }
}

/// Rolls tier-specific behavior policies for whole episodes until at least
/// `n_transitions` transitions are recorded.
pub fn generate_dataset(env: &ToyEnv, tier: Tier, n_transitions: usize, seed: u64) -> Result<OfflineDataset> {
    if n_transitions < env.horizon() {
        return Err(Error::invalid_config(format!(
            "need at least one episode ({} transitions), asked for {n_transitions}",
            env.horizon()
        )));
    }
    let episodes = n_transitions.div_ceil(env.horizon());
    let (sd, ad) = (env.state_dim(), env.action_dim());
    let cap = episodes * env.horizon();
    let mut states = Vec::with_capacity(cap * sd);
    let mut actions = Vec::with_capacity(cap * ad);
    let mut rewards = Vec::with_capacity(cap);
    let mut next_states = Vec::with_capacity(cap * sd);
    let mut terminals = Vec::with_capacity(cap);

    for ep in 0..episodes {
        let mut r = rng::derived(seed, ep as u64);
        let noise = tier.episode_noise(ep);
        let mut s = env.reset(&mut r);
        for t in 0..env.horizon() {
            let mut a = env.expert_action(&s);
            if noise > 0.0 {
                for x in a.iter_mut() {
                    let z: f64 = r.sample(StandardNormal);
                    *x += noise * z;
                }
                a = env.action_box().clamp(&a);
            }
            let out = env.step(&s, &a, t);
            states.extend_from_slice(&s);
            actions.extend_from_slice(&a);
            rewards.push(out.reward);
            next_states.extend_from_slice(&out.next_state);
            terminals.push(out.terminal);
            s = out.next_state;
            if out.terminal {
                break;
            }
        }
    }
    OfflineDataset::from_columns(
        sd,
        ad,
        states,
        actions,
        rewards,
        next_states,
        terminals,
        tier,
        env.name(),
        env.fingerprint(),
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_datasets_are_coherent_and_in_box() {
        for env in [ToyEnv::point_reach_2d(), ToyEnv::lin_reg_1d()] {
            for tier in Tier::ALL {
                let ds = generate_dataset(&env, tier, 300, 11).unwrap();
                assert!(ds.len() >= 300);
                assert!(ds.is_coherent(), "{tier} on {}", env.name());
                for i in 0..ds.len() {
                    assert!(env.action_box().contains(ds.action(i)));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let env = ToyEnv::point_reach_2d();
        let a = generate_dataset(&env, Tier::MediumReplay, 200, 5).unwrap();
        let b = generate_dataset(&env, Tier::MediumReplay, 200, 5).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_dataset(&env, Tier::MediumReplay, 200, 6).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn rejects_too_few_transitions() {
        let env = ToyEnv::lin_reg_1d();
        assert!(generate_dataset(&env, Tier::Expert, 5, 0).is_err());
    }

    #[test]
    fn byte_round_trip_and_corruption() {
        let env = ToyEnv::lin_reg_1d();
        let ds = generate_dataset(&env, Tier::Medium, 60, 3).unwrap();
        let bytes = ds.to_bytes();
        let back = OfflineDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);

        let mut flipped = bytes.clone();
        flipped[100] ^= 0x01;
        assert!(matches!(OfflineDataset::from_bytes(&flipped), Err(Error::Checksum)));

        let truncated = &bytes[..bytes.len() - 40];
        assert!(OfflineDataset::from_bytes(truncated).is_err());
    }

    #[test]
    fn next_action_follows_episode() {
        let env = ToyEnv::point_reach_2d();
        let ds = generate_dataset(&env, Tier::Expert, 40, 1).unwrap();
        for i in 0..ds.len() - 1 {
            assert_eq!(ds.next_action(i).unwrap(), ds.action(i + 1));
        }
        assert!(ds.next_action(ds.len() - 1).is_none());
    }

    #[test]
    fn incoherent_batch_is_detected() {
        let ds = OfflineDataset::from_columns(
            1,
            1,
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 5.0],
            vec![false, false],
            Tier::Expert,
            "custom",
            0,
            0,
        )
        .unwrap();
        assert!(!ds.is_coherent());
        assert!(ds.check_coherent().is_err());
    }

    #[test]
    fn tier_parsing() {
        assert_eq!("medium-expert".parse::<Tier>().unwrap(), Tier::MediumExpert);
        assert_eq!("medium_replay".parse::<Tier>().unwrap(), Tier::MediumReplay);
        assert!("legendary".parse::<Tier>().is_err());
        for t in Tier::ALL {
            assert_eq!(t.to_string().parse::<Tier>().unwrap(), t);
        }
    }
}
