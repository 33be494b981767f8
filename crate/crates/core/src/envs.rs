//! Deterministic toy continuous-control environments, their analytic expert
//! controllers, and return normalization against random/expert anchors.
//!
//! * `point2d` (PointReach2D): state `(px, py, gx, gy)`, velocity action in
//!   `[-1, 1]^2`, `p' = p + 0.2 a`, reward `-|p' - g|`, horizon 40.
//! * `linreg1d` (LinReg1D): scalar regulator, `s' = 0.9 s + 0.5 a`,
//!   reward `-(s^2 + 0.1 a^2)` at the pre-action state, horizon 20.
//!
//! Dynamics are deterministic; only `reset` draws randomness.

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const POINT_DT: f64 = 0.2;
const POINT_GAIN: f64 = 5.0;
const LIN_DECAY: f64 = 0.9;
const LIN_INPUT: f64 = 0.5;
const LIN_ACTION_COST: f64 = 0.1;

pub const ANCHOR_EPISODES: usize = 200;
const ANCHOR_SEED: u64 = 0x5eed_a11c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    PointReach2D,
    LinReg1D,
}

/// Axis-aligned action bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBox {
    pub fn symmetric(dim: usize, bound: f64) -> Self {
        Self {
            low: vec![-bound; dim],
            high: vec![bound; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn clamp(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(x, (lo, hi))| x.clamp(*lo, *hi))
            .collect()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.dim() && a.iter().zip(self.low.iter().zip(&self.high)).all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEnv {
    kind: EnvKind,
    action_box: ActionBox,
    horizon: usize,
    lqr_gain: f64,
}

impl ToyEnv {
    pub fn point_reach_2d() -> Self {
        Self {
            kind: EnvKind::PointReach2D,
            action_box: ActionBox::symmetric(2, 1.0),
            horizon: 40,
            lqr_gain: 0.0,
        }
    }

    pub fn lin_reg_1d() -> Self {
        Self {
            kind: EnvKind::LinReg1D,
            action_box: ActionBox::symmetric(1, 1.0),
            horizon: 20,
            lqr_gain: riccati_gain(LIN_DECAY, LIN_INPUT, LIN_ACTION_COST),
        }
    }

    pub fn from_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::PointReach2D => Self::point_reach_2d(),
            EnvKind::LinReg1D => Self::lin_reg_1d(),
        }
    }

    /// Registry lookup by config name.
    pub fn by_name(name: &str) -> Result<Self> {
        kind_from_name(name)
            .map(Self::from_kind)
            .ok_or_else(|| Error::invalid_config(format!("unknown env '{name}' (expected point2d or linreg1d)")))
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            EnvKind::PointReach2D => "point2d",
            EnvKind::LinReg1D => "linreg1d",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::PointReach2D => 4,
            EnvKind::LinReg1D => 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_box.dim()
    }

    pub fn action_box(&self) -> &ActionBox {
        &self.action_box
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Stable identifier of the env's dynamics, recorded in dataset headers.
    pub fn fingerprint(&self) -> u64 {
        let desc = format!(
            "{}|{}|{}|{:?}|{:?}|{}|{}|{}|{}|{}",
            self.name(),
            self.state_dim(),
            self.action_dim(),
            self.action_box.low,
            self.action_box.high,
            self.horizon,
            POINT_DT,
            POINT_GAIN,
            LIN_DECAY,
            LIN_INPUT
        );
        // FNV-1a
        desc.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            EnvKind::PointReach2D => (0..4).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            EnvKind::LinReg1D => vec![rng.random_range(-1.0..=1.0)],
        }
    }

    /// Deterministic transition for the `t`-th step of an episode (0-based).
    /// Actions outside the box are clamped first.
    pub fn step(&self, state: &[f64], action: &[f64], t: usize) -> StepOutcome {
        let a = self.action_box.clamp(action);
        let terminal = t + 1 >= self.horizon;
        match self.kind {
            EnvKind::PointReach2D => {
                let (px, py, gx, gy) = (state[0], state[1], state[2], state[3]);
                let nx = px + POINT_DT * a[0];
                let ny = py + POINT_DT * a[1];
                let reward = -((nx - gx).powi(2) + (ny - gy).powi(2)).sqrt();
                StepOutcome {
                    next_state: vec![nx, ny, gx, gy],
                    reward,
                    terminal,
                }
            }
            EnvKind::LinReg1D => {
                let s = state[0];
                StepOutcome {
                    next_state: vec![LIN_DECAY * s + LIN_INPUT * a[0]],
                    reward: -(s * s + LIN_ACTION_COST * a[0] * a[0]),
                    terminal,
                }
            }
        }
    }

    /// Analytic near-optimal controller: clipped proportional-to-goal for
    /// PointReach2D, clipped infinite-horizon LQR feedback for LinReg1D.
    pub fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        let raw = match self.kind {
            EnvKind::PointReach2D => vec![POINT_GAIN * (state[2] - state[0]), POINT_GAIN * (state[3] - state[1])],
            EnvKind::LinReg1D => vec![-self.lqr_gain * state[0]],
        };
        self.action_box.clamp(&raw)
    }

    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.action_box
            .low
            .iter()
            .zip(&self.action_box.high)
            .map(|(lo, hi)| rng.random_range(*lo..=*hi))
            .collect()
    }

    /// Rolls one episode and returns its undiscounted return.
    pub fn rollout<R, F>(&self, rng: &mut R, mut policy: F) -> Result<f64>
    where
        R: Rng + ?Sized,
        F: FnMut(&[f64], &mut R) -> Result<Vec<f64>>,
    {
        let mut state = self.reset(rng);
        let mut total = 0.0;
        for t in 0..self.horizon {
            let action = policy(&state, rng)?;
            if action.len() != self.action_dim() {
                return Err(Error::invalid_input(format!(
                    "policy produced {} action dims, env expects {}",
                    action.len(),
                    self.action_dim()
                )));
            }
            let out = self.step(&state, &action, t);
            total += out.reward;
            state = out.next_state;
            if out.terminal {
                break;
            }
        }
        Ok(total)
    }

    /// Cached (random, expert) anchors for this env.
    pub fn anchors(&self) -> Anchors {
        anchors_for(self.kind)
    }

    pub fn normalized_return(&self, raw_return: f64) -> f64 {
        self.anchors().normalize(raw_return)
    }
}

fn kind_from_name(name: &str) -> Option<EnvKind> {
    match name.to_ascii_lowercase().as_str() {
        "point2d" | "pointreach2d" | "point_reach_2d" => Some(EnvKind::PointReach2D),
        "linreg1d" | "lin_reg_1d" => Some(EnvKind::LinReg1D),
        _ => None,
    }
}

/// Scalar discrete-time LQR feedback gain for `s' = rho s + b a`, cost `s^2 + r a^2`.
fn riccati_gain(rho: f64, b: f64, r: f64) -> f64 {
    let mut p = 1.0;
    for _ in 0..10_000 {
        let next = 1.0 + rho * rho * p - (rho * b * p).powi(2) / (r + b * b * p);
        if (next - p).abs() < 1e-15 {
            p = next;
            break;
        }
        p = next;
    }
    rho * b * p / (r + b * b * p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchors {
    pub random_score: f64,
    pub expert_score: f64,
}

impl Anchors {
    pub fn normalize(&self, raw: f64) -> f64 {
        100.0 * (raw - self.random_score) / (self.expert_score - self.random_score)
    }
}

fn compute_anchors(env: &ToyEnv) -> Anchors {
    let mean = |expert: bool| {
        let total: f64 = (0..ANCHOR_EPISODES as u64)
            .map(|ep| {
                let mut r = rng::derived(ANCHOR_SEED, ep);
                env.rollout(&mut r, |s, r| Ok(if expert { env.expert_action(s) } else { env.random_action(r) }))
                    .expect("analytic controllers match env dims")
            })
            .sum();
        total / ANCHOR_EPISODES as f64
    };
    Anchors {
        random_score: mean(false),
        expert_score: mean(true),
    }
}

fn anchors_for(kind: EnvKind) -> Anchors {
    static POINT: OnceLock<Anchors> = OnceLock::new();
    static LIN: OnceLock<Anchors> = OnceLock::new();
    let cell = match kind {
        EnvKind::PointReach2D => &POINT,
        EnvKind::LinReg1D => &LIN,
    };
    *cell.get_or_init(|| compute_anchors(&ToyEnv::from_kind(kind)))
}

/// Normalization by registry name; unknown names have no anchors.
pub fn normalized_return(env_name: &str, raw_return: f64) -> Result<f64> {
    let kind = kind_from_name(env_name).ok_or_else(|| Error::MissingAnchor(env_name.to_string()))?;
    Ok(anchors_for(kind).normalize(raw_return))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_at_goal_is_fixed_point() {
        let env = ToyEnv::point_reach_2d();
        let s = [0.3, -0.2, 0.3, -0.2];
        let out = env.step(&s, &[0.0, 0.0], 0);
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.next_state, s.to_vec());
    }

    #[test]
    fn linreg_reward_and_determinism() {
        let env = ToyEnv::lin_reg_1d();
        let out = env.step(&[1.0], &[0.0], 0);
        assert_eq!(out.reward, -1.0);
        assert_eq!(env.step(&[0.4], &[0.7], 3), env.step(&[0.4], &[0.7], 3));
    }

    #[test]
    fn terminal_at_horizon_and_clamping() {
        let env = ToyEnv::point_reach_2d();
        let s = [0.0, 0.0, 1.0, 1.0];
        assert!(!env.step(&s, &[0.0, 0.0], 38).terminal);
        assert!(env.step(&s, &[0.0, 0.0], 39).terminal);
        let clamped = env.step(&s, &[5.0, -5.0], 0);
        assert_eq!(clamped.next_state[..2], [0.2, -0.2]);
    }

    #[test]
    fn lqr_gain_solves_riccati() {
        let env = ToyEnv::lin_reg_1d();
        let k = env.lqr_gain;
        // closed loop must be stable and the gain positive
        assert!(k > 0.0 && (LIN_DECAY - LIN_INPUT * k).abs() < 1.0);
    }

    #[test]
    fn normalization_anchors() {
        let env = ToyEnv::point_reach_2d();
        let a = env.anchors();
        assert!(a.expert_score > a.random_score);
        assert!(env.normalized_return(a.random_score).abs() < 1e-12);
        assert!((env.normalized_return(a.expert_score) - 100.0).abs() < 1e-12);
        let mid = 0.5 * (a.random_score + a.expert_score);
        assert!((env.normalized_return(mid) - 50.0).abs() < 1e-9);
        assert!(matches!(normalized_return("halfcheetah", 1.0), Err(Error::MissingAnchor(_))));
        assert_eq!(normalized_return("point2d", mid).unwrap(), env.normalized_return(mid));
    }

    #[test]
    fn unknown_env_name() {
        assert!(matches!(ToyEnv::by_name("walker"), Err(Error::InvalidConfig(_))));
        assert_eq!(ToyEnv::by_name("LinReg1D").unwrap().kind(), EnvKind::LinReg1D);
    }
}
