//! Guidance modules: value estimators trained purely from offline transitions.
//!
//! Two families are provided:
//!
//! * [`DoubleQ`]: twin critics with EMA targets, regressed on
//!   `r + gamma (1 - done) min(Q1'(s', a'), Q2'(s', a'))`.
//! * [`IqlGuidance`]: a critic `Q(s, a)` and value `V(s)` where `V` is fit to
//!   an upper expectile of `Q` and `Q` bootstraps from `V(s')`.
//!
//! A [`GuidanceHandle`] wraps either family with provenance (seed, step count)
//! and a freeze flag. Frozen handles reject every parameter update.
//!
//! Action gradients `grad_a Q(s, a)` come from the critic's input gradient,
//! restricted to the action slice of the `[s; a]` input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{OfflineDataset, Transition};
use crate::envs::ActionBox;
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, Mlp, MlpGrads};
use crate::rng::{self, standard_normal_vec};

/// Below this norm the normalized ascent direction is treated as zero.
pub const GRAD_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceKind {
    DoubleQ,
    Iql,
}

impl GuidanceKind {
    pub fn label(self) -> &'static str {
        match self {
            GuidanceKind::DoubleQ => "double-q",
            GuidanceKind::Iql => "iql",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub gamma: f64,
    /// EMA rate for double-Q targets.
    pub tau_ema: f64,
    /// IQL expectile.
    pub expectile: f64,
    /// IQL inverse temperature for advantage weights.
    pub beta_weight: f64,
    pub w_max: f64,
    pub batch_size: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            learning_rate: 3e-4,
            gamma: 0.99,
            tau_ema: 0.005,
            expectile: 0.7,
            beta_weight: 3.0,
            w_max: 100.0,
            batch_size: 256,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid_config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.tau_ema > 0.0 && self.tau_ema <= 1.0) {
            return Err(Error::invalid_config(format!("tau_ema {} outside (0, 1]", self.tau_ema)));
        }
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return Err(Error::invalid_config(format!("expectile {} outside (0, 1)", self.expectile)));
        }
        if self.beta_weight <= 0.0 || self.w_max <= 0.0 {
            return Err(Error::invalid_config("beta_weight and w_max must be positive"));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::invalid_config("batch_size and learning_rate must be positive"));
        }
        Ok(())
    }

    fn dims(&self, input: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend_from_slice(&self.hidden);
        dims.push(1);
        dims
    }
}

fn concat(s: &[f64], a: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(s.len() + a.len());
    x.extend_from_slice(s);
    x.extend_from_slice(a);
    x
}

fn scalar(net: &Mlp, input: &[f64]) -> Result<f64> {
    Ok(net.forward(input)?[0])
}

/// Asymmetric squared loss `|tau - 1{u < 0}| u^2`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

fn expectile_loss_grad(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    2.0 * w * u
}

#[derive(Debug, Clone)]
pub struct DoubleQ {
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub tau_ema: f64,
    pub gamma: f64,
    state_dim: usize,
    action_dim: usize,
    opt1: AdamState,
    opt2: AdamState,
}

impl DoubleQ {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, cfg: &GuidanceConfig, rng: &mut R) -> Result<Self> {
        let dims = cfg.dims(state_dim + action_dim);
        let q1 = Mlp::new(&dims, cfg.activation, Activation::Identity, rng)?;
        let q2 = Mlp::new(&dims, cfg.activation, Activation::Identity, rng)?;
        let adam = AdamConfig::with_lr(cfg.learning_rate);
        Self::from_networks([q1.clone(), q2.clone(), q1, q2], state_dim, cfg.tau_ema, cfg.gamma, adam)
    }

    /// `nets` is `[q1, q2, q1_target, q2_target]`; the action width is the
    /// critic input width minus `state_dim`.
    pub fn from_networks(nets: [Mlp; 4], state_dim: usize, tau_ema: f64, gamma: f64, adam: AdamConfig) -> Result<Self> {
        let [q1, q2, q1_target, q2_target] = nets;
        for net in [&q2, &q1_target, &q2_target] {
            if net.layer_dims() != q1.layer_dims() {
                return Err(Error::invalid_input("double-Q critics must share layer dims"));
            }
        }
        if q1.output_dim() != 1 || q1.input_dim() <= state_dim {
            return Err(Error::invalid_input(format!(
                "critic dims {:?} incompatible with state width {state_dim}",
                q1.layer_dims()
            )));
        }
        let action_dim = q1.input_dim() - state_dim;
        let opt1 = AdamState::new(&q1, adam);
        let opt2 = AdamState::new(&q2, adam);
        Ok(Self {
            q1,
            q2,
            q1_target,
            q2_target,
            tau_ema,
            gamma,
            state_dim,
            action_dim,
            opt1,
            opt2,
        })
    }

    fn check(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim || a.len() != self.action_dim {
            return Err(Error::invalid_input(format!(
                "expected state {} / action {}, got {} / {}",
                self.state_dim,
                self.action_dim,
                s.len(),
                a.len()
            )));
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt1.config.learning_rate
    }

    pub fn q_values(&self, s: &[f64], a: &[f64]) -> Result<(f64, f64)> {
        self.check(s, a)?;
        let x = concat(s, a);
        Ok((scalar(&self.q1, &x)?, scalar(&self.q2, &x)?))
    }

    pub fn q_min(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let (v1, v2) = self.q_values(s, a)?;
        Ok(v1.min(v2))
    }

    pub fn target_min(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        self.check(s, a)?;
        let x = concat(s, a);
        Ok(scalar(&self.q1_target, &x)?.min(scalar(&self.q2_target, &x)?))
    }

    /// `q_min` and its action gradient, routed through the minimizing critic
    /// (critic 1 on ties).
    pub fn value_and_action_grad(&self, s: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v1, v2) = self.q_values(s, a)?;
        let (value, net) = if v2 < v1 { (v2, &self.q2) } else { (v1, &self.q1) };
        let gx = net.input_grad(&concat(s, a), &[1.0])?;
        Ok((value, gx[self.state_dim..].to_vec()))
    }

    /// One TD step for both critics followed by one EMA step of the targets.
    /// Returns the mean squared TD error averaged over the two critics.
    fn td_update<F>(&mut self, batch: &[Transition<'_>], mut next_action: F) -> Result<f64>
    where
        F: FnMut(&Transition<'_>) -> Result<Vec<f64>>,
    {
        if batch.is_empty() {
            return Err(Error::invalid_input("empty batch"));
        }
        let n = batch.len() as f64;
        let mut g1 = MlpGrads::zeros_like(&self.q1);
        let mut g2 = MlpGrads::zeros_like(&self.q2);
        let mut loss = 0.0;
        for t in batch {
            self.check(t.state, t.action)?;
            let y = if t.terminal {
                t.reward
            } else {
                let a_next = next_action(t)?;
                t.reward + self.gamma * self.target_min(t.next_state, &a_next)?
            };
            let x = concat(t.state, t.action);
            let e1 = scalar(&self.q1, &x)? - y;
            let e2 = scalar(&self.q2, &x)? - y;
            loss += 0.5 * (e1 * e1 + e2 * e2);
            self.q1.backward_accumulate(&x, &[2.0 * e1 / n], &mut g1)?;
            self.q2.backward_accumulate(&x, &[2.0 * e2 / n], &mut g2)?;
        }
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::NumericFailure("non-finite TD loss".into()));
        }
        adam_step(&mut self.q1, &g1, &mut self.opt1)?;
        adam_step(&mut self.q2, &g2, &mut self.opt2)?;
        self.q1_target.ema_toward(&self.q1, self.tau_ema)?;
        self.q2_target.ema_toward(&self.q2, self.tau_ema)?;
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct IqlGuidance {
    pub q: Mlp,
    pub v: Mlp,
    pub expectile: f64,
    pub beta_weight: f64,
    pub w_max: f64,
    pub gamma: f64,
    state_dim: usize,
    action_dim: usize,
    opt_q: AdamState,
    opt_v: AdamState,
}

impl IqlGuidance {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, cfg: &GuidanceConfig, rng: &mut R) -> Result<Self> {
        let q = Mlp::new(&cfg.dims(state_dim + action_dim), cfg.activation, Activation::Identity, rng)?;
        let v = Mlp::new(&cfg.dims(state_dim), cfg.activation, Activation::Identity, rng)?;
        Self::from_networks(q, v, cfg.expectile, cfg.beta_weight, cfg.w_max, cfg.gamma, AdamConfig::with_lr(cfg.learning_rate))
    }

    pub fn from_networks(
        q: Mlp,
        v: Mlp,
        expectile: f64,
        beta_weight: f64,
        w_max: f64,
        gamma: f64,
        adam: AdamConfig,
    ) -> Result<Self> {
        if q.output_dim() != 1 || v.output_dim() != 1 {
            return Err(Error::invalid_input("IQL heads must emit a scalar"));
        }
        let state_dim = v.input_dim();
        if q.input_dim() <= state_dim {
            return Err(Error::invalid_input("IQL critic input must be wider than the value input"));
        }
        let action_dim = q.input_dim() - state_dim;
        let opt_q = AdamState::new(&q, adam);
        let opt_v = AdamState::new(&v, adam);
        Ok(Self {
            q,
            v,
            expectile,
            beta_weight,
            w_max,
            gamma,
            state_dim,
            action_dim,
            opt_q,
            opt_v,
        })
    }

    fn check(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim || a.len() != self.action_dim {
            return Err(Error::invalid_input(format!(
                "expected state {} / action {}, got {} / {}",
                self.state_dim,
                self.action_dim,
                s.len(),
                a.len()
            )));
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt_q.config.learning_rate
    }

    pub fn q_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        self.check(s, a)?;
        scalar(&self.q, &concat(s, a))
    }

    pub fn v_value(&self, s: &[f64]) -> Result<f64> {
        if s.len() != self.state_dim {
            return Err(Error::invalid_input("state length mismatch"));
        }
        scalar(&self.v, s)
    }

    /// `min(exp(beta (Q(s, a) - V(s))), w_max)`.
    pub fn advantage_weight(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let adv = self.q_value(s, a)? - self.v_value(s)?;
        Ok(clipped_exp_weight(adv, self.beta_weight, self.w_max))
    }

    pub fn value_and_action_grad(&self, s: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(s, a)?;
        let x = concat(s, a);
        let value = scalar(&self.q, &x)?;
        let gx = self.q.input_grad(&x, &[1.0])?;
        Ok((value, gx[self.state_dim..].to_vec()))
    }

    /// One expectile step on `V` and one TD step on `Q`, both from the
    /// pre-update parameters. Returns the sum of the two losses.
    fn expectile_update(&mut self, batch: &[Transition<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid_input("empty batch"));
        }
        let n = batch.len() as f64;
        let mut gq = MlpGrads::zeros_like(&self.q);
        let mut gv = MlpGrads::zeros_like(&self.v);
        let (mut loss_v, mut loss_q) = (0.0, 0.0);
        for t in batch {
            self.check(t.state, t.action)?;
            let x = concat(t.state, t.action);
            let q = scalar(&self.q, &x)?;
            let v = scalar(&self.v, t.state)?;
            let u = q - v;
            loss_v += expectile_loss(u, self.expectile);
            // d/dv of loss(q - v)
            self.v
                .backward_accumulate(t.state, &[-expectile_loss_grad(u, self.expectile) / n], &mut gv)?;

            let y = if t.terminal {
                t.reward
            } else {
                t.reward + self.gamma * scalar(&self.v, t.next_state)?
            };
            let e = q - y;
            loss_q += e * e;
            self.q.backward_accumulate(&x, &[2.0 * e / n], &mut gq)?;
        }
        let loss = (loss_v + loss_q) / n;
        if !loss.is_finite() {
            return Err(Error::NumericFailure("non-finite IQL loss".into()));
        }
        adam_step(&mut self.v, &gv, &mut self.opt_v)?;
        adam_step(&mut self.q, &gq, &mut self.opt_q)?;
        Ok(loss)
    }
}

pub fn clipped_exp_weight(advantage: f64, beta: f64, w_max: f64) -> f64 {
    (beta * advantage).exp().min(w_max)
}

#[derive(Debug, Clone)]
pub enum GuidanceModel {
    DoubleQ(DoubleQ),
    Iql(IqlGuidance),
}

/// A guidance module plus provenance and the freeze flag.
#[derive(Debug, Clone)]
pub struct GuidanceHandle {
    model: GuidanceModel,
    state_dim: usize,
    action_dim: usize,
    frozen: bool,
    seed: u64,
    training_steps: u64,
}

impl GuidanceHandle {
    pub fn new_double_q(state_dim: usize, action_dim: usize, cfg: &GuidanceConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::derived(seed, 0);
        let dq = DoubleQ::new(state_dim, action_dim, cfg, &mut r)?;
        Ok(Self::from_model(GuidanceModel::DoubleQ(dq), seed, 0))
    }

    pub fn new_iql(state_dim: usize, action_dim: usize, cfg: &GuidanceConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::derived(seed, 0);
        let iql = IqlGuidance::new(state_dim, action_dim, cfg, &mut r)?;
        Ok(Self::from_model(GuidanceModel::Iql(iql), seed, 0))
    }

    pub fn new(kind: GuidanceKind, state_dim: usize, action_dim: usize, cfg: &GuidanceConfig, seed: u64) -> Result<Self> {
        match kind {
            GuidanceKind::DoubleQ => Self::new_double_q(state_dim, action_dim, cfg, seed),
            GuidanceKind::Iql => Self::new_iql(state_dim, action_dim, cfg, seed),
        }
    }

    /// Wraps an existing model, unfrozen.
    pub fn from_model(model: GuidanceModel, seed: u64, training_steps: u64) -> Self {
        let (state_dim, action_dim) = match &model {
            GuidanceModel::DoubleQ(dq) => (dq.state_dim, dq.action_dim),
            GuidanceModel::Iql(iql) => (iql.state_dim, iql.action_dim),
        };
        Self {
            model,
            state_dim,
            action_dim,
            frozen: false,
            seed,
            training_steps,
        }
    }

    pub fn kind(&self) -> GuidanceKind {
        match self.model {
            GuidanceModel::DoubleQ(_) => GuidanceKind::DoubleQ,
            GuidanceModel::Iql(_) => GuidanceKind::Iql,
        }
    }

    pub fn model(&self) -> &GuidanceModel {
        &self.model
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn training_steps(&self) -> u64 {
        self.training_steps
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Mutable model access; refused while frozen.
    pub fn model_mut(&mut self) -> Result<&mut GuidanceModel> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.model)
    }

    pub fn as_double_q(&self) -> Result<&DoubleQ> {
        match &self.model {
            GuidanceModel::DoubleQ(dq) => Ok(dq),
            GuidanceModel::Iql(_) => Err(Error::KindMismatch {
                expected: GuidanceKind::DoubleQ.label(),
                found: GuidanceKind::Iql.label(),
            }),
        }
    }

    pub fn as_iql(&self) -> Result<&IqlGuidance> {
        match &self.model {
            GuidanceModel::Iql(iql) => Ok(iql),
            GuidanceModel::DoubleQ(_) => Err(Error::KindMismatch {
                expected: GuidanceKind::Iql.label(),
                found: GuidanceKind::DoubleQ.label(),
            }),
        }
    }

    /// `min(Q1, Q2)` for double-Q, `Q` for IQL.
    pub fn q_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        match &self.model {
            GuidanceModel::DoubleQ(dq) => dq.q_min(s, a),
            GuidanceModel::Iql(iql) => iql.q_value(s, a),
        }
    }

    pub fn q_min(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        self.as_double_q()?.q_min(s, a)
    }

    /// Detached value used to normalize the policy's Q loss: target-critic
    /// minimum for double-Q, `Q` itself for IQL.
    pub fn target_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        match &self.model {
            GuidanceModel::DoubleQ(dq) => dq.target_min(s, a),
            GuidanceModel::Iql(iql) => iql.q_value(s, a),
        }
    }

    pub fn value_and_action_grad(&self, s: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>)> {
        match &self.model {
            GuidanceModel::DoubleQ(dq) => dq.value_and_action_grad(s, a),
            GuidanceModel::Iql(iql) => iql.value_and_action_grad(s, a),
        }
    }

    pub fn grad_q_wrt_action(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_action_grad(s, a)?.1)
    }

    pub fn advantage_weight(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        self.as_iql()?.advantage_weight(s, a)
    }

    /// `clamp(a0 + lambda * grad_a Q(s, a0))` into the action box.
    pub fn guide_action(&self, s: &[f64], a0: &[f64], lambda: f64, bounds: &ActionBox) -> Result<Vec<f64>> {
        if !lambda.is_finite() {
            return Err(Error::invalid_input("guidance scale must be finite"));
        }
        if lambda == 0.0 {
            return Ok(bounds.clamp(a0));
        }
        let g = self.grad_q_wrt_action(s, a0)?;
        let guided: Vec<f64> = a0.iter().zip(&g).map(|(a, g)| a + lambda * g).collect();
        Ok(bounds.clamp(&guided))
    }

    pub fn td_update_double_q<F>(&mut self, batch: &[Transition<'_>], next_action: F) -> Result<f64>
    where
        F: FnMut(&Transition<'_>) -> Result<Vec<f64>>,
    {
        let loss = match self.model_mut()? {
            GuidanceModel::DoubleQ(dq) => dq.td_update(batch, next_action)?,
            GuidanceModel::Iql(_) => {
                return Err(Error::KindMismatch {
                    expected: GuidanceKind::DoubleQ.label(),
                    found: GuidanceKind::Iql.label(),
                })
            }
        };
        self.training_steps += 1;
        Ok(loss)
    }

    pub fn iql_expectile_update(&mut self, batch: &[Transition<'_>]) -> Result<f64> {
        let loss = match self.model_mut()? {
            GuidanceModel::Iql(iql) => iql.expectile_update(batch)?,
            GuidanceModel::DoubleQ(_) => {
                return Err(Error::KindMismatch {
                    expected: GuidanceKind::Iql.label(),
                    found: GuidanceKind::DoubleQ.label(),
                })
            }
        };
        self.training_steps += 1;
        Ok(loss)
    }

    /// One update of whichever family this is, with dataset next-actions for
    /// double-Q.
    pub fn offline_update(&mut self, dataset: &OfflineDataset, indices: &[usize]) -> Result<f64> {
        let batch: Vec<Transition<'_>> = indices.iter().map(|&i| dataset.transition(i)).collect();
        match self.kind() {
            GuidanceKind::DoubleQ => {
                let lookup: Vec<(usize, &[f64])> = indices
                    .iter()
                    .map(|&i| (i, dataset.next_action(i).unwrap_or(dataset.action(i))))
                    .collect();
                let mut cursor = 0usize;
                self.td_update_double_q(&batch, |_| {
                    let a = lookup[cursor].1.to_vec();
                    cursor += 1;
                    Ok(a)
                })
            }
            GuidanceKind::Iql => self.iql_expectile_update(&batch),
        }
    }

    /// Runs [`annealed_guided_chain`] on this module's `Q(s, .)`.
    pub fn annealed_chain<R: Rng + ?Sized>(
        &self,
        s: &[f64],
        a_init: &[f64],
        step_sizes: &[f64],
        temperatures: &[f64],
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let mut err = None;
        let traj = annealed_guided_chain(
            |a| match self.grad_q_wrt_action(s, a) {
                Ok(g) => g,
                Err(e) => {
                    err.get_or_insert(e);
                    vec![0.0; a.len()]
                }
            },
            a_init,
            step_sizes,
            temperatures,
            rng,
        );
        match err {
            Some(e) => Err(e),
            None => Ok(traj),
        }
    }
}

/// `a_{t+1} = a_t + eta_t grad/|grad| + sqrt(2 tau_t) xi_t`, returning all
/// `T + 1` iterates. Gradients with norm below [`GRAD_NORM_FLOOR`] give a
/// zero direction.
pub fn annealed_guided_chain<G, R>(
    mut grad: G,
    a_init: &[f64],
    step_sizes: &[f64],
    temperatures: &[f64],
    rng: &mut R,
) -> Vec<Vec<f64>>
where
    G: FnMut(&[f64]) -> Vec<f64>,
    R: Rng + ?Sized,
{
    assert_eq!(step_sizes.len(), temperatures.len(), "one temperature per step");
    let mut traj = Vec::with_capacity(step_sizes.len() + 1);
    traj.push(a_init.to_vec());
    for (eta, tau) in step_sizes.iter().zip(temperatures) {
        let a = traj.last().expect("non-empty");
        let g = grad(a);
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = if norm < GRAD_NORM_FLOOR { 0.0 } else { eta / norm };
        let noise_scale = (2.0 * tau).sqrt();
        let xi = if *tau > 0.0 {
            standard_normal_vec(rng, a.len())
        } else {
            vec![0.0; a.len()]
        };
        let next = a
            .iter()
            .zip(&g)
            .zip(&xi)
            .map(|((a, g), z)| a + scale * g + noise_scale * z)
            .collect();
        traj.push(next);
    }
    traj
}

/// Trains a fresh guidance module on the dataset alone and returns it frozen.
pub fn pretrain_guidance(
    kind: GuidanceKind,
    dataset: &OfflineDataset,
    cfg: &GuidanceConfig,
    steps: u64,
    seed: u64,
) -> Result<GuidanceHandle> {
    if dataset.is_empty() {
        return Err(Error::invalid_config("cannot pretrain guidance on an empty dataset"));
    }
    dataset.check_coherent()?;
    let mut handle = GuidanceHandle::new(kind, dataset.state_dim(), dataset.action_dim(), cfg, seed)?;
    let mut batch_rng = rng::derived(seed, 1);
    for step in 0..steps {
        let idx = dataset.sample_indices(cfg.batch_size, &mut batch_rng);
        handle
            .offline_update(dataset, &idx)
            .map_err(|e| annotate_step(e, step))?;
    }
    handle.freeze();
    Ok(handle)
}

pub(crate) fn annotate_step(e: Error, step: u64) -> Error {
    match e {
        Error::NumericFailure(msg) => Error::NumericFailure(format!("step {step}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Tier;
    use crate::nn::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> GuidanceConfig {
        GuidanceConfig {
            hidden: vec![16, 16],
            activation: Activation::Tanh,
            ..Default::default()
        }
    }

    fn constant_critic(input: usize, c: f64) -> Mlp {
        Mlp::from_parts(&[input, 1], vec![vec![0.0; input]], vec![vec![c]], Activation::Identity, Activation::Identity)
            .unwrap()
    }

    fn linear_critic(w: Vec<f64>) -> Mlp {
        let n = w.len();
        Mlp::from_parts(&[n, 1], vec![w], vec![vec![0.0]], Activation::Identity, Activation::Identity).unwrap()
    }

    fn dq_handle(q1: Mlp, q2: Mlp, sd: usize, ad: usize) -> GuidanceHandle {
        assert_eq!(q1.input_dim(), sd + ad);
        let dq = DoubleQ::from_networks([q1.clone(), q2.clone(), q1, q2], sd, 0.005, 0.99, AdamConfig::default()).unwrap();
        GuidanceHandle::from_model(GuidanceModel::DoubleQ(dq), 0, 0)
    }

    #[test]
    fn q_min_of_constant_critics() {
        let h = dq_handle(constant_critic(3, 2.0), constant_critic(3, 3.0), 2, 1);
        assert_eq!(h.q_min(&[0.1, 0.2], &[0.3]).unwrap(), 2.0);
        let h = dq_handle(constant_critic(3, 3.0), constant_critic(3, 2.0), 2, 1);
        assert_eq!(h.q_min(&[0.1, 0.2], &[0.3]).unwrap(), 2.0);
    }

    #[test]
    fn q_min_matches_separate_forwards() {
        let h = GuidanceHandle::new_double_q(3, 2, &small_cfg(), 9).unwrap();
        let dq = h.as_double_q().unwrap();
        let (s, a) = ([0.1, -0.5, 0.9], [0.3, -0.2]);
        let x = concat(&s, &a);
        let expect = dq.q1.forward(&x).unwrap()[0].min(dq.q2.forward(&x).unwrap()[0]);
        assert_eq!(h.q_min(&s, &a).unwrap(), expect);
        assert!(h.q_min(&s, &a).unwrap() <= dq.q1.forward(&x).unwrap()[0]);
        assert!(matches!(h.q_min(&s, &[0.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn identical_critics_agree() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let q = Mlp::new(&[3, 8, 1], Activation::Tanh, Activation::Identity, &mut r).unwrap();
        let h = dq_handle(q.clone(), q.clone(), 2, 1);
        let (v1, v2) = h.as_double_q().unwrap().q_values(&[0.3, 0.1], &[0.5]).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(h.q_min(&[0.3, 0.1], &[0.5]).unwrap(), v1);
    }

    #[test]
    fn action_grad_of_linear_and_zero_critics() {
        let h = dq_handle(linear_critic(vec![1.0, 2.0, 3.0, 4.0]), linear_critic(vec![1.0, 2.0, 3.0, 4.0]), 2, 2);
        assert_eq!(h.grad_q_wrt_action(&[0.5, 0.5], &[0.1, 0.9]).unwrap(), vec![3.0, 4.0]);
        assert_eq!(h.grad_q_wrt_action(&[0.5, 0.5], &[-3.0, 7.0]).unwrap(), vec![3.0, 4.0]);
        let z = dq_handle(linear_critic(vec![0.0; 4]), linear_critic(vec![0.0; 4]), 2, 2);
        assert_eq!(z.grad_q_wrt_action(&[0.5, 0.5], &[0.1, 0.9]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn action_grad_matches_finite_differences() {
        for kind in [GuidanceKind::DoubleQ, GuidanceKind::Iql] {
            let h = GuidanceHandle::new(kind, 3, 2, &small_cfg(), 21).unwrap();
            let s = [0.2, -0.4, 0.6];
            let a = [0.15, -0.35];
            let g = h.grad_q_wrt_action(&s, &a).unwrap();
            let fd = finite_diff_grad(|a| h.q_value(&s, a).unwrap(), &a, 1e-5);
            for (x, y) in g.iter().zip(&fd) {
                assert!((x - y).abs() <= 1e-4 * y.abs().max(1e-2), "{kind:?}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn guide_action_cases() {
        let bounds = ActionBox::symmetric(2, 1.0);
        let h = GuidanceHandle::new_double_q(2, 2, &small_cfg(), 3).unwrap();
        let a0 = [0.2, -0.3];
        assert_eq!(h.guide_action(&[0.0, 0.0], &a0, 0.0, &bounds).unwrap(), a0.to_vec());

        let lin = dq_handle(linear_critic(vec![0.0, 0.0, 3.0, -4.0]), linear_critic(vec![0.0, 0.0, 3.0, -4.0]), 2, 2);
        let g = lin.guide_action(&[0.0, 0.0], &a0, 0.1, &bounds).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.7).abs() < 1e-12);
        let big = lin.guide_action(&[0.0, 0.0], &a0, 10.0, &bounds).unwrap();
        assert_eq!(big, vec![1.0, -1.0]);

        let s = [0.4, -0.1];
        let guided = h.guide_action(&s, &a0, 0.1, &bounds).unwrap();
        let fd = finite_diff_grad(|a| h.q_value(&s, a).unwrap(), &a0, 1e-5);
        for i in 0..2 {
            assert!((guided[i] - (a0[i] + 0.1 * fd[i])).abs() < 1e-3);
        }
        assert!(h.guide_action(&s, &a0, f64::NAN, &bounds).is_err());
    }

    #[test]
    fn advantage_weight_formula() {
        assert_eq!(clipped_exp_weight(0.0, 3.0, 100.0), 1.0);
        assert!((clipped_exp_weight(1.0, 3.0, 100.0) - 3f64.exp()).abs() < 1e-12);
        assert_eq!(clipped_exp_weight(10.0, 3.0, 100.0), 100.0);
        let w = clipped_exp_weight(-200.0, 3.0, 100.0);
        assert!(w > 0.0 && w < clipped_exp_weight(-100.0, 3.0, 100.0));
    }

    #[test]
    fn expectile_half_is_half_squared_error() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let u: f64 = r.random_range(-10.0..10.0);
            assert_eq!(expectile_loss(u, 0.5), 0.5 * u * u);
        }
    }

    fn transitions(ds: &OfflineDataset) -> Vec<Transition<'_>> {
        (0..ds.len()).map(|i| ds.transition(i)).collect()
    }

    #[test]
    fn frozen_handle_rejects_updates() {
        let ds = OfflineDataset::from_columns(1, 1, vec![0.0], vec![0.0], vec![1.0], vec![0.0], vec![true], Tier::Expert, "t", 0, 0)
            .unwrap();
        let cfg = GuidanceConfig {
            batch_size: 1,
            ..small_cfg()
        };
        let mut h = pretrain_guidance(GuidanceKind::DoubleQ, &ds, &cfg, 3, 1).unwrap();
        assert!(h.is_frozen());
        let before = h.as_double_q().unwrap().q1.params_flat();
        let batch = transitions(&ds);
        assert!(matches!(h.td_update_double_q(&batch, |t| Ok(t.action.to_vec())), Err(Error::Frozen)));
        assert!(matches!(h.model_mut(), Err(Error::Frozen)));
        let _ = h.q_min(&[0.0], &[0.0]).unwrap();
        let _ = h.grad_q_wrt_action(&[0.0], &[0.0]).unwrap();
        assert_eq!(before, h.as_double_q().unwrap().q1.params_flat());
    }

    #[test]
    fn kind_mismatch_errors() {
        let mut h = GuidanceHandle::new_iql(1, 1, &small_cfg(), 0).unwrap();
        let ds = OfflineDataset::from_columns(1, 1, vec![0.0], vec![0.0], vec![1.0], vec![0.0], vec![true], Tier::Expert, "t", 0, 0)
            .unwrap();
        let batch = transitions(&ds);
        assert!(matches!(h.td_update_double_q(&batch, |t| Ok(t.action.to_vec())), Err(Error::KindMismatch { .. })));
        assert!(matches!(h.q_min(&[0.0], &[0.0]), Err(Error::KindMismatch { .. })));
        let dq = GuidanceHandle::new_double_q(1, 1, &small_cfg(), 0).unwrap();
        assert!(matches!(dq.advantage_weight(&[0.0], &[0.0]), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = OfflineDataset::from_columns(1, 1, vec![], vec![], vec![], vec![], vec![], Tier::Expert, "t", 0, 0).unwrap();
        assert!(matches!(
            pretrain_guidance(GuidanceKind::Iql, &ds, &small_cfg(), 1, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn single_transition_gamma_zero_regresses_to_reward() {
        let ds = OfflineDataset::from_columns(
            2,
            1,
            vec![0.3, -0.2],
            vec![0.5],
            vec![1.0],
            vec![0.4, -0.2],
            vec![false],
            Tier::Expert,
            "t",
            0,
            0,
        )
        .unwrap();
        // not coherent (s' never appears), so drive updates directly
        let cfg = GuidanceConfig {
            gamma: 0.0,
            learning_rate: 3e-3,
            batch_size: 1,
            ..small_cfg()
        };
        let mut h = GuidanceHandle::new_double_q(2, 1, &cfg, 5).unwrap();
        let batch = transitions(&ds);
        for _ in 0..1500 {
            h.td_update_double_q(&batch, |t| Ok(t.action.to_vec())).unwrap();
        }
        assert!((h.q_min(&[0.3, -0.2], &[0.5]).unwrap() - 1.0).abs() < 0.01);

        let mut iql = GuidanceHandle::new_iql(2, 1, &cfg, 5).unwrap();
        for _ in 0..1500 {
            iql.iql_expectile_update(&batch).unwrap();
        }
        assert!((iql.q_value(&[0.3, -0.2], &[0.5]).unwrap() - 1.0).abs() < 0.01);
    }

    #[test]
    fn terminal_target_ignores_next_state() {
        // gamma large, terminal transition: target stays r
        let ds = OfflineDataset::from_columns(1, 1, vec![0.0], vec![0.0], vec![0.5], vec![9.0], vec![true], Tier::Expert, "t", 0, 0)
            .unwrap();
        let cfg = GuidanceConfig {
            gamma: 0.95,
            learning_rate: 3e-3,
            batch_size: 1,
            ..small_cfg()
        };
        let mut h = GuidanceHandle::new_double_q(1, 1, &cfg, 2).unwrap();
        let batch = transitions(&ds);
        for _ in 0..1500 {
            h.td_update_double_q(&batch, |_| panic!("terminal transitions never query a'")).unwrap();
        }
        assert!((h.q_min(&[0.0], &[0.0]).unwrap() - 0.5).abs() < 0.01);
    }

    #[test]
    fn chain_with_zero_gradient_is_stationary() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let traj = annealed_guided_chain(|a| vec![0.0; a.len()], &[0.3, 0.4], &[0.1; 5], &[0.0; 5], &mut r);
        assert_eq!(traj.len(), 6);
        assert!(traj.iter().all(|a| a == &vec![0.3, 0.4]));
    }

    #[test]
    fn chain_marches_to_origin_on_radial_field() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        // Q = -|a|^2, grad = -2a
        let traj = annealed_guided_chain(
            |a| a.iter().map(|x| -2.0 * x).collect(),
            &[1.0, 0.0],
            &[0.1; 10],
            &[0.0; 10],
            &mut r,
        );
        for (t, a) in traj.iter().enumerate() {
            let expect = (1.0 - 0.1 * t as f64).max(0.0);
            let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
            assert!((norm - expect).abs() <= 0.1 + 1e-12, "t={t}: {norm}");
            assert_eq!(a[1], 0.0);
        }
    }
}
