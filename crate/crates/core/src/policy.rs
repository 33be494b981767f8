//! Diffusion policy: a conditional noise-prediction network `eps(a_k, k, s)`
//! trained by denoising, optionally pushed toward high value by a guidance
//! critic, and sampled by the full reverse chain or a one-step reconstruction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::ActionBox;
use crate::error::{Error, Result};
use crate::guidance::GuidanceHandle;
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, Mlp, MlpGrads};
use crate::rng::{self, standard_normal_vec};
use crate::schedule::NoiseSchedule;

/// Floor on the magnitude of the Q-loss normalizer.
pub const Q_NORM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dql,
    Idql,
    Edp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Dql, Algorithm::Idql, Algorithm::Edp];

    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Dql => "dql",
            Algorithm::Idql => "idql",
            Algorithm::Edp => "edp",
        }
    }

    pub fn default_sampler(self) -> SamplerMode {
        match self {
            Algorithm::Edp => SamplerMode::OneStepEdp,
            _ => SamplerMode::FullReverse,
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dql" => Ok(Algorithm::Dql),
            "idql" => Ok(Algorithm::Idql),
            "edp" => Ok(Algorithm::Edp),
            other => Err(Error::invalid_config(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    FullReverse,
    OneStepEdp,
}

/// How the Q-loss gradient reaches the noise network under the full
/// reverse sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QGradPath {
    /// Backpropagate through every reverse step.
    FullChain,
    /// Only through the final `a_1 -> a_0` step.
    LastStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub time_embed_dim: usize,
    /// Overrides the algorithm's default sampler.
    pub sampler: Option<SamplerMode>,
    pub q_grad_path: QGradPath,
    /// Noise level used by the one-step sampler; defaults to the last step.
    pub one_step_k: Option<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            learning_rate: 3e-4,
            diffusion_steps: 16,
            beta_min: 1e-4,
            beta_max: 0.1,
            time_embed_dim: 16,
            sampler: None,
            q_grad_path: QGradPath::FullChain,
            one_step_k: None,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid_config("time_embed_dim must be a positive even number"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid_config("learning_rate must be positive"));
        }
        if let Some(k) = self.one_step_k {
            if k == 0 || k > self.diffusion_steps {
                return Err(Error::invalid_config(format!("one_step_k {k} outside 1..={}", self.diffusion_steps)));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding of the step index: `[sin(k w_i)..., cos(k w_i)...]`
/// with `w_i = 10000^(-i / (dim / 2))`.
pub fn time_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let arg = k as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Loss terms from one actor step; `l_actor = l_diff + eta * l_q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_diff: f64,
    pub l_q: f64,
    pub l_actor: f64,
    pub eta: f64,
}

impl LossBundle {
    pub fn new(l_diff: f64, l_q: f64, eta: f64) -> Self {
        Self {
            l_diff,
            l_q,
            l_actor: l_diff + eta * l_q,
            eta,
        }
    }

    pub fn identity_gap(&self) -> f64 {
        (self.l_actor - (self.l_diff + self.eta * self.l_q)).abs()
    }
}

/// Where the policy's value signal comes from.
#[derive(Debug, Clone, Copy)]
pub enum QSource<'a> {
    Critic(&'a GuidanceHandle),
    /// Each query yields a fresh standard-normal value and an independent
    /// standard-normal action gradient.
    Noise,
}

#[derive(Debug, Clone)]
pub struct DiffusionPolicy {
    algorithm: Algorithm,
    state_dim: usize,
    action_dim: usize,
    eps_net: Mlp,
    schedule: NoiseSchedule,
    time_embed_dim: usize,
    sampler: SamplerMode,
    q_grad_path: QGradPath,
    one_step_k: usize,
    action_box: ActionBox,
    seed: u64,
    training_steps: u64,
    embeddings: Vec<Vec<f64>>,
    optimizer: AdamState,
}

/// Reverse-chain record for one state: the network input at each step from
/// `K` down to 1, and the unclamped final action.
struct ChainTape {
    inputs: Vec<(usize, Vec<f64>)>,
    a0: Vec<f64>,
}

impl DiffusionPolicy {
    pub fn new(
        algorithm: Algorithm,
        state_dim: usize,
        action_box: ActionBox,
        cfg: &PolicyConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let action_dim = action_box.dim();
        let mut dims = vec![action_dim + cfg.time_embed_dim + state_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(action_dim);
        let mut r = rng::derived(seed, 0);
        let eps_net = Mlp::new(&dims, cfg.activation, Activation::Identity, &mut r)?;
        let schedule = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)?;
        let one_step_k = cfg.one_step_k.unwrap_or(cfg.diffusion_steps);
        Self::from_parts(
            algorithm,
            state_dim,
            eps_net,
            schedule,
            cfg.time_embed_dim,
            cfg.sampler.unwrap_or(algorithm.default_sampler()),
            cfg.q_grad_path,
            one_step_k,
            action_box,
            seed,
            0,
            AdamConfig::with_lr(cfg.learning_rate),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        algorithm: Algorithm,
        state_dim: usize,
        eps_net: Mlp,
        schedule: NoiseSchedule,
        time_embed_dim: usize,
        sampler: SamplerMode,
        q_grad_path: QGradPath,
        one_step_k: usize,
        action_box: ActionBox,
        seed: u64,
        training_steps: u64,
        adam: AdamConfig,
    ) -> Result<Self> {
        let action_dim = action_box.dim();
        if action_dim == 0 || state_dim == 0 {
            return Err(Error::invalid_input("policy dims must be positive"));
        }
        if time_embed_dim == 0 || !time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid_input("time embedding dim must be a positive even number"));
        }
        if eps_net.input_dim() != action_dim + time_embed_dim + state_dim || eps_net.output_dim() != action_dim {
            return Err(Error::invalid_input(format!(
                "noise network dims {:?} do not fit action {action_dim}, embedding {time_embed_dim}, state {state_dim}",
                eps_net.layer_dims()
            )));
        }
        if one_step_k == 0 || one_step_k > schedule.steps() {
            return Err(Error::invalid_input("one-step noise level out of range"));
        }
        let embeddings = (0..=schedule.steps())
            .map(|k| time_embedding(k, time_embed_dim))
            .collect();
        let optimizer = AdamState::new(&eps_net, adam);
        Ok(Self {
            algorithm,
            state_dim,
            action_dim,
            eps_net,
            schedule,
            time_embed_dim,
            sampler,
            q_grad_path,
            one_step_k,
            action_box,
            seed,
            training_steps,
            embeddings,
            optimizer,
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn eps_net(&self) -> &Mlp {
        &self.eps_net
    }

    /// Direct parameter access for tests and tooling; bypasses the optimizer.
    pub fn eps_net_mut(&mut self) -> &mut Mlp {
        &mut self.eps_net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn time_embed_dim(&self) -> usize {
        self.time_embed_dim
    }

    pub fn sampler(&self) -> SamplerMode {
        self.sampler
    }

    pub fn set_sampler(&mut self, sampler: SamplerMode) {
        self.sampler = sampler;
    }

    pub fn q_grad_path(&self) -> QGradPath {
        self.q_grad_path
    }

    pub fn one_step_k(&self) -> usize {
        self.one_step_k
    }

    pub fn action_box(&self) -> &ActionBox {
        &self.action_box
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn training_steps(&self) -> u64 {
        self.training_steps
    }

    pub fn learning_rate(&self) -> f64 {
        self.optimizer.config.learning_rate
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(Error::invalid_input(format!(
                "expected state of length {}, got {}",
                self.state_dim,
                s.len()
            )));
        }
        Ok(())
    }

    fn check_action(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.action_dim {
            return Err(Error::invalid_input(format!(
                "expected action of length {}, got {}",
                self.action_dim,
                a.len()
            )));
        }
        Ok(())
    }

    fn net_input(&self, a_k: &[f64], k: usize, s: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.eps_net.input_dim());
        x.extend_from_slice(a_k);
        x.extend_from_slice(&self.embeddings[k]);
        x.extend_from_slice(s);
        x
    }

    /// Raw noise prediction `eps(a_k, k, s)`.
    pub fn predict_noise(&self, s: &[f64], a_k: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_state(s)?;
        self.check_action(a_k)?;
        self.schedule.alpha_bar(k)?;
        self.eps_net.forward(&self.net_input(a_k, k, s))
    }

    /// `eps(a_k, k, s) + alpha * grad_a Q(s, a_k)`.
    pub fn guided_eps(&self, guidance: &GuidanceHandle, s: &[f64], a_k: &[f64], k: usize, alpha: f64) -> Result<Vec<f64>> {
        if !alpha.is_finite() {
            return Err(Error::invalid_input("alpha must be finite"));
        }
        let mut eps = self.predict_noise(s, a_k, k)?;
        if alpha != 0.0 {
            let g = guidance.grad_q_wrt_action(s, a_k)?;
            for (e, g) in eps.iter_mut().zip(&g) {
                *e += alpha * g;
            }
        }
        Ok(eps)
    }

    fn noise_estimate(&self, s: &[f64], a_k: &[f64], k: usize, perturb: Option<(&GuidanceHandle, f64)>) -> Result<Vec<f64>> {
        match perturb {
            Some((g, alpha)) if alpha != 0.0 => self.guided_eps(g, s, a_k, k, alpha),
            _ => self.eps_net.forward(&self.net_input(a_k, k, s)),
        }
    }

    /// Unclamped action from the active sampler, optionally with noise
    /// perturbation by a critic.
    fn raw_sample<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R, perturb: Option<(&GuidanceHandle, f64)>) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let prior = standard_normal_vec(rng, self.action_dim);
        match self.sampler {
            SamplerMode::FullReverse => {
                let mut a = prior;
                for k in (1..=self.schedule.steps()).rev() {
                    let eps = self.noise_estimate(s, &a, k, perturb)?;
                    a = self.schedule.ddpm_reverse_step(&eps, &a, k, rng)?;
                }
                Ok(a)
            }
            SamplerMode::OneStepEdp => {
                let k = self.one_step_k;
                let eps = self.noise_estimate(s, &prior, k, perturb)?;
                self.schedule.reconstruct_a0(&prior, k, &eps)
            }
        }
    }

    /// Draws an action, applies inference guidance when a handle is given,
    /// and clamps to the action box.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        s: &[f64],
        rng: &mut R,
        inference_guidance: Option<&GuidanceHandle>,
        lambda: f64,
    ) -> Result<Vec<f64>> {
        self.sample_action_with_alpha(s, rng, inference_guidance, lambda, 0.0)
    }

    /// Like [`sample_action`](Self::sample_action), additionally perturbing
    /// every noise estimate by `alpha * grad_a Q` of the inference handle.
    pub fn sample_action_with_alpha<R: Rng + ?Sized>(
        &self,
        s: &[f64],
        rng: &mut R,
        inference_guidance: Option<&GuidanceHandle>,
        lambda: f64,
        alpha: f64,
    ) -> Result<Vec<f64>> {
        let perturb = inference_guidance.map(|g| (g, alpha));
        let a0 = self.raw_sample(s, rng, perturb)?;
        match inference_guidance {
            Some(g) if lambda != 0.0 => g.guide_action(s, &a0, lambda, &self.action_box),
            _ => Ok(self.action_box.clamp(&a0)),
        }
    }

    fn check_batch(&self, states: &[&[f64]], actions: Option<&[&[f64]]>) -> Result<()> {
        if states.is_empty() {
            return Err(Error::invalid_input("empty batch"));
        }
        for s in states {
            self.check_state(s)?;
        }
        if let Some(actions) = actions {
            if actions.len() != states.len() {
                return Err(Error::invalid_input("states and actions differ in batch length"));
            }
            for a in actions {
                self.check_action(a)?;
            }
        }
        Ok(())
    }

    /// Per-element denoising losses `mean_j (eps_hat_j - eps_j)^2` and, when
    /// `weights` is given, gradients of `(1/B) sum_i w_i l_i`.
    fn denoising_terms<R: Rng + ?Sized>(
        &self,
        states: &[&[f64]],
        actions: &[&[f64]],
        weights: Option<&[f64]>,
        rng: &mut R,
        grads: Option<&mut MlpGrads>,
    ) -> Result<Vec<f64>> {
        self.check_batch(states, Some(actions))?;
        let n = states.len() as f64;
        let d = self.action_dim as f64;
        let steps = self.schedule.steps();
        let mut per_element = Vec::with_capacity(states.len());
        let mut grads = grads;
        for (i, (s, a0)) in states.iter().zip(actions).enumerate() {
            let k = rng.random_range(1..=steps);
            let eps = standard_normal_vec(rng, self.action_dim);
            let a_k = self.schedule.forward_noise(a0, k, &eps)?;
            let x = self.net_input(&a_k, k, s);
            let pred = self.eps_net.forward(&x)?;
            let loss = pred.iter().zip(&eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / d;
            per_element.push(loss);
            if let Some(g) = grads.as_deref_mut() {
                let w = weights.map_or(1.0, |w| w[i]);
                let out_grad: Vec<f64> = pred.iter().zip(&eps).map(|(p, e)| 2.0 * w * (p - e) / (d * n)).collect();
                self.eps_net.backward_accumulate(&x, &out_grad, g)?;
            }
        }
        Ok(per_element)
    }

    /// Denoising loss and its parameter gradient.
    pub fn diffusion_loss_grad<R: Rng + ?Sized>(&self, states: &[&[f64]], actions: &[&[f64]], rng: &mut R) -> Result<(f64, MlpGrads)> {
        let mut g = MlpGrads::zeros_like(&self.eps_net);
        let losses = self.denoising_terms(states, actions, None, rng, Some(&mut g))?;
        Ok((mean(&losses), g))
    }

    /// Mean squared error between predicted and injected noise at a random
    /// step per element.
    pub fn diffusion_loss<R: Rng + ?Sized>(&self, states: &[&[f64]], actions: &[&[f64]], rng: &mut R) -> Result<f64> {
        Ok(mean(&self.denoising_terms(states, actions, None, rng, None)?))
    }

    /// `(1/B) sum_i w_i l_i` over per-element denoising losses, and its gradient.
    pub fn weighted_denoising_loss_grad<R: Rng + ?Sized>(
        &self,
        states: &[&[f64]],
        actions: &[&[f64]],
        weights: &[f64],
        rng: &mut R,
    ) -> Result<(f64, MlpGrads)> {
        if weights.len() != states.len() {
            return Err(Error::invalid_input("one weight per batch element required"));
        }
        let mut g = MlpGrads::zeros_like(&self.eps_net);
        let losses = self.denoising_terms(states, actions, Some(weights), rng, Some(&mut g))?;
        let loss = losses.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>() / losses.len() as f64;
        Ok((loss, g))
    }

    /// Advantage-weighted denoising loss with weights `w(s_i, a_i)` from IQL
    /// guidance, and its gradient.
    pub fn iql_weighted_bc_loss_grad<R: Rng + ?Sized>(
        &self,
        guidance: &GuidanceHandle,
        states: &[&[f64]],
        actions: &[&[f64]],
        rng: &mut R,
    ) -> Result<(f64, MlpGrads)> {
        let iql = guidance.as_iql()?;
        self.check_batch(states, Some(actions))?;
        let weights = states
            .iter()
            .zip(actions)
            .map(|(s, a)| iql.advantage_weight(s, a))
            .collect::<Result<Vec<f64>>>()?;
        self.weighted_denoising_loss_grad(states, actions, &weights, rng)
    }

    pub fn iql_weighted_bc_loss<R: Rng + ?Sized>(
        &self,
        guidance: &GuidanceHandle,
        states: &[&[f64]],
        actions: &[&[f64]],
        rng: &mut R,
    ) -> Result<f64> {
        Ok(self.iql_weighted_bc_loss_grad(guidance, states, actions, rng)?.0)
    }

    /// Full reverse chain for one state, recording network inputs.
    fn sample_with_tape<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<ChainTape> {
        let prior = standard_normal_vec(rng, self.action_dim);
        match self.sampler {
            SamplerMode::FullReverse => {
                let steps = self.schedule.steps();
                let mut inputs = Vec::with_capacity(steps);
                let mut a = prior;
                for k in (1..=steps).rev() {
                    let x = self.net_input(&a, k, s);
                    let eps = self.eps_net.forward(&x)?;
                    a = self.schedule.ddpm_reverse_step(&eps, &a, k, rng)?;
                    inputs.push((k, x));
                }
                Ok(ChainTape { inputs, a0: a })
            }
            SamplerMode::OneStepEdp => {
                let k = self.one_step_k;
                let x = self.net_input(&prior, k, s);
                let eps = self.eps_net.forward(&x)?;
                let a0 = self.schedule.reconstruct_a0(&prior, k, &eps)?;
                Ok(ChainTape { inputs: vec![(k, x)], a0 })
            }
        }
    }

    /// Pushes `d loss / d a0` back through the recorded chain into `grads`.
    fn backprop_tape(&self, tape: &ChainTape, a0_grad: Vec<f64>, grads: &mut MlpGrads) -> Result<()> {
        let ad = self.action_dim;
        match self.sampler {
            SamplerMode::OneStepEdp => {
                let (k, x) = &tape.inputs[0];
                let scale = self.schedule.reconstruction_noise_scale(*k)?;
                let out: Vec<f64> = a0_grad.iter().map(|g| -scale * g).collect();
                self.eps_net.backward_accumulate(x, &out, grads)?;
            }
            SamplerMode::FullReverse => {
                let mut g = a0_grad;
                // tape runs K..1; walk it backwards from k = 1
                for (k, x) in tape.inputs.iter().rev() {
                    let (c_in, c_eps, _) = self.schedule.reverse_coefficients(*k)?;
                    let out: Vec<f64> = g.iter().map(|gi| -c_in * c_eps * gi).collect();
                    let gx = self.eps_net.backward_accumulate(x, &out, grads)?;
                    if self.q_grad_path == QGradPath::LastStep {
                        break;
                    }
                    g = g.iter().zip(&gx[..ad]).map(|(gi, gxi)| c_in * gi + gxi).collect();
                }
            }
        }
        Ok(())
    }

    /// `-mean Q(s, a0) / max(|mean Q'(s, a0)|, 1e-3)` with `a0` drawn from the
    /// policy, and its gradient with respect to the noise network. The
    /// critic and the normalizer are treated as constants.
    pub fn q_loss_grad<R: Rng + ?Sized>(&self, source: QSource<'_>, states: &[&[f64]], rng: &mut R) -> Result<(f64, MlpGrads)> {
        if let QSource::Critic(g) = source {
            g.as_double_q()?;
            if g.state_dim() != self.state_dim || g.action_dim() != self.action_dim {
                return Err(Error::invalid_input("guidance dims do not match the policy"));
            }
        }
        self.check_batch(states, None)?;
        let n = states.len() as f64;
        let mut tapes = Vec::with_capacity(states.len());
        let mut values = Vec::with_capacity(states.len());
        let mut action_grads = Vec::with_capacity(states.len());
        let mut reference = Vec::with_capacity(states.len());
        for s in states {
            let tape = self.sample_with_tape(s, rng)?;
            let a0 = self.action_box.clamp(&tape.a0);
            match source {
                QSource::Critic(g) => {
                    let (v, grad) = g.value_and_action_grad(s, &a0)?;
                    values.push(v);
                    action_grads.push(grad);
                    reference.push(g.target_value(s, &a0)?);
                }
                QSource::Noise => {
                    values.push(rng.sample::<f64, _>(rand_distr::StandardNormal));
                    action_grads.push(standard_normal_vec(rng, self.action_dim));
                    reference.push(rng.sample::<f64, _>(rand_distr::StandardNormal));
                }
            }
            tapes.push(tape);
        }
        let norm = mean(&reference).abs().max(Q_NORM_FLOOR);
        let loss = -mean(&values) / norm;
        let mut grads = MlpGrads::zeros_like(&self.eps_net);
        for (tape, ga) in tapes.iter().zip(action_grads) {
            let a0_grad: Vec<f64> = ga
                .iter()
                .zip(&tape.a0)
                .zip(self.action_box.low.iter().zip(&self.action_box.high))
                .map(|((g, a), (lo, hi))| if a < lo || a > hi { 0.0 } else { -g / (n * norm) })
                .collect();
            if a0_grad.iter().any(|g| *g != 0.0) {
                self.backprop_tape(tape, a0_grad, &mut grads)?;
            }
        }
        Ok((loss, grads))
    }

    pub fn q_loss<R: Rng + ?Sized>(&self, source: QSource<'_>, states: &[&[f64]], rng: &mut R) -> Result<f64> {
        Ok(self.q_loss_grad(source, states, rng)?.0)
    }

    /// Losses and combined gradient of `l_diff + eta * l_q` without updating.
    /// With `eta = 0` the Q term is skipped entirely.
    pub fn actor_gradients<R: Rng + ?Sized>(
        &self,
        source: QSource<'_>,
        states: &[&[f64]],
        actions: &[&[f64]],
        eta: f64,
        rng: &mut R,
    ) -> Result<(LossBundle, MlpGrads)> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::invalid_input(format!("eta must be finite and non-negative, got {eta}")));
        }
        let (l_diff, mut grads) = self.diffusion_loss_grad(states, actions, rng)?;
        let mut l_q = 0.0;
        if eta > 0.0 {
            let (lq, gq) = self.q_loss_grad(source, states, rng)?;
            l_q = lq;
            grads.add_scaled(&gq, eta);
        }
        Ok((LossBundle::new(l_diff, l_q, eta), grads))
    }

    /// One Adam step on `l_diff + eta * l_q`.
    pub fn actor_loss<R: Rng + ?Sized>(
        &mut self,
        source: QSource<'_>,
        states: &[&[f64]],
        actions: &[&[f64]],
        eta: f64,
        rng: &mut R,
    ) -> Result<LossBundle> {
        let (bundle, grads) = self.actor_gradients(source, states, actions, eta, rng)?;
        self.apply(&grads, &bundle)?;
        Ok(bundle)
    }

    /// One Adam step on the advantage-weighted denoising loss. The Q term is
    /// never used on this path.
    pub fn weighted_bc_update<R: Rng + ?Sized>(
        &mut self,
        guidance: &GuidanceHandle,
        states: &[&[f64]],
        actions: &[&[f64]],
        rng: &mut R,
    ) -> Result<LossBundle> {
        let (loss, grads) = self.iql_weighted_bc_loss_grad(guidance, states, actions, rng)?;
        let bundle = LossBundle::new(loss, 0.0, 0.0);
        self.apply(&grads, &bundle)?;
        Ok(bundle)
    }

    /// One Adam step on a denoising loss with caller-supplied weights.
    pub fn weighted_denoising_update<R: Rng + ?Sized>(
        &mut self,
        states: &[&[f64]],
        actions: &[&[f64]],
        weights: &[f64],
        rng: &mut R,
    ) -> Result<LossBundle> {
        let (loss, grads) = self.weighted_denoising_loss_grad(states, actions, weights, rng)?;
        let bundle = LossBundle::new(loss, 0.0, 0.0);
        self.apply(&grads, &bundle)?;
        Ok(bundle)
    }

    fn apply(&mut self, grads: &MlpGrads, bundle: &LossBundle) -> Result<()> {
        if !(bundle.l_diff.is_finite() && bundle.l_q.is_finite()) {
            return Err(Error::NumericFailure("non-finite actor loss".into()));
        }
        adam_step(&mut self.eps_net, grads, &mut self.optimizer)?;
        self.training_steps += 1;
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
