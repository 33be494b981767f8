//! Dense feedforward networks with hand-written backpropagation and Adam.
//!
//! Every network in the crate (critics, value heads, the noise predictor) is an
//! [`Mlp`]. `backward` returns gradients for the parameters *and* for the
//! input vector; the input gradient is what action-space guidance is built on.
//!
//! Layout: layer `i` maps `layer_dims[i]` inputs to `layer_dims[i + 1]` outputs
//! with a row-major `(out, in)` weight matrix. Flattened parameter order is
//! weights then biases, layer by layer.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub(crate) fn to_tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Tanh),
            other => Err(Error::Format(format!("unknown activation tag {other}"))),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    hidden_activation: Activation,
    output_activation: Activation,
}

impl Mlp {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit)
                .map_err(|e| Error::invalid_config(e.to_string()))?;
            weights.push((0..fan_in * fan_out).map(|_| dist.sample(rng)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden_activation,
            output_activation,
        })
    }

    pub fn from_parts(
        layer_dims: &[usize],
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let n_layers = layer_dims.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::invalid_input(format!(
                "expected {n_layers} weight and bias blocks, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (i, pair) in layer_dims.windows(2).enumerate() {
            if weights[i].len() != pair[0] * pair[1] || biases[i].len() != pair[1] {
                return Err(Error::invalid_input(format!(
                    "layer {i}: expected {}x{} weights and {} biases",
                    pair[1], pair[0], pair[1]
                )));
            }
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden_activation,
            output_activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameters in serialization order: per layer, row-major weights then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid_input(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            b.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::invalid_input(format!(
                "network expects input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut current = input.to_vec();
        for layer in 0..self.n_layers() {
            current = self.layer_forward(layer, &current);
        }
        Ok(current)
    }

    fn layer_forward(&self, layer: usize, x: &[f64]) -> Vec<f64> {
        let in_dim = self.layer_dims[layer];
        let act = self.activation_for(layer);
        self.weights[layer]
            .chunks_exact(in_dim)
            .zip(&self.biases[layer])
            .map(|(row, b)| act.apply(dot(row, x) + b))
            .collect()
    }

    /// All layer outputs, with the input itself at index 0.
    fn activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        acts.push(input.to_vec());
        for layer in 0..self.n_layers() {
            let next = self.layer_forward(layer, &acts[layer]);
            acts.push(next);
        }
        acts
    }

    /// Gradient of `<forward(input), output_grad>` with respect to every
    /// parameter and to the input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let mut grads = MlpGrads::zeros_like(self);
        let input_grad = self.backward_accumulate(input, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`Mlp::backward`] but adds parameter gradients into `grads`.
    pub fn backward_accumulate(
        &self,
        input: &[f64],
        output_grad: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        self.backprop(input, output_grad, Some(grads))
    }

    /// Input gradient only; skips parameter gradient accumulation.
    pub fn input_grad(&self, input: &[f64], output_grad: &[f64]) -> Result<Vec<f64>> {
        self.backprop(input, output_grad, None)
    }

    fn backprop(
        &self,
        input: &[f64],
        output_grad: &[f64],
        mut grads: Option<&mut MlpGrads>,
    ) -> Result<Vec<f64>> {
        self.check_input(input)?;
        if output_grad.len() != self.output_dim() {
            return Err(Error::invalid_input(format!(
                "output gradient length {} does not match output dim {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        if let Some(g) = grads.as_deref() {
            if !g.matches(self) {
                return Err(Error::invalid_input("gradient buffer does not mirror network"));
            }
        }
        let acts = self.activations(input);
        let n = self.n_layers();
        let act_out = self.activation_for(n - 1);
        let mut delta: Vec<f64> = output_grad
            .iter()
            .zip(&acts[n])
            .map(|(g, y)| g * act_out.derivative_from_output(*y))
            .collect();

        for layer in (0..n).rev() {
            let in_dim = self.layer_dims[layer];
            let x = &acts[layer];
            if let Some(g) = grads.as_deref_mut() {
                let gw = &mut g.weights[layer];
                for (row, d) in gw.chunks_exact_mut(in_dim).zip(&delta) {
                    if *d != 0.0 {
                        for (gw_ij, x_j) in row.iter_mut().zip(x) {
                            *gw_ij += d * x_j;
                        }
                    }
                }
                for (gb, d) in g.biases[layer].iter_mut().zip(&delta) {
                    *gb += d;
                }
            }
            let mut prev = vec![0.0; in_dim];
            for (row, d) in self.weights[layer].chunks_exact(in_dim).zip(&delta) {
                if *d != 0.0 {
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
            }
            if layer > 0 {
                let act = self.activation_for(layer - 1);
                for (p, y) in prev.iter_mut().zip(x) {
                    *p *= act.derivative_from_output(*y);
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Moves parameters toward `source`: `self = (1 - rate) * self + rate * source`.
    pub fn ema_toward(&mut self, source: &Mlp, rate: f64) -> Result<()> {
        if source.layer_dims != self.layer_dims {
            return Err(Error::invalid_input("EMA source has different layer dims"));
        }
        for (dst, src) in self.weights.iter_mut().zip(&source.weights) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += rate * (s - *d);
            }
        }
        for (dst, src) in self.biases.iter_mut().zip(&source.biases) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += rate * (s - *d);
            }
        }
        Ok(())
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::invalid_config("an MLP needs at least input and output dims"));
    }
    if layer_dims.contains(&0) {
        return Err(Error::invalid_config("layer dims must be positive"));
    }
    Ok(())
}

/// Parameter-shaped gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn matches(&self, net: &Mlp) -> bool {
        self.weights.len() == net.weights.len()
            && self.biases.len() == net.biases.len()
            && self.weights.iter().zip(&net.weights).all(|(a, b)| a.len() == b.len())
            && self.biases.iter().zip(&net.biases).all(|(a, b)| a.len() == b.len())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .flat_map(|w| w.iter_mut())
            .chain(self.biases.iter_mut().flat_map(|b| b.iter_mut()))
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &MlpGrads, factor: f64) {
        for (dst, src) in self.weights.iter_mut().zip(&other.weights) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
        for (dst, src) in self.biases.iter_mut().zip(&other.biases) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|v| *v == 0.0)
    }

    /// Same ordering as [`Mlp::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: MlpGrads,
    pub second_moment: MlpGrads,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        Self {
            first_moment: MlpGrads::zeros_like(net),
            second_moment: MlpGrads::zeros_like(net),
            step_count: 0,
            config,
        }
    }
}

pub fn adam_step(net: &mut Mlp, grads: &MlpGrads, state: &mut AdamState) -> Result<()> {
    if !grads.matches(net) || !state.first_moment.matches(net) {
        return Err(Error::invalid_input("gradient or moment shapes do not mirror the network"));
    }
    if !grads.is_finite() {
        return Err(Error::NumericFailure("non-finite gradient entry".into()));
    }
    state.step_count += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let params = net
        .weights
        .iter_mut()
        .chain(net.biases.iter_mut())
        .flat_map(|p| p.iter_mut());
    let g = grads.weights.iter().chain(&grads.biases).flat_map(|v| v.iter());
    let m = state
        .first_moment
        .weights
        .iter_mut()
        .chain(state.first_moment.biases.iter_mut())
        .flat_map(|v| v.iter_mut());
    let v = state
        .second_moment
        .weights
        .iter_mut()
        .chain(state.second_moment.biases.iter_mut())
        .flat_map(|v| v.iter_mut());

    for (((p, g), m), v) in params.zip(g).zip(m).zip(v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Central-difference gradient: `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(act: Activation) -> Mlp {
        Mlp::from_parts(&[2, 2], vec![vec![1.0, 0.0, 0.0, 1.0]], vec![vec![0.0, 0.0]], act, act).unwrap()
    }

    #[test]
    fn identity_forward() {
        let net = identity_layer(Activation::Identity);
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = identity_layer(Activation::Relu);
        assert_eq!(net.forward(&[-1.0, 3.0]).unwrap(), vec![0.0, 3.0]);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let net = identity_layer(Activation::Identity);
        assert!(matches!(net.forward(&[1.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(net.backward(&[1.0, 2.0], &[1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn two_layer_matches_dense_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp::new(&[3, 4, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];
        // explicit W2 * tanh(W1 x + b1) + b2
        let (w1, b1) = (&net.weights()[0], &net.biases()[0]);
        let (w2, b2) = (&net.weights()[1], &net.biases()[1]);
        let mut h = [0.0; 4];
        for i in 0..4 {
            let mut z = b1[i];
            for j in 0..3 {
                z += w1[i * 3 + j] * x[j];
            }
            h[i] = z.tanh();
        }
        let mut y = [0.0; 2];
        for i in 0..2 {
            let mut z = b2[i];
            for j in 0..4 {
                z += w2[i * 4 + j] * h[j];
            }
            y[i] = z;
        }
        let out = net.forward(&x).unwrap();
        for (a, b) in out.iter().zip(y) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_input_grad_is_transpose() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let net = Mlp::from_parts(&[3, 2], vec![w], vec![vec![0.0; 2]], Activation::Identity, Activation::Identity)
            .unwrap();
        let (_, gx) = net.backward(&[0.5, 0.1, -0.2], &[1.0, -1.0]).unwrap();
        assert_eq!(gx, vec![1.0 - 4.0, 2.0 - 5.0, 3.0 - 6.0]);
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 5, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let (g, gx) = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let mut other = Mlp::new(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        other.set_params_flat(&net.params_flat()).unwrap();
        assert_eq!(net, other);
        assert_eq!(net.params_flat().len(), 2 * 3 + 3 + 3 + 1);
    }

    #[test]
    fn adam_zero_grad_first_step_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::new(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net, AdamConfig::default());
        let zeros = MlpGrads::zeros_like(&net);
        for _ in 0..3 {
            adam_step(&mut net, &zeros, &mut state).unwrap();
        }
        assert_eq!(net, before);
        assert_eq!(state.step_count, 3);
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let mut net =
            Mlp::from_parts(&[1, 1], vec![vec![0.0]], vec![vec![0.0]], Activation::Identity, Activation::Identity)
                .unwrap();
        let mut state = AdamState::new(&net, AdamConfig::with_lr(0.1));
        let grads = MlpGrads {
            weights: vec![vec![1.0]],
            biases: vec![vec![0.0]],
        };
        adam_step(&mut net, &grads, &mut state).unwrap();
        assert!((net.weights()[0][0] + 0.1).abs() < 1e-8);
        assert_eq!(net.biases()[0][0], 0.0);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut net =
            Mlp::from_parts(&[1, 1], vec![vec![0.0]], vec![vec![0.0]], Activation::Identity, Activation::Identity)
                .unwrap();
        let mut state = AdamState::new(&net, AdamConfig::default());
        let grads = MlpGrads {
            weights: vec![vec![f64::NAN]],
            biases: vec![vec![0.0]],
        };
        assert!(matches!(adam_step(&mut net, &grads, &mut state), Err(Error::NumericFailure(_))));
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn finite_diff_basics() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.0, &[1.0, 2.0, 3.0], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
        let g = finite_diff_grad(|x| x[0].sin(), &[0.0], 1e-5);
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ema_moves_fraction_of_gap() {
        let mut a =
            Mlp::from_parts(&[1, 1], vec![vec![0.0]], vec![vec![0.0]], Activation::Identity, Activation::Identity)
                .unwrap();
        let b = Mlp::from_parts(&[1, 1], vec![vec![1.0]], vec![vec![2.0]], Activation::Identity, Activation::Identity)
            .unwrap();
        a.ema_toward(&b, 0.25).unwrap();
        assert_eq!(a.weights()[0][0], 0.25);
        assert_eq!(a.biases()[0][0], 0.5);
    }
}
