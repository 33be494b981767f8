//! K-step DDPM noise schedule and its three kernels: forward noising,
//! one-shot clean-action reconstruction, and the ancestral reverse step.
//!
//! Steps are indexed `k = 1..=K` everywhere; `alpha_bar(k)` is the product of
//! `alpha(1..=k)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_min` to `beta_max` over `steps`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid_config("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid_config(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_min]
        } else {
            (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid_config("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid_config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut running = 1.0;
        for a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || alpha_bars.iter().any(|ab| *ab <= 0.0) {
            return Err(Error::invalid_config("alpha_bar must be strictly decreasing and positive"));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn index(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            return Err(Error::invalid_input(format!(
                "diffusion step {k} outside 1..={}",
                self.steps()
            )));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        Ok(self.betas[self.index(k)?])
    }

    pub fn alpha(&self, k: usize) -> Result<f64> {
        Ok(self.alphas[self.index(k)?])
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(k)?])
    }

    /// `a_k = sqrt(abar_k) a0 + sqrt(1 - abar_k) eps`
    pub fn forward_noise(&self, a0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let ab = self.alpha_bar(k)?;
        check_len(a0, eps)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(a0.iter().zip(eps).map(|(a, e)| sa * a + sn * e).collect())
    }

    /// Inverts [`forward_noise`](Self::forward_noise) given a noise estimate.
    pub fn reconstruct_a0(&self, ak: &[f64], k: usize, eps_pred: &[f64]) -> Result<Vec<f64>> {
        let scale = self.reconstruction_noise_scale(k)?;
        check_len(ak, eps_pred)?;
        let inv = 1.0 / self.alpha_bar(k)?.sqrt();
        Ok(ak.iter().zip(eps_pred).map(|(a, e)| inv * a - scale * e).collect())
    }

    /// `sqrt(1 - abar_k) / sqrt(abar_k)`: sensitivity of the reconstruction to the noise estimate.
    pub fn reconstruction_noise_scale(&self, k: usize) -> Result<f64> {
        let ab = self.alpha_bar(k)?;
        Ok((1.0 - ab).sqrt() / ab.sqrt())
    }

    /// Coefficients `(c_in, c_eps, sigma)` of the reverse transition
    /// `a_{k-1} = c_in * (a_k - c_eps * eps_pred) + sigma * z`.
    pub fn reverse_coefficients(&self, k: usize) -> Result<(f64, f64, f64)> {
        let i = self.index(k)?;
        let c_in = 1.0 / self.alphas[i].sqrt();
        let c_eps = self.betas[i] / (1.0 - self.alpha_bars[i]).sqrt();
        let sigma = if k > 1 { self.betas[i].sqrt() } else { 0.0 };
        Ok((c_in, c_eps, sigma))
    }

    /// Posterior-mean reverse step with explicit noise `z` (ignored at `k = 1`).
    pub fn reverse_step_with_noise(&self, eps_pred: &[f64], ak: &[f64], k: usize, z: &[f64]) -> Result<Vec<f64>> {
        let (c_in, c_eps, sigma) = self.reverse_coefficients(k)?;
        check_len(ak, eps_pred)?;
        check_len(ak, z)?;
        Ok(ak
            .iter()
            .zip(eps_pred)
            .zip(z)
            .map(|((a, e), z)| c_in * (a - c_eps * e) + sigma * z)
            .collect())
    }

    /// One ancestral DDPM step `a_k -> a_{k-1}` with `sigma_k^2 = beta_k`; the
    /// final step (`k = 1`) is noiseless.
    pub fn ddpm_reverse_step<R: Rng + ?Sized>(
        &self,
        eps_pred: &[f64],
        ak: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.index(k)?;
        let z: Vec<f64> = if k > 1 {
            (0..ak.len()).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            vec![0.0; ak.len()]
        };
        self.reverse_step_with_noise(eps_pred, ak, k, &z)
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid_input(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn constant_half_beta_is_geometric() {
        let s = NoiseSchedule::linear(3, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25, 0.125]);
    }

    #[test]
    fn linear_schedule_matches_cumulative_product() {
        let s = NoiseSchedule::linear(5, 1e-4, 0.02).unwrap();
        let step = (0.02 - 1e-4) / 4.0;
        let mut prod = 1.0;
        for k in 1..=5 {
            let beta = 1e-4 + step * (k - 1) as f64;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(k).unwrap() - prod).abs() < 1e-12);
            assert_eq!(s.alpha(k).unwrap(), 1.0 - s.beta(k).unwrap());
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.0]).is_err());
    }

    #[test]
    fn step_index_is_checked() {
        let s = NoiseSchedule::linear(4, 0.01, 0.1).unwrap();
        assert!(matches!(s.forward_noise(&[1.0], 0, &[0.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(s.reconstruct_a0(&[1.0], 5, &[0.0]), Err(Error::InvalidInput(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(s.ddpm_reverse_step(&[0.0], &[1.0], 5, &mut rng).is_err());
    }

    #[test]
    fn forward_noise_hand_case() {
        // alpha_bar = 0.25 from a constant beta of 0.75
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let out = s.forward_noise(&[1.0, 0.0], 1, &[0.0, 1.0]).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15);
        assert!((out[1] - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn forward_noise_limits() {
        let s = NoiseSchedule::from_betas(vec![1e-15]).unwrap();
        let out = s.forward_noise(&[0.3, -0.4], 1, &[1.0, 1.0]).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-7 && (out[1] + 0.4).abs() < 1e-7);

        let s = NoiseSchedule::linear(4, 0.01, 0.2).unwrap();
        let out = s.forward_noise(&[2.0], 3, &[0.0]).unwrap();
        assert_eq!(out[0], s.alpha_bar(3).unwrap().sqrt() * 2.0);
    }

    #[test]
    fn reconstruction_with_zero_eps_and_offsets() {
        let s = NoiseSchedule::linear(4, 0.01, 0.2).unwrap();
        let ak = [0.7, -0.2];
        let r = s.reconstruct_a0(&ak, 2, &[0.0, 0.0]).unwrap();
        let ab = s.alpha_bar(2).unwrap();
        assert!((r[0] - 0.7 / ab.sqrt()).abs() < 1e-15);

        let eps = [0.1, 0.3];
        let delta = [0.05, -0.2];
        let exact = s.reconstruct_a0(&ak, 2, &eps).unwrap();
        let perturbed: Vec<f64> = eps.iter().zip(delta).map(|(e, d)| e + d).collect();
        let off = s.reconstruct_a0(&ak, 2, &perturbed).unwrap();
        let scale = (1.0 - ab).sqrt() / ab.sqrt();
        for i in 0..2 {
            assert!((off[i] - exact[i] + scale * delta[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn terminal_reverse_step_is_noiseless() {
        let s = NoiseSchedule::linear(3, 0.01, 0.1).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(999);
        let a = s.ddpm_reverse_step(&[0.2], &[0.5], 1, &mut r1).unwrap();
        let b = s.ddpm_reverse_step(&[0.2], &[0.5], 1, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_beta_zero_eps_is_identity() {
        let s = NoiseSchedule::from_betas(vec![1e-14, 2e-14]).unwrap();
        let (c_in, c_eps, _) = s.reverse_coefficients(2).unwrap();
        let out = s.reverse_step_with_noise(&[0.0], &[0.8], 2, &[0.0]).unwrap();
        assert!((out[0] - 0.8).abs() < 1e-12);
        assert!((c_in - 1.0).abs() < 1e-12 && c_eps < 1e-6);
    }

    #[test]
    fn scalar_chain_matches_reference() {
        let s = NoiseSchedule::linear(3, 0.05, 0.3).unwrap();
        let eps_fn = |a: f64, k: usize| 0.3 * a - 0.1 * k as f64;

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut a = vec![0.9];
        for k in (1..=3).rev() {
            let e = [eps_fn(a[0], k)];
            a = s.ddpm_reverse_step(&e, &a, k, &mut rng).unwrap();
        }

        // reference: same RNG draws, scalar formulas written out
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let betas: [f64; 3] = [0.05, 0.175, 0.3];
        let mut abar = [0.0f64; 3];
        let mut p = 1.0;
        for i in 0..3 {
            p *= 1.0 - betas[i];
            abar[i] = p;
        }
        let mut x: f64 = 0.9;
        for k in (1..=3usize).rev() {
            let b = betas[k - 1];
            let mean = (x - b / (1.0 - abar[k - 1]).sqrt() * eps_fn(x, k)) / (1.0 - b).sqrt();
            let z: f64 = if k > 1 { rng.sample(StandardNormal) } else { 0.0 };
            x = mean + b.sqrt() * z;
        }
        assert!((a[0] - x).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn reconstruction_inverts_noising(
            a0 in prop::collection::vec(-3.0f64..3.0, 1..5),
            seed in any::<u64>(),
            k in 1usize..=16,
        ) {
            let s = NoiseSchedule::linear(16, 1e-4, 0.1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps: Vec<f64> = (0..a0.len()).map(|_| rng.sample(StandardNormal)).collect();
            let ak = s.forward_noise(&a0, k, &eps).unwrap();
            let back = s.reconstruct_a0(&ak, k, &eps).unwrap();
            for (x, y) in back.iter().zip(&a0) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn linear_schedules_are_strictly_decreasing(
            steps in 1usize..64,
            lo in 1e-5f64..0.2,
            span in 0.0f64..0.5,
        ) {
            let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
            let ab = s.alpha_bars();
            prop_assert!(ab[0] < 1.0 && *ab.last().unwrap() > 0.0);
            for w in ab.windows(2) {
                prop_assert!(w[1] < w[0]);
            }
        }
    }
}
