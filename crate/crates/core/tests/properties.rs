use moddiff_core::eval::{evaluate_checkpoint, ExpertAgent, RandomAgent};
use moddiff_core::guidance::{GuidanceConfig, GuidanceHandle, GuidanceKind};
use moddiff_core::stats::{levene_test, mann_whitney_exact, mann_whitney_normal, mann_whitney_u};
use moddiff_core::{generate_dataset, rng, Algorithm, DiffusionPolicy, PolicyConfig, Tier, ToyEnv};
use proptest::prelude::*;
use rand::Rng;

fn sample(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn generated_datasets_are_coherent(seed in any::<u64>(), tier_idx in 0usize..4, linreg in any::<bool>(), n in 50usize..400) {
        let env = if linreg { ToyEnv::lin_reg_1d() } else { ToyEnv::point_reach_2d() };
        let ds = generate_dataset(&env, Tier::ALL[tier_idx], n, seed).unwrap();
        prop_assert!(ds.len() >= n);
        prop_assert!(ds.is_coherent());
        for i in 0..ds.len() {
            prop_assert!(env.action_box().contains(ds.action(i)));
        }
    }
}

proptest! {
    #[test]
    fn mann_whitney_is_antisymmetric(x in sample(1..20), y in sample(1..20)) {
        let a = mann_whitney_u(&x, &y).unwrap();
        let b = mann_whitney_u(&y, &x).unwrap();
        prop_assert_eq!(a.u + b.u, (x.len() * y.len()) as f64);
        prop_assert!((a.p - b.p).abs() < 1e-12);
    }

    #[test]
    fn levene_ignores_group_location(
        g1 in sample(2..12),
        g2 in sample(2..12),
        g3 in sample(2..12),
        which in 0usize..3,
        shift in -1e3f64..1e3,
    ) {
        let groups = vec![g1, g2, g3];
        let mut shifted = groups.clone();
        for v in &mut shifted[which] {
            *v += shift;
        }
        let (a, b) = (levene_test(&groups).unwrap(), levene_test(&shifted).unwrap());
        if a.f.is_finite() {
            prop_assert!((a.f - b.f).abs() <= 1e-6 * a.f.abs().max(1.0), "{} vs {}", a.f, b.f);
        }
    }

    #[test]
    fn guided_eps_is_linear_in_alpha(seed in 0u64..1000, alpha in -5.0f64..5.0, k in 1usize..=16) {
        let env = ToyEnv::point_reach_2d();
        let cfg = PolicyConfig { hidden: vec![16], ..Default::default() };
        let policy = DiffusionPolicy::new(Algorithm::Dql, 4, env.action_box().clone(), &cfg, seed).unwrap();
        let g = GuidanceHandle::new(GuidanceKind::DoubleQ, 4, 2, &GuidanceConfig { hidden: vec![16], ..Default::default() }, seed + 1).unwrap();
        let mut r = rng::seeded(seed);
        let s: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
        let base = policy.guided_eps(&g, &s, &a, k, 0.0).unwrap();
        prop_assert_eq!(&base, &policy.predict_noise(&s, &a, k).unwrap());
        let grad = g.grad_q_wrt_action(&s, &a).unwrap();
        let guided = policy.guided_eps(&g, &s, &a, k, alpha).unwrap();
        for ((e, b), gq) in guided.iter().zip(&base).zip(&grad) {
            prop_assert!((e - (b + alpha * gq)).abs() < 1e-12);
        }
    }
}

#[test]
fn exact_and_normal_paths_agree_at_size_eight() {
    let mut r = rng::seeded(8);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let shift = r.random_range(0.0..1.5);
        let x: Vec<f64> = (0..8).map(|_| r.random::<f64>()).collect();
        let y: Vec<f64> = (0..8).map(|_| r.random::<f64>() + shift).collect();
        let exact = mann_whitney_exact(&x, &y);
        let normal = mann_whitney_normal(&x, &y).unwrap();
        assert_eq!(exact.u, normal.u);
        worst = worst.max((exact.p - normal.p).abs());
    }
    assert!(worst <= 0.02, "max |p_exact - p_normal| = {worst}");
}

#[test]
fn normalization_anchors_hold() {
    for env in [ToyEnv::point_reach_2d(), ToyEnv::lin_reg_1d()] {
        let expert = evaluate_checkpoint(&ExpertAgent(&env), &env, 200, 11).unwrap();
        let random = evaluate_checkpoint(&RandomAgent(&env), &env, 200, 11).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&expert) - 100.0).abs() <= 2.0, "{} expert {}", env.name(), mean(&expert));
        assert!(mean(&random).abs() <= 2.0, "{} random {}", env.name(), mean(&random));
    }
}
