//! Property tests for the attack contracts: exact ball/box feasibility on
//! arbitrary inputs, budget monotonicity, and determinism.

use atfs_core::{
    build_model, cw_pgd, fgsm, linf_violations, pgd, AttackConfig, AttackLoss, ModelSpec, Norm,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model(input_dim: usize, num_classes: usize, seed: u64) -> atfs_core::Network {
    let spec = ModelSpec::Mlp {
        hidden: vec![4],
        feature_dim: 3,
    };
    build_model(&spec, (1, 1, input_dim), num_classes, seed).unwrap()
}

fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (1usize..=4, 1usize..=6).prop_flat_map(|(rows, cols)| {
        (
            proptest::collection::vec(proptest::collection::vec(0.0..=1.0f64, cols), rows),
            proptest::collection::vec(0usize..3, rows),
        )
    })
}

fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let (n, d) = (rows.len(), rows[0].len());
    Array2::from_shape_fn((n, d), |(i, j)| rows[i][j])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    /// Every attack output satisfies ‖x′ − x‖∞ ≤ ε and x′ ∈ [0,1]
    /// elementwise, for arbitrary inputs and configurations.
    #[test]
    fn attacks_are_always_feasible(
        (rows, labels) in batch_strategy(),
        epsilon in prop_oneof![Just(0.0), 1e-6..0.3f64],
        steps in 0usize..=6,
        step_scale in 0.1..2.0f64,
        random_start: bool,
        loss_idx in 0usize..3,
        model_seed in 0u64..1000,
    ) {
        let x = to_array(&rows);
        let model = tiny_model(x.ncols(), 3, model_seed);
        let cfg = AttackConfig {
            epsilon,
            step_size: (epsilon * step_scale).max(1e-4),
            steps,
            random_start,
            loss: [AttackLoss::CrossEntropy, AttackLoss::CwMargin, AttackLoss::KlToClean][loss_idx],
            norm: Norm::Linf,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed ^ 0xa77ac4);
        let out = pgd(&model, &x, &labels, &cfg, Some(&mut rng)).unwrap();

        prop_assert_eq!(linf_violations(&out.x_adv, &x, epsilon), 0);
        prop_assert!(out.x_adv.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if steps == 0 || epsilon == 0.0 {
            prop_assert_eq!(&out.x_adv, &x);
        }
    }

    /// FGSM is feasible on the same arbitrary inputs.
    #[test]
    fn fgsm_is_always_feasible(
        (rows, labels) in batch_strategy(),
        epsilon in prop_oneof![Just(0.0), 1e-6..0.3f64],
        model_seed in 0u64..1000,
    ) {
        let x = to_array(&rows);
        let model = tiny_model(x.ncols(), 3, model_seed);
        let out = fgsm(&model, &x, &labels, epsilon).unwrap();
        prop_assert_eq!(linf_violations(&out.x_adv, &x, epsilon), 0);
        prop_assert!(out.x_adv.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

/// With an ε-proportional step and no random start, a larger budget never
/// loses more than 1e-6 of achieved attack loss.
#[test]
fn budget_monotonicity_with_proportional_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb4d9e7);
    for draw in 0..40 {
        let dim = rng.random_range(2..=5usize);
        let batch = rng.random_range(1..=4usize);
        let model = tiny_model(dim, 3, rng.random::<u64>());
        let x = Array2::from_shape_fn((batch, dim), |_| rng.random_range(0.0..1.0));
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();

        let eps1 = rng.random_range(0.01..0.15);
        let eps2 = eps1 * rng.random_range(1.0..3.0);
        let loss = if draw % 2 == 0 {
            AttackLoss::CrossEntropy
        } else {
            AttackLoss::CwMargin
        };
        let attack = |eps: f64| {
            let cfg = AttackConfig {
                epsilon: eps,
                step_size: eps / 4.0,
                steps: 10,
                random_start: false,
                loss,
                norm: Norm::Linf,
            };
            let out = pgd(&model, &x, &labels, &cfg, None).unwrap();
            out.loss_values.mean().unwrap()
        };
        let (small, large) = (attack(eps1), attack(eps2));
        assert!(
            large >= small - 1e-6,
            "draw {draw}: budget {eps2} achieved {large} < budget {eps1} achieved {small}"
        );
    }
}

#[test]
fn attacks_are_deterministic_given_seed() {
    let mut seeder = ChaCha8Rng::seed_from_u64(0xdead5eed);
    for _ in 0..10 {
        let model = tiny_model(4, 3, seeder.random::<u64>());
        let x = Array2::from_shape_fn((3, 4), |_| seeder.random_range(0.0..1.0));
        let labels = vec![0, 1, 2];
        let cfg = AttackConfig {
            epsilon: 0.1,
            step_size: 0.025,
            steps: 7,
            random_start: true,
            loss: AttackLoss::CrossEntropy,
            norm: Norm::Linf,
        };
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            pgd(&model, &x, &labels, &cfg, Some(&mut rng)).unwrap().x_adv
        };
        assert_eq!(run(11), run(11), "same seed must reproduce bit-for-bit");

        let no_rs = AttackConfig {
            random_start: false,
            ..cfg
        };
        let a = pgd(&model, &x, &labels, &no_rs, None).unwrap().x_adv;
        let b = pgd(&model, &x, &labels, &no_rs, None).unwrap().x_adv;
        assert_eq!(a, b, "no random start must be deterministic");

        let cw = cw_pgd(&model, &x, &labels, &no_rs, None).unwrap().x_adv;
        let cw2 = cw_pgd(&model, &x, &labels, &no_rs, None).unwrap().x_adv;
        assert_eq!(cw, cw2);
    }
}
