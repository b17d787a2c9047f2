//! Property tests over rotary embeddings, the scaling profiles, position
//! plans and the checkpoint format.

use clex_core::checkpoint::{decode, encode};
use clex_core::ode::position_plan;
use clex_core::rope::{apply_rotary, pair_score, rotate, DEFAULT_BASE};
use clex_core::scaling::{alpha_pi, alpha_yarn, chain_step, scale_basis, scale_positions};
use clex_core::{FrequencyBasis, LogBasis, PositionMode, ScaleFactor, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn head_dim() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![4usize, 8, 64, 128])
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, d)
}

fn dim_and_vector() -> impl Strategy<Value = (usize, Vec<f64>)> {
    head_dim().prop_flat_map(|d| (Just(d), vector(d)))
}

fn dim_and_pair() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    head_dim().prop_flat_map(|d| (Just(d), vector(d), vector(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn index_scaling_equals_basis_scaling((d, x) in dim_and_vector(), m in -5000.0f64..5000.0, t in 0.01f64..16.0) {
        let basis = FrequencyBasis::default_basis(d, DEFAULT_BASE).unwrap();
        let by_index = apply_rotary(&x, t * m, &basis).unwrap();
        let scaled: Vec<f64> = basis.theta().iter().map(|th| t * th).collect();
        let by_basis = rotate(&x, m, &scaled).unwrap();
        prop_assert!(dist(&by_index, &by_basis) <= 1e-9 * norm(&x).max(1e-300));
    }

    #[test]
    fn relative_position_identity((d, q, k) in dim_and_pair(), m in -5000.0f64..5000.0, n in -5000.0f64..5000.0) {
        let basis = FrequencyBasis::default_basis(d, DEFAULT_BASE).unwrap();
        let s = pair_score(&q, &k, m, n, &basis).unwrap();
        let r = pair_score(&q, &k, 0.0, n - m, &basis).unwrap();
        let dense: f64 = q.iter().zip(apply_rotary(&k, n - m, &basis).unwrap()).map(|(a, b)| a * b).sum();
        let scale = norm(&q) * norm(&k);
        prop_assert!((s - r).abs() <= 1e-9 * scale.max(1e-300));
        prop_assert!((s - dense).abs() <= 1e-9 * scale.max(1e-300));
    }

    #[test]
    fn rotation_preserves_norm((d, x) in dim_and_vector(), m in -5000.0f64..5000.0) {
        let basis = FrequencyBasis::default_basis(d, DEFAULT_BASE).unwrap();
        let y = apply_rotary(&x, m, &basis).unwrap();
        prop_assert!((norm(&y) - norm(&x)).abs() <= 1e-9 * norm(&x).max(1e-300));
    }

    #[test]
    fn pi_positions_match_pi_basis((d, x) in dim_and_vector(), m in 0.0f64..5000.0, t in 1.0f64..16.0) {
        let basis = FrequencyBasis::default_basis(d, DEFAULT_BASE).unwrap();
        let sf = ScaleFactor::new(t).unwrap();
        let m_scaled = scale_positions(&[m], sf)[0];
        let a = apply_rotary(&x, m_scaled, &basis).unwrap();
        let b = apply_rotary(&x, m, &scale_basis(&basis, &alpha_pi(sf, d).unwrap()).unwrap()).unwrap();
        prop_assert!(dist(&a, &b) <= 1e-9 * norm(&x).max(1e-300));
    }

    #[test]
    fn yarn_is_monotone(d in prop::sample::select(vec![4usize, 6, 8, 16, 64, 128]), t in 1.0f64..64.0, dt in 0.0f64..8.0) {
        let lo = alpha_yarn(ScaleFactor::new(t).unwrap(), d).unwrap();
        let hi = alpha_yarn(ScaleFactor::new(t + dt).unwrap(), d).unwrap();
        prop_assert!(lo.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(lo[0], 1.0);
        prop_assert!((lo[d / 2 - 1] - 1.0 / t).abs() <= 1e-12);
        for i in 1..d / 2 {
            prop_assert!(hi[i] <= lo[i]);
        }
    }

    #[test]
    fn profiles_are_one_at_unit_factor(d in (2usize..64).prop_map(|h| 2 * h)) {
        prop_assert!(alpha_pi(ScaleFactor::ONE, d).unwrap().iter().all(|&a| a == 1.0));
        prop_assert!(alpha_yarn(ScaleFactor::ONE, d).unwrap().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn scaled_log_basis_is_shifted_log(d in (2usize..32).prop_map(|h| 2 * h), t in 1.0f64..32.0) {
        let basis = FrequencyBasis::default_basis(d, DEFAULT_BASE).unwrap();
        let alpha = alpha_yarn(ScaleFactor::new(t).unwrap(), d).unwrap();
        let scaled = scale_basis(&basis, &alpha).unwrap().to_log();
        let z = basis.to_log();
        for ((s, z), a) in scaled.z().iter().zip(z.z()).zip(&alpha) {
            prop_assert!((s - (z + a.ln())).abs() <= 1e-12 * z.abs().max(1.0));
        }
    }

    #[test]
    fn yarn_chain_telescopes(d in (2usize..32).prop_map(|h| 2 * h), steps in prop::collection::vec(1.0f64..3.0, 1..6)) {
        let z1 = FrequencyBasis::default_basis(d, DEFAULT_BASE).unwrap().to_log();
        let mut t = 1.0;
        let mut z = z1.clone();
        let mut prev = alpha_yarn(ScaleFactor::ONE, d).unwrap();
        for s in steps {
            t *= s;
            let next = alpha_yarn(ScaleFactor::new(t).unwrap(), d).unwrap();
            z = chain_step(&z, &prev, &next).unwrap();
            prev = next;
        }
        let direct: Vec<f64> = z1.z().iter().zip(&prev).map(|(z, a)| z + a.ln()).collect();
        for (a, b) in z.z().iter().zip(&direct) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn position_plans_are_increasing_and_in_range(
        train_len in 1usize..200,
        native_mult in 1usize..4,
        t_prime in 1.0f64..16.0,
        seed in any::<u64>(),
        mode in prop::sample::select(vec![PositionMode::Natural, PositionMode::UniformScaled, PositionMode::RandomSampled]),
    ) {
        let native = train_len * native_mult;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = position_plan(train_len, t_prime, native, mode, &mut rng).unwrap();
        prop_assert_eq!(plan.positions.len(), train_len);
        prop_assert!(plan.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.positions[0] >= 1.0);
        prop_assert!(*plan.positions.last().unwrap() <= t_prime * native as f64 + 1e-9);
        if mode == PositionMode::RandomSampled {
            prop_assert!(plan.positions.iter().all(|p| p.fract() == 0.0));
        }
        if mode == PositionMode::Natural {
            prop_assert!(plan.positions.iter().enumerate().all(|(j, &p)| p == (j + 1) as f64));
        }
    }

    #[test]
    fn log_basis_round_trips(z in prop::collection::vec(-20.0f64..2.0, 1..64)) {
        let basis = LogBasis::new(z.clone()).to_basis(DEFAULT_BASE).unwrap();
        for (a, b) in basis.to_log().z().iter().zip(&z) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trips(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..6),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<(String, Tensor<f64>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.iter().product();
                (format!("p{i}"), Tensor::new(s.clone(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap())
            })
            .collect();
        let back = decode::<f64>(&encode(&entries)).unwrap();
        prop_assert_eq!(back, entries.clone());
        let narrowed = decode::<f32>(&encode(&entries)).unwrap();
        for ((_, a), (_, b)) in narrowed.iter().zip(&entries) {
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == *y as f32));
        }
    }
}
