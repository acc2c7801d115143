use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wmrl::agent::RatioScheduler;
use wmrl::behavior::{imagined_lambda_returns, lambda_returns};
use wmrl::distributions::{kl_categorical, symexp, symlog, CategoricalLatentSpec, TwoHotCoder};
use wmrl::replay::{dequantize, quantize, ReplayBuffer, Transition};

fn step(env_id: usize, tag: f32, is_first: bool) -> Transition {
    Transition { obs: vec![0; 3 * 16 * 16], action: vec![tag], reward: tag, cont: 1.0, is_first, env_id }
}

proptest! {
    #[test]
    fn symexp_inverts_symlog(x in -1e6f64..1e6) {
        let back = symexp(symlog(x));
        prop_assert!((back - x).abs() <= 1e-6 * x.abs().max(1.0));
        prop_assert_eq!(symlog(-x), -symlog(x));
    }

    #[test]
    fn symlog_is_monotone(a in -1e4f64..1e4, b in -1e4f64..1e4) {
        prop_assume!(a < b);
        prop_assert!(symlog(a) < symlog(b));
    }

    #[test]
    fn twohot_is_a_two_atom_distribution_that_decodes_back(t in -20.0f64..=20.0) {
        let coder = TwoHotCoder::default();
        let enc = coder.encode(t);
        prop_assert!(enc.iter().all(|p| *p >= 0.0));
        prop_assert!(enc.iter().filter(|p| **p > 0.0).count() <= 2);
        prop_assert!((enc.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((coder.decode(&enc).unwrap() - t).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(
        p in prop::collection::vec(-6.0f64..6.0, 16),
        q in prop::collection::vec(-6.0f64..6.0, 16),
    ) {
        let spec = CategoricalLatentSpec { num_latents: 4, classes_per_latent: 4, unimix: 0.01 };
        let t = |v: &[f64]| Tensor::from_slice(v, (4, 4), &Device::Cpu).unwrap();
        prop_assert!(kl_categorical(&t(&p), &t(&q), &spec).unwrap() >= -1e-12);
        prop_assert!(kl_categorical(&t(&p), &t(&p), &spec).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tensor_and_scalar_lambda_returns_agree(
        h in 1usize..=8,
        seed in any::<u64>(),
        gamma in 0.5f64..1.0,
        lambda in 0.0f64..=1.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..h).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c: Vec<f64> = (0..h).map(|_| rng.random_range(0.0..=1.0)).collect();
        let v: Vec<f64> = (0..=h).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scalar = lambda_returns(&r, &c, &v, gamma, lambda).unwrap();
        let t = |x: &[f64]| Tensor::from_slice(x, (1, x.len()), &Device::Cpu).unwrap();
        let tensor: Vec<f64> = imagined_lambda_returns(&t(&r), &t(&c), &t(&v), gamma, lambda)
            .unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in tensor.iter().zip(&scalar) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ratio_stays_within_one_update_of_exact(
        ratio in 1u64..2048,
        b in 1usize..32,
        t in 1usize..96,
        chunks in prop::collection::vec(1u64..20, 1..50),
    ) {
        let mut s = RatioScheduler::new(ratio, b, t);
        let exact = ratio as f64 / (b * t) as f64;
        for n in chunks {
            let before = s.policy_steps;
            let updates_before = s.updates;
            s.observe(n);
            while s.pending() > 0 {
                s.record_update();
            }
            let window = (s.updates - updates_before) as f64;
            let steps = (s.policy_steps - before) as f64;
            prop_assert!(window >= (steps * exact - 1e-9).floor() && window <= (steps * exact + 1e-9).ceil());
            let total = s.policy_steps as f64 * exact;
            prop_assert!(s.updates as f64 >= total.floor() - 1e-9 && s.updates as f64 <= total.ceil() + 1e-9);
        }
    }

    #[test]
    fn quantization_roundtrip_within_one_level(v in prop::collection::vec(0.0f32..=1.0, 1..64)) {
        for (a, b) in dequantize(&quantize(&v)).iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replay_is_bounded_fifo_and_windows_are_contiguous(
        capacity in 8usize..64,
        ops in prop::collection::vec((0usize..3, any::<bool>()), 1..200),
        seed in any::<u64>(),
    ) {
        let buffer = ReplayBuffer::new(capacity, 16, 1).unwrap();
        let mut counters = [0f32; 3];
        let mut log: Vec<(usize, f32)> = Vec::new();
        for (env, first) in ops {
            let first = first || counters[env] == 0.0;
            counters[env] += 1.0;
            // Tag encodes (env, position) so contiguity is checkable after sampling.
            let tag = env as f32 * 10_000.0 + counters[env];
            buffer.append(step(env, tag, first)).unwrap();
            log.push((env, tag));
            prop_assert!(buffer.len() <= capacity);
        }
        prop_assert_eq!(buffer.len(), log.len().min(capacity));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let length = 4;
        if buffer.window_count(length) == 0 {
            return Ok(());
        }
        let batch = buffer.sample(8, length, &mut rng).unwrap();
        // Only the newest `capacity` appends may be sampled.
        let survivors: Vec<f32> = log[log.len().saturating_sub(capacity)..].iter().map(|(_, t)| *t).collect();
        for row in batch.rewards.chunks(length) {
            for w in row.windows(2) {
                prop_assert_eq!(w[1] - w[0], 1.0);
                prop_assert_eq!((w[0] / 10_000.0).floor(), (w[1] / 10_000.0).floor());
            }
            prop_assert!(row.iter().all(|t| survivors.contains(t)));
        }
    }
}

#[test]
fn straight_through_samples_are_one_hot() {
    use wmrl::distributions::categorical_sample_st;
    let spec = CategoricalLatentSpec { num_latents: 6, classes_per_latent: 5, unimix: 0.01 };
    let logits = Tensor::randn(0f64, 2.0, (6, 5), &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let s = categorical_sample_st(&logits, &spec, &mut rng).unwrap().to_dtype(DType::F64).unwrap();
        for row in s.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row.iter().filter(|v| (**v - 1.0).abs() < 1e-12).count(), 1);
        }
    }
}
