use proptest::prelude::*;

use dmdp_core::config::RunConfig;
use dmdp_core::distributions::{compose_reward, kl, DiagGaussian};
use dmdp_core::env::{Env, EnvConfig, EnvVariant};
use dmdp_core::policy::lambda_return;
use dmdp_core::probe::{denoising_score, r_squared};
use dmdp_core::replay::{Episode, ReplayBuffer};
use dmdp_core::rng::seeded;
use dmdp_core::tensor::{clip_grad_norm, ParameterStore, Tape, Tensor};

fn gaussian<'t>(tape: &'t Tape, m: &[f64], s: &[f64]) -> DiagGaussian<'t> {
    DiagGaussian::new(
        tape.constant(Tensor::matrix(1, m.len(), m.to_vec()).unwrap()),
        tape.constant(Tensor::matrix(1, s.len(), s.to_vec()).unwrap()),
    )
    .unwrap()
}

fn params(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-3.0..3.0f64, dim),
        prop::collection::vec(0.05..3.0f64, dim),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_is_nonnegative((mq, sq) in params(3), (mp, sp) in params(3)) {
        let tape = Tape::new();
        let v = kl(&gaussian(&tape, &mq, &sq), &gaussian(&tape, &mp, &sp)).unwrap().item();
        prop_assert!(v >= -1e-12);
    }

    #[test]
    fn compose_is_commutative_and_associative(
        (m1, s1) in params(2), (m2, s2) in params(2), (m3, s3) in params(2)
    ) {
        let tape = Tape::new();
        let (a, b, c) = (gaussian(&tape, &m1, &s1), gaussian(&tape, &m2, &s2), gaussian(&tape, &m3, &s3));
        let ab = compose_reward(&a, &b).unwrap();
        let ba = compose_reward(&b, &a).unwrap();
        prop_assert_eq!(ab.mean.value().data().to_vec(), ba.mean.value().data().to_vec());
        prop_assert_eq!(ab.std.value().data().to_vec(), ba.std.value().data().to_vec());
        let left = compose_reward(&ab, &c).unwrap();
        let right = compose_reward(&a, &compose_reward(&b, &c).unwrap()).unwrap();
        for (x, y) in left.mean.value().data().iter().zip(right.mean.value().data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in left.std.value().data().iter().zip(right.std.value().data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_never_increases_the_norm(
        g in prop::collection::vec(-50.0..50.0f64, 1..20), max in 0.01..100.0f64
    ) {
        let mut store = ParameterStore::new();
        store.add("w", Tensor::zeros([g.len()])).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let w = p.get(store.id("w").unwrap());
        let loss = w.mul(tape.constant(Tensor::vector(g.clone()))).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&p, &grads);
        let before = store.grad_norm();
        let scale = clip_grad_norm(&mut store, max).unwrap();
        let after = store.grad_norm();
        prop_assert!(after <= before * (1.0 + 1e-12));
        prop_assert!(after <= max * (1.0 + 1e-12));
        prop_assert!(scale <= 1.0);
    }

    #[test]
    fn lambda_return_satisfies_its_recursion(
        r in prop::collection::vec(-5.0..5.0f64, 1..20),
        vals in prop::collection::vec(-5.0..5.0f64, 21),
        gamma in 0.0..1.0f64, lambda in 0.0..=1.0f64,
    ) {
        let h = r.len();
        let v = &vals[..h + 1];
        let g = lambda_return(&r, v, gamma, lambda).unwrap();
        for t in 0..h {
            let next = if t + 1 < h { g[t + 1] } else { v[h] };
            let expect = r[t] + gamma * ((1.0 - lambda) * v[t + 1] + lambda * next);
            prop_assert_eq!(g[t], expect);
        }
    }

    #[test]
    fn windows_stay_inside_episodes(
        lens in prop::collection::vec(1usize..30, 1..6), len in 1usize..12, seed in 0u64..1000
    ) {
        let mut buf = ReplayBuffer::new(10_000);
        for (e, &n) in lens.iter().enumerate() {
            let mut ep = Episode::new(1, 1, 0);
            for t in 0..n {
                ep.push(&[(e * 100 + t) as f64], &[0.0], 0.0, &[]);
            }
            buf.push(ep);
        }
        let mut rng = seeded(seed, 0);
        match buf.sample_windows(32, len, &mut rng) {
            Ok(ws) => {
                let eps: Vec<&Episode> = buf.episodes().collect();
                for (e, start) in ws {
                    prop_assert!(start + len <= eps[e].len());
                }
            }
            Err(_) => prop_assert!(lens.iter().all(|&n| n < len)),
        }
    }

    #[test]
    fn r_squared_is_at_most_one(
        truth in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 2), 3..40),
        noise in prop::collection::vec(-3.0..3.0f64, 80),
    ) {
        let pred: Vec<Vec<f64>> = truth
            .iter()
            .enumerate()
            .map(|(i, t)| vec![t[0] + noise[2 * i], t[1] * noise[2 * i + 1]])
            .collect();
        let refs: Vec<&[f64]> = truth.iter().map(|t| t.as_slice()).collect();
        if let Some(r2) = r_squared(&pred, &refs) {
            prop_assert!(r2 <= 1.0);
        }
    }

    #[test]
    fn denoising_score_is_antisymmetric(a in -2.0..1.0f64, b in -2.0..1.0f64) {
        let ab = denoising_score(Some(a), Some(b)).unwrap();
        let ba = denoising_score(Some(b), Some(a)).unwrap();
        prop_assert_eq!(ab, -ba);
    }

    #[test]
    fn episode_length_is_ceil_of_cap_over_repeat(cap in 1usize..60, repeat in 1usize..5, seed in 0u64..100) {
        let mut env = Env::new(EnvConfig {
            variant: EnvVariant::Noiseless,
            episode_cap: cap,
            action_repeat: repeat,
            ..EnvConfig::default()
        })
        .unwrap();
        env.reset(seed);
        let mut steps = 0;
        loop {
            steps += 1;
            if env.step(&[0.5, -0.5]).unwrap().done {
                break;
            }
        }
        prop_assert_eq!(steps, cap.div_ceil(repeat));
    }

    #[test]
    fn config_round_trip_is_idempotent(
        seed in 0u64..1_000_000, beta in 0.01..=1.0f64, alpha in 0.01..4.0f64, cap in 2usize..2000
    ) {
        let mut run = RunConfig::default();
        run.seed = seed;
        run.model.beta = beta;
        run.model.alpha = alpha;
        run.env.episode_cap = cap;
        let text = run.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(&back, &run);
        prop_assert_eq!(back.to_toml_string().unwrap(), text);
    }
}
