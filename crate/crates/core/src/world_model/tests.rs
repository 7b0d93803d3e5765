use super::*;
use crate::replay::{Episode, SegmentBatch};
use crate::rng::seeded;

const OBS: usize = 5;
const ACT: usize = 2;

fn small(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        variant,
        x: FactorSize::new(6, 3),
        y: FactorSize::new(5, 2),
        z: FactorSize::new(4, 2),
        monolithic: FactorSize::new(8, 4),
        hidden_width: 16,
        embed_dim: 8,
        ..ModelConfig::default()
    }
}

fn model(variant: ModelVariant) -> WorldModel {
    WorldModel::new(small(variant), OBS, ACT, 11).unwrap()
}

fn random_state<'t>(m: &WorldModel, tape: &'t Tape, batch: usize, seed: u64) -> LatentState<'t> {
    let mut rng = seeded(seed, 0);
    let snap = LatentSnapshot {
        variant: m.variant(),
        deter: m
            .variant()
            .factors()
            .iter()
            .map(|&f| Tensor::randn([batch, m.config().size(f).deter], &mut rng))
            .collect(),
        stoch: m
            .variant()
            .factors()
            .iter()
            .map(|&f| Tensor::randn([batch, m.config().size(f).stoch], &mut rng))
            .collect(),
    };
    snap.to_state(tape)
}

fn segment(len: usize, batch: usize, seed: u64) -> SegmentBatch {
    let mut rng = seeded(seed, 1);
    let eps: Vec<Episode> = (0..batch)
        .map(|_| {
            let mut e = Episode::new(OBS, ACT, 0);
            for _ in 0..len {
                let o = Tensor::randn([OBS], &mut rng);
                let a = Tensor::uniform([ACT], -1.0, 1.0, &mut rng);
                let r = Tensor::randn([1], &mut rng);
                e.push(o.data(), a.data(), r.item(), &[]);
            }
            e
        })
        .collect();
    let refs: Vec<&Episode> = eps.iter().collect();
    let windows: Vec<(usize, usize)> = (0..batch).map(|b| (b, 0)).collect();
    SegmentBatch::from_windows(&refs, &windows, len).unwrap()
}

#[test]
fn y_prior_ignores_action() {
    for variant in [ModelVariant::Xy, ModelVariant::Xyz] {
        let m = model(variant);
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let prev = random_state(&m, &tape, 3, 1);
        let a1 = tape.constant(Tensor::full([3, ACT], 0.7));
        let a2 = tape.constant(Tensor::full([3, ACT], -0.4));
        let s1 = m.prior_step(&tape, &p, &prev, a1, &mut Sampling::Mean).unwrap();
        let s2 = m.prior_step(&tape, &p, &prev, a2, &mut Sampling::Mean).unwrap();
        let (y1, y2) = (s1.factor(Factor::Y).unwrap(), s2.factor(Factor::Y).unwrap());
        assert_eq!(y1.dist.mean.value().data(), y2.dist.mean.value().data());
        assert_eq!(y1.dist.std.value().data(), y2.dist.std.value().data());
        assert_eq!(y1.deter.value().data(), y2.deter.value().data());
        let x1 = s1.factor(Factor::X).unwrap();
        let x2 = s2.factor(Factor::X).unwrap();
        assert_ne!(x1.deter.value().data(), x2.deter.value().data());
    }
}

#[test]
fn y_prior_has_zero_action_gradient() {
    let m = model(ModelVariant::Xyz);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let prev = random_state(&m, &tape, 2, 3);
    let a = tape.variable(Tensor::full([2, ACT], 0.3));
    let s = m.prior_step(&tape, &p, &prev, a, &mut Sampling::Mean).unwrap();
    let y = s.factor(Factor::Y).unwrap();
    let obj = y.dist.mean.sum().add(y.dist.std.sum()).unwrap();
    let g = tape.backward(obj).unwrap();
    assert!(g.get(a).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn x_prior_has_zero_gradient_from_other_factors() {
    for variant in [ModelVariant::Xy, ModelVariant::Xyz, ModelVariant::XyzModifiedZPrior] {
        let m = model(variant);
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let mut prev = random_state(&m, &tape, 2, 4);
        let mut others = Vec::new();
        for l in prev.factors.iter_mut().filter(|l| l.factor != Factor::X) {
            l.deter = tape.variable((*l.deter.value()).clone());
            l.stoch = tape.variable((*l.stoch.value()).clone());
            others.push(l.deter);
            others.push(l.stoch);
        }
        let a = tape.constant(Tensor::full([2, ACT], 0.1));
        let s = m.prior_step(&tape, &p, &prev, a, &mut Sampling::Mean).unwrap();
        let x = s.factor(Factor::X).unwrap();
        let obj = x.dist.mean.sum().add(x.dist.std.sum()).unwrap();
        let g = tape.backward(obj).unwrap();
        for v in others {
            assert!(g.get(v).map_or(true, |t| t.data().iter().all(|&e| e == 0.0)));
        }
    }
}

#[test]
fn monolithic_prior_is_single_factor() {
    let m = model(ModelVariant::Monolithic);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let prev = m.initial_state(&tape, 4);
    let a = tape.constant(Tensor::zeros([4, ACT]));
    let s = m.prior_step(&tape, &p, &prev, a, &mut Sampling::Mean).unwrap();
    assert_eq!(s.factors.len(), 1);
    assert_eq!(s.factors[0].deter.shape(), vec![4, 8]);
    assert_eq!(s.factors[0].stoch.shape(), vec![4, 4]);
}

#[test]
fn variant_mismatch_is_rejected() {
    let xy = model(ModelVariant::Xy);
    let mono = model(ModelVariant::Monolithic);
    let tape = Tape::new();
    let p = xy.store.bind(&tape);
    let prev = mono.initial_state(&tape, 1);
    let a = tape.constant(Tensor::zeros([1, ACT]));
    assert!(xy.prior_step(&tape, &p, &prev, a, &mut Sampling::Mean).is_err());
}

#[test]
fn sampling_is_seeded() {
    let m = model(ModelVariant::Xyz);
    let seg = segment(4, 3, 0);
    let run = || {
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let mut rng = seeded(5, 0);
        let obs = m.observe_sequence(&tape, &p, &seg, &mut Sampling::Random(&mut rng)).unwrap();
        obs.posteriors.iter().map(|s| s.snapshot()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn first_step_uses_zero_conditioning() {
    let m = model(ModelVariant::Xyz);
    let seg = segment(3, 2, 1);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let obs = m.observe_sequence(&tape, &p, &seg, &mut Sampling::Mean).unwrap();
    let zero = m.initial_state(&tape, 2);
    let o = tape.constant(seg.obs[0].clone());
    let a = tape.constant(Tensor::zeros([2, ACT]));
    let direct = m.posterior_step(&tape, &p, &zero, o, a, &mut Sampling::Mean).unwrap();
    assert_eq!(direct.snapshot(), obs.posteriors[0].snapshot());
}

#[test]
fn prior_and_posterior_share_recurrence() {
    let m = model(ModelVariant::Xyz);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let prev = random_state(&m, &tape, 2, 6);
    let a = tape.constant(Tensor::full([2, ACT], 0.5));
    let o = tape.constant(Tensor::ones([2, OBS]));
    let prior = m.prior_step(&tape, &p, &prev, a, &mut Sampling::Mean).unwrap();
    let post = m.posterior_step(&tape, &p, &prev, o, a, &mut Sampling::Mean).unwrap();
    for (a, b) in prior.factors.iter().zip(&post.factors) {
        assert_eq!(a.deter.value().data(), b.deter.value().data());
    }
}

#[test]
fn kl_terms_are_nonnegative() {
    for variant in ModelVariant::ALL {
        let m = model(variant);
        let seg = segment(6, 4, 2);
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let mut rng = seeded(1, 0);
        let obs = m.observe_sequence(&tape, &p, &seg, &mut Sampling::Random(&mut rng)).unwrap();
        for (post, priors) in obs.posteriors.iter().zip(&obs.priors) {
            for (l, pr) in post.factors.iter().zip(priors) {
                let k = crate::distributions::kl(&l.dist, pr).unwrap();
                assert!(k.value().data().iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn reward_heads_read_only_their_factor() {
    let m = model(ModelVariant::Xyz);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let base = random_state(&m, &tape, 3, 7);
    let perturb = |state: &LatentState<'_>, which: &[Factor]| {
        let mut s = state.snapshot();
        for &f in which {
            let i = s.factor_index(f).unwrap();
            s.deter[i] = s.deter[i].map(|v| v + 1.5);
            s.stoch[i] = s.stoch[i].map(|v| -v);
        }
        s
    };
    let d0 = m.decode(&tape, &p, &base).unwrap();
    let yz = perturb(&base, &[Factor::Y, Factor::Z]).to_state(&tape);
    let d1 = m.decode(&tape, &p, &yz).unwrap();
    assert_eq!(d0.reward_x.mean.value().data(), d1.reward_x.mean.value().data());
    assert_ne!(d0.obs.mean.value().data(), d1.obs.mean.value().data());
    let x = perturb(&base, &[Factor::X]).to_state(&tape);
    let d2 = m.decode(&tape, &p, &x).unwrap();
    let (ry0, ry2) = (d0.reward_y.unwrap(), d2.reward_y.unwrap());
    assert_eq!(ry0.mean.value().data(), ry2.mean.value().data());
}

#[test]
fn reward_x_has_zero_gradient_from_y_and_z() {
    let m = model(ModelVariant::Xyz);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let mut s = random_state(&m, &tape, 2, 8);
    let mut others = Vec::new();
    for l in s.factors.iter_mut().filter(|l| l.factor != Factor::X) {
        l.stoch = tape.variable((*l.stoch.value()).clone());
        others.push(l.stoch);
    }
    let d = m.decode(&tape, &p, &s).unwrap();
    let g = tape.backward(d.reward_x.mean.sum()).unwrap();
    for v in others {
        assert!(g.get(v).map_or(true, |t| t.data().iter().all(|&e| e == 0.0)));
    }
}

#[test]
fn monolithic_has_one_reward_head() {
    let m = model(ModelVariant::Monolithic);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let s = random_state(&m, &tape, 2, 9);
    let d = m.decode(&tape, &p, &s).unwrap();
    assert!(d.reward_y.is_none());
    assert_eq!(d.reward.mean.value().data(), d.reward_x.mean.value().data());
    assert_eq!(d.reward.std.value().data(), d.reward_x.std.value().data());
}

#[test]
fn composed_reward_has_variance_two() {
    let m = model(ModelVariant::Xy);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let s = random_state(&m, &tape, 2, 9);
    let d = m.decode(&tape, &p, &s).unwrap();
    for &sd in d.reward.std.value().data() {
        assert!((sd * sd - 2.0).abs() < 1e-12);
    }
}

#[test]
fn sequence_output_lengths() {
    let m = model(ModelVariant::Xy);
    for len in [1, 5] {
        let seg = segment(len, 2, 3);
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let obs = m.observe_sequence(&tape, &p, &seg, &mut Sampling::Mean).unwrap();
        assert_eq!(obs.posteriors.len(), len);
        assert_eq!(obs.priors.len(), len);
        assert!(obs.priors.iter().all(|p| p.len() == 2));
    }
}

#[test]
fn nan_observation_reports_step() {
    let m = model(ModelVariant::Xy);
    let mut seg = segment(4, 2, 3);
    seg.obs[2].data_mut()[0] = f64::NAN;
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    match m.observe_sequence(&tape, &p, &seg, &mut Sampling::Mean) {
        Err(Error::Numerical { step, .. }) => assert_eq!(step, 2),
        other => panic!("expected numerical error, got {:?}", other.err()),
    }
}

#[test]
fn total_follows_weighted_sum() {
    assert_eq!(combine_terms(10.0, 2.0, 1.0, 1.0, 1.0, 0.5), 13.0);
    let b = LossBreakdown {
        total: 0.0,
        recon: 3.25,
        kl_x_effective: 0.75,
        kl_y: 1.5,
        kl_z: 0.5,
        alpha: 2.0,
        beta: 0.25,
        ..Default::default()
    };
    assert_eq!(b.recompute_total(), 3.25 + 2.0 * 0.75 + 2.0 * 0.25 * 2.0);
}

fn normal_logpdf(x: f64, mu: f64, sd: f64) -> f64 {
    -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn normal_kl(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
}

#[test]
fn unit_weights_give_negative_elbo() {
    for variant in ModelVariant::ALL {
        let mut cfg = small(variant);
        cfg.alpha = 1.0;
        cfg.beta = 1.0;
        cfg.free_nats = 0.0;
        let m = WorldModel::new(cfg, OBS, ACT, 3).unwrap();
        let seg = segment(4, 3, 4);
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let mut rng = seeded(2, 0);
        let (obs, out) = m.loss(&tape, &p, &seg, &mut Sampling::Random(&mut rng)).unwrap();

        let batch = seg.batch_size();
        let mut nll = 0.0;
        let mut kl_sum = 0.0;
        for t in 0..seg.len() {
            let d = m.decode(&tape, &p, &obs.posteriors[t]).unwrap();
            let om = d.obs.mean.value();
            let rm = d.reward.mean.value();
            let rs = d.reward.std.value();
            for b in 0..batch {
                for j in 0..OBS {
                    nll -= normal_logpdf(seg.obs[t].row(b)[j], om.row(b)[j], 1.0);
                }
                nll -= normal_logpdf(seg.rewards[t].row(b)[0], rm.row(b)[0], rs.row(b)[0]);
            }
            for (l, pr) in obs.posteriors[t].factors.iter().zip(&obs.priors[t]) {
                let (mq, sq) = (l.dist.mean.value(), l.dist.std.value());
                let (mp, sp) = (pr.mean.value(), pr.std.value());
                for i in 0..mq.numel() {
                    kl_sum += normal_kl(mq.data()[i], sq.data()[i], mp.data()[i], sp.data()[i]);
                }
            }
        }
        let neg_elbo = (nll + kl_sum) / batch as f64;
        let got = out.breakdown.total;
        assert!((got - neg_elbo).abs() < 1e-10 * neg_elbo.abs().max(1.0), "{variant:?}: {got} vs {neg_elbo}");
        assert!((out.breakdown.recon - nll / batch as f64).abs() < 1e-10 * nll.abs().max(1.0));
        assert_eq!(out.breakdown.recompute_total(), got);
    }
}

#[test]
fn free_nats_floor_blocks_gradient() {
    let mut cfg = small(ModelVariant::Xy);
    cfg.free_nats = 1e4;
    let m = WorldModel::new(cfg, OBS, ACT, 3).unwrap();
    let seg = segment(3, 2, 5);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let (_, out) = m.loss(&tape, &p, &seg, &mut Sampling::Mean).unwrap();
    assert!(out.breakdown.kl_x < 3.0 * 1e4);
    assert!((out.breakdown.kl_x_effective - 3.0 * 1e4).abs() < 1e-9);
    let g = tape.backward(out.terms.kl_x_effective).unwrap();
    let mut store = m.store.clone();
    store.accumulate(&p, &g);
    store.fill_missing_grads();
    assert_eq!(store.grad_norm(), 0.0);
}

#[test]
fn split_strategy_keeps_unclamped_share() {
    let mut cfg = small(ModelVariant::Xy);
    cfg.free_nats = 1e4;
    cfg.free_nats_strategy = FreeNatsStrategy::SplitVaeVsMi;
    cfg.beta = 0.25;
    let m = WorldModel::new(cfg, OBS, ACT, 3).unwrap();
    let seg = segment(3, 2, 5);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let (_, out) = m.loss(&tape, &p, &seg, &mut Sampling::Mean).unwrap();
    let b = out.breakdown;
    let expected = 0.25 * 3.0 * 1e4 + 0.75 * b.kl_x;
    assert!((b.kl_x_effective - expected).abs() < 1e-9);
    let g = tape.backward(out.terms.kl_x_effective).unwrap();
    let mut store = m.store.clone();
    store.accumulate(&p, &g);
    assert!(store.grad_norm() > 0.0);
}

fn head_policy(f: Var<'_>, offset: usize) -> Result<Var<'_>> {
    Ok(f.slice_cols(offset, offset + ACT)?.tanh())
}

#[test]
fn imagination_shapes_and_errors() {
    let m = model(ModelVariant::Xy);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let start = random_state(&m, &tape, 3, 1);
    let im = m.imagine(&tape, &p, &start, 1, |f, _| head_policy(f, 0), &mut Sampling::Mean).unwrap();
    assert_eq!(im.features.len(), 2);
    assert_eq!(im.actions.len(), 1);
    assert_eq!(im.rewards.len(), 1);
    assert_eq!(im.rewards[0].shape(), vec![3, 1]);
    assert!(m.imagine(&tape, &p, &start, 0, |f, _| head_policy(f, 0), &mut Sampling::Mean).is_err());
}

#[test]
fn imagination_ignores_noise_factors() {
    let m = model(ModelVariant::Xyz);
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let a = random_state(&m, &tape, 2, 1);
    let b_other = random_state(&m, &tape, 2, 2);
    let mut b = a.clone();
    for (l, o) in b.factors.iter_mut().zip(&b_other.factors) {
        if l.factor != Factor::X {
            *l = *o;
        }
    }
    let ra = m.imagine(&tape, &p, &a, 5, |f, _| head_policy(f, 1), &mut Sampling::Mean).unwrap();
    let rb = m.imagine(&tape, &p, &b, 5, |f, _| head_policy(f, 1), &mut Sampling::Mean).unwrap();
    for (x, y) in ra.rewards.iter().zip(&rb.rewards) {
        assert_eq!(x.value().data(), y.value().data());
    }
}

#[test]
fn imagined_reward_gradient_matches_finite_differences() {
    let m = model(ModelVariant::Xy);
    let start_snap = {
        let tape = Tape::new();
        random_state(&m, &tape, 2, 12).snapshot()
    };
    let objective = |theta: [f64; 2], want_grad: bool| -> (f64, Option<Vec<f64>>) {
        let tape = Tape::new();
        let p = m.store.bind_frozen(&tape);
        let start = start_snap.to_state(&tape);
        let th = tape.variable(Tensor::vector(theta.to_vec()));
        // Two parameters, one per action dimension.
        let im = m
            .imagine(&tape, &p, &start, 4, |f, _| f.slice_cols(0, ACT)?.scale(0.0).add(th).map(|v| v.tanh()), &mut Sampling::Mean)
            .unwrap();
        let mut total = im.rewards[0].sum();
        for r in &im.rewards[1..] {
            total = total.add(r.sum()).unwrap();
        }
        let grad = if want_grad {
            Some(tape.backward(total).unwrap().get(th).unwrap().data().to_vec())
        } else {
            None
        };
        (total.item(), grad)
    };
    let theta = [0.3, -0.2];
    let (_, g) = objective(theta, true);
    let g = g.unwrap();
    let h = 1e-5;
    for i in 0..2 {
        let mut up = theta;
        let mut dn = theta;
        up[i] += h;
        dn[i] -= h;
        let fd = (objective(up, false).0 - objective(dn, false).0) / (2.0 * h);
        let rel = (g[i] - fd).abs() / fd.abs().max(1e-8);
        assert!(rel < 1e-3, "param {i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn save_and_load_round_trip() {
    let m = model(ModelVariant::Xyz);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    m.save(&path).unwrap();
    let mut other = WorldModel::new(small(ModelVariant::Xyz), OBS, ACT, 99).unwrap();
    assert!(!other.store.values_bitwise_eq(&m.store));
    other.load_params(&path).unwrap();
    assert!(other.store.values_bitwise_eq(&m.store));
}
