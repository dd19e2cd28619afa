use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::error::Error;
use crate::rng::substream;

fn small_arch() -> ArchConfig {
    ArchConfig::new(8, 4).with_shallow_filters(3).with_pools([2, 1], [2, 2])
}

fn random_inputs(batch: usize, features: usize, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, &[99]);
    (0..batch * features).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()
}

fn random_labels(batch: usize, n_f: usize, seed: u64) -> Vec<u8> {
    let mut rng = substream(seed, &[98]);
    (0..batch * n_f).map(|_| u8::from(rng.random::<bool>())).collect()
}

/// Perturbs batchnorm scales/shifts and running statistics away from their
/// initial values so eval-mode tests exercise them.
fn jitter_batchnorm(p: &mut ModelParams, seed: u64) {
    let mut rng = substream(seed, &[97]);
    let layout = p.layout().clone();
    let blocks = p.blocks_mut();
    let mut jitter = |v: &mut [f64], segs: &[Segment]| {
        for s in segs.iter().filter(|s| s.name.starts_with("bn")) {
            for x in v[s.range()].iter_mut() {
                *x += rng.random::<f64>() * 0.4 + 0.05;
            }
        }
    };
    jitter(&mut blocks.shallow, &layout.shallow);
    for d in blocks.deep.iter_mut() {
        jitter(d, &layout.deep);
    }
}

fn loss_of(p: &ModelParams, x: &[f64], y: &[u8], mask: &[u8]) -> f64 {
    let (pred, _) = forward(p, x, Mode::Train).unwrap();
    batch_bce_loss(&pred, y, mask).unwrap().value
}

fn check_gradients(mask: &[u8], seed: u64) {
    let arch = small_arch();
    let mut p = ModelParams::init_seeded(arch, seed).unwrap();
    jitter_batchnorm(&mut p, seed);
    let batch = 2;
    let x = random_inputs(batch, 32, seed);
    let y = random_labels(batch, 4, seed);
    let (_, cache) = forward(&p, &x, Mode::Train).unwrap();
    let g = backward(&p, &cache.unwrap(), &y, mask).unwrap();
    let h = 1e-5;
    let layout = p.layout().clone();
    let mut checked = 0;
    let mut probe = |block: Option<usize>, segs: &[Segment], grad: &[f64]| {
        for s in segs.iter().filter(|s| s.kind == SegmentKind::Weight) {
            for i in s.range() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                match block {
                    None => {
                        plus.shallow_mut()[i] += h;
                        minus.shallow_mut()[i] -= h;
                    }
                    Some(n) => {
                        plus.deep_mut(n)[i] += h;
                        minus.deep_mut(n)[i] -= h;
                    }
                }
                let numeric = (loss_of(&plus, &x, &y, mask) - loss_of(&minus, &x, &y, mask)) / (2.0 * h);
                let analytic = grad[i];
                let tol = (1e-4 * analytic.abs().max(numeric.abs())).max(1e-7);
                assert!(
                    (analytic - numeric).abs() <= tol,
                    "{} [{i}] block {block:?}: analytic {analytic} numeric {numeric}",
                    s.name
                );
                checked += 1;
            }
        }
    };
    probe(None, &layout.shallow, &g.shallow);
    for n in 0..4 {
        probe(Some(n), &layout.deep, &g.deep[n]);
    }
    assert!(checked > 100);
}

#[test]
fn gradients_match_finite_differences() {
    check_gradients(&[1, 1, 1, 1], 1);
}

#[test]
fn masked_gradients_match_finite_differences() {
    check_gradients(&[1, 0, 1, 0], 2);
}

#[test]
fn default_pooling_dimensions() {
    let d = ArchConfig::new(64, 20).dims().unwrap();
    assert_eq!((d.mid_h, d.mid_w, d.out_h, d.out_w, d.head_in), (16, 20, 4, 4, 48));
    assert_eq!((d.c2, d.c3), (40, 60));
    let d = ArchConfig::new(32, 8).dims().unwrap();
    assert_eq!((d.max_pool, d.avg_pool, d.head_in), ([2, 1], [4, 2], 48));
    assert!(ArchConfig::new(8, 4).dims().is_err());
    assert!(ArchConfig::new(64, 6).dims().is_err());
    assert!(ArchConfig::new(64, 8).with_pools([3, 1], [4, 2]).dims().is_err());
    // square max-pool variant
    let d = ArchConfig::new(64, 20).with_pools([2, 2], [8, 5]).dims().unwrap();
    assert_eq!((d.out_h, d.out_w), (4, 2));
}

#[test]
fn parameter_blocks_have_uniform_shape() {
    let p = ModelParams::init_seeded(ArchConfig::new(32, 8).with_shallow_filters(16), 3).unwrap();
    let len = p.deep(0).len();
    assert!((0..8).all(|n| p.deep(n).len() == len));
    assert_eq!(len, 54 + 12 + 48 + 1);
    assert_eq!(p.shallow().len(), 16 * 9 + 4 * 16 + 16 * 16 * 9 + 4 * 16);
}

#[test]
fn zero_input_gives_half() {
    let p = ModelParams::init_seeded(small_arch(), 5).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let (pred, _) = forward(&p, &[0.0; 64], mode).unwrap();
        assert!(pred.probs.iter().all(|&q| q == 0.5), "{mode:?} {:?}", pred.probs);
    }
}

#[test]
fn input_shape_checked() {
    let p = ModelParams::init_seeded(small_arch(), 5).unwrap();
    assert!(matches!(forward(&p, &[0.0; 33], Mode::Eval), Err(Error::Dimension(_))));
    assert!(matches!(forward(&p, &[], Mode::Eval), Err(Error::Dimension(_))));
}

#[test]
fn eval_mode_has_no_cache_and_train_mode_does() {
    let p = ModelParams::init_seeded(small_arch(), 5).unwrap();
    let x = random_inputs(3, 32, 1);
    assert!(forward(&p, &x, Mode::Eval).unwrap().1.is_none());
    assert_eq!(forward(&p, &x, Mode::Train).unwrap().1.unwrap().batch(), 3);
}

#[test]
fn reused_buffers_match_fresh_ones() {
    let p = ModelParams::init_seeded(small_arch(), 18).unwrap();
    let mut cache = ForwardCache::default();
    let mut scratch = BackwardScratch::default();
    let mut grads = p.zero_gradients();
    // different batch sizes exercise buffer growth and shrinkage
    for (batch, seed) in [(4, 1), (2, 2), (3, 3)] {
        let x = random_inputs(batch, 32, seed);
        let y = random_labels(batch, 4, seed);
        let pred = forward_into(&p, &x, Mode::Train, &mut cache).unwrap();
        backward_into(&p, &cache, &y, &[1, 1, 0, 1], &mut grads, &mut scratch).unwrap();
        let (fresh_pred, fresh_cache) = forward(&p, &x, Mode::Train).unwrap();
        assert_eq!(pred, fresh_pred);
        assert_eq!(grads, backward(&p, &fresh_cache.unwrap(), &y, &[1, 1, 0, 1]).unwrap());
    }
    forward_into(&p, &random_inputs(2, 32, 4), Mode::Eval, &mut cache).unwrap();
    assert!(backward_into(&p, &cache, &[0; 8], &[1; 4], &mut grads, &mut scratch).is_err());
}

#[test]
fn eval_is_per_sample() {
    let mut p = ModelParams::init_seeded(small_arch(), 6).unwrap();
    jitter_batchnorm(&mut p, 6);
    let x = random_inputs(3, 32, 2);
    let (all, _) = forward(&p, &x, Mode::Eval).unwrap();
    for b in 0..3 {
        let (one, _) = forward(&p, &x[b * 32..(b + 1) * 32], Mode::Eval).unwrap();
        for (a, c) in one.probs.iter().zip(all.sample(b)) {
            assert!((a - c).abs() < 1e-12);
        }
    }
}

#[test]
#[allow(clippy::approx_constant)]
fn bce_examples() {
    let one = Prediction { probs: vec![0.5] };
    let l = bce_loss(&one, &[1], &[1]).unwrap();
    assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((l.value - 0.693147).abs() < 1e-6);
    let exact = Prediction { probs: vec![1.0, 0.0, 1.0] };
    let l = bce_loss(&exact, &[1, 0, 1], &[1, 1, 1]).unwrap();
    assert!(l.value >= 0.0 && l.value < 1e-6 && !l.empty_mask);
    let l = bce_loss(&exact, &[0, 1, 0], &[0, 0, 0]).unwrap();
    assert_eq!(l.value, 0.0);
    assert!(l.empty_mask);
    // clamping keeps the loss finite
    let l = bce_loss(&exact, &[0, 1, 0], &[1, 1, 1]).unwrap();
    assert!(l.value.is_finite() && l.value > 40.0);
    assert!(bce_loss(&one, &[1, 0], &[1, 1]).is_err());
}

#[test]
fn unobserved_band_gets_zero_deep_gradient() {
    let p = ModelParams::init_seeded(small_arch(), 7).unwrap();
    let x = random_inputs(4, 32, 7);
    let y = random_labels(4, 4, 7);
    let (_, cache) = forward(&p, &x, Mode::Train).unwrap();
    let g = backward(&p, &cache.unwrap(), &y, &[0, 1, 1, 0]).unwrap();
    assert!(g.deep[0].iter().all(|&v| v == 0.0));
    assert!(g.deep[3].iter().all(|&v| v == 0.0));
    assert!(g.deep[1].iter().any(|&v| v != 0.0));
}

#[test]
fn masked_labels_do_not_matter() {
    let p = ModelParams::init_seeded(small_arch(), 8).unwrap();
    let x = random_inputs(2, 32, 8);
    let mask = [1, 0, 1, 0];
    let y1 = vec![1, 0, 0, 1, 0, 1, 1, 0];
    let mut y2 = y1.clone();
    for b in 0..2 {
        y2[b * 4 + 1] ^= 1;
        y2[b * 4 + 3] ^= 1;
    }
    let (pred, cache) = forward(&p, &x, Mode::Train).unwrap();
    let cache = cache.unwrap();
    assert_eq!(batch_bce_loss(&pred, &y1, &mask).unwrap(), batch_bce_loss(&pred, &y2, &mask).unwrap());
    assert_eq!(backward(&p, &cache, &y1, &mask).unwrap(), backward(&p, &cache, &y2, &mask).unwrap());
}

#[test]
fn duplicated_sample_doubles_gradient() {
    let p = ModelParams::init_seeded(small_arch(), 9).unwrap();
    let x = random_inputs(1, 32, 9);
    let y = random_labels(1, 4, 9);
    let mask = [1, 1, 1, 1];
    let (_, c1) = forward(&p, &x, Mode::Train).unwrap();
    let g1 = backward(&p, &c1.unwrap(), &y, &mask).unwrap();
    let x2 = [x.clone(), x].concat();
    let y2 = [y.clone(), y].concat();
    let (_, c2) = forward(&p, &x2, Mode::Train).unwrap();
    let g2 = backward(&p, &c2.unwrap(), &y2, &mask).unwrap();
    for (a, b) in g1.iter().zip(g2.iter()) {
        assert!((2.0 * a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} {b}");
    }
}

#[test]
fn stale_cache_rejected() {
    let mut p = ModelParams::init_seeded(small_arch(), 10).unwrap();
    let x = random_inputs(2, 32, 10);
    let (_, cache) = forward(&p, &x, Mode::Train).unwrap();
    let cache = cache.unwrap();
    let g = p.zero_gradients();
    p.sgd_step(&g, 0.1).unwrap();
    let err = backward(&p, &cache, &[0; 8], &[1; 4]).unwrap_err();
    assert!(matches!(err, Error::StaleCache { .. }));
    assert!(backward(&p, &forward(&p, &x, Mode::Train).unwrap().1.unwrap(), &[0; 7], &[1; 4]).is_err());
}

#[test]
fn grouped_isolation() {
    let mut p = ModelParams::init_seeded(small_arch(), 11).unwrap();
    jitter_batchnorm(&mut p, 11);
    let x = random_inputs(3, 32, 11);
    for mode in [Mode::Eval, Mode::Train] {
        let (base, _) = forward(&p, &x, mode).unwrap();
        for n in 0..4 {
            let mut q = p.clone();
            q.deep_mut(n).iter_mut().for_each(|v| *v += 0.3);
            let (out, _) = forward(&q, &x, mode).unwrap();
            for b in 0..3 {
                for k in 0..4 {
                    let changed = out.sample(b)[k] != base.sample(b)[k];
                    assert_eq!(changed, k == n, "mode {mode:?} block {n} output {k}");
                }
            }
        }
    }
}

#[test]
fn relabelling_bands_permutes_outputs() {
    let arch = ArchConfig::new(32, 8).with_shallow_filters(4);
    let mut p = ModelParams::init_seeded(arch, 12).unwrap();
    jitter_batchnorm(&mut p, 12);
    let x = random_inputs(2, 256, 12);
    let (a, b) = (2, 5);
    let mut q = p.clone();
    let layout = p.layout().clone();
    {
        let blocks = q.blocks_mut();
        blocks.deep.swap(a, b);
        let d = arch.dims().unwrap();
        for s in &layout.shallow {
            let row = if s.name == "conv2" { d.c1 * 9 } else { 1 };
            if !(s.name == "conv2" || s.name.starts_with("bn2")) {
                continue;
            }
            for k in 0..GROUP_IN {
                let (ca, cb) = (a * GROUP_IN + k, b * GROUP_IN + k);
                for j in 0..row {
                    blocks.shallow.swap(s.offset + ca * row + j, s.offset + cb * row + j);
                }
            }
        }
    }
    for mode in [Mode::Eval, Mode::Train] {
        let (po, _) = forward(&p, &x, mode).unwrap();
        let (qo, _) = forward(&q, &x, mode).unwrap();
        for s in 0..2 {
            let perm = |n: usize| if n == a { b } else if n == b { a } else { n };
            for n in 0..8 {
                assert!((po.sample(s)[n] - qo.sample(s)[perm(n)]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sgd_examples() {
    let mut p = ModelParams::init_seeded(small_arch(), 13).unwrap();
    let before = p.clone();
    let mut g = p.zero_gradients();
    g.shallow.iter_mut().for_each(|v| *v = 0.5);
    g.deep.iter_mut().flatten().for_each(|v| *v = 0.5);
    p.sgd_step(&g, 0.0).unwrap();
    assert_eq!(p, before);

    let mut q = ModelParams::zeroed(small_arch()).unwrap();
    q.shallow_mut()[0] = 1.0;
    q.sgd_step(&g, 0.1).unwrap();
    assert_eq!(q.shallow()[0], 0.95);
    // running statistics untouched
    let layout = q.layout().clone();
    for s in layout.shallow.iter().filter(|s| s.kind == SegmentKind::Running) {
        let expect = if s.name.ends_with("var") { 1.0 } else { 0.0 };
        assert!(q.shallow()[s.range()].iter().all(|&v| v == expect), "{}", s.name);
    }

    let mut two = before.clone();
    two.sgd_step(&g, 0.125).unwrap();
    two.sgd_step(&g, 0.125).unwrap();
    let mut one = before.clone();
    one.sgd_step(&g, 0.25).unwrap();
    for (x, y) in two.blocks().iter().zip(one.blocks().iter()) {
        assert!((x - y).abs() <= 1e-15 * (1.0 + x.abs()));
    }

    let bad = ParamBlocks { shallow: vec![0.0; 3], deep: vec![] };
    assert!(p.sgd_step(&bad, 0.1).is_err());
}

#[test]
fn running_stats_follow_momentum() {
    let mut p = ModelParams::init_seeded(small_arch(), 14).unwrap();
    let x = random_inputs(2, 32, 14);
    let (_, cache) = forward(&p, &x, Mode::Train).unwrap();
    let cache = cache.unwrap();
    update_running_stats(&mut p, &cache, &[1, 1, 0, 1]).unwrap();
    assert!(update_running_stats(&mut p, &cache, &[1, 1]).is_err());
    let layout = p.layout().clone();
    let mean = &p.shallow()[layout.shallow[3].range()];
    // bn1 sees conv1 applied to the raw input; mean moved 10% toward it
    assert!(mean.iter().any(|&m| m != 0.0));
    let var = &p.shallow()[layout.shallow[4].range()];
    assert!(var.iter().all(|&v| v > 0.0));
    assert!(p.deep(0)[layout.deep[3].range()].iter().any(|&m| m != 0.0));
    // unobserved band keeps its initial statistics
    assert!(p.deep(2)[layout.deep[3].range()].iter().all(|&m| m == 0.0));
    assert!(p.deep(2)[layout.deep[4].range()].iter().all(|&v| v == 1.0));
}

#[test]
fn cosine_schedule() {
    let s = LrSchedule::new(0.1, 0.001, 1000).unwrap();
    assert_eq!(cosine_lr(0, &s).unwrap(), 0.1);
    assert_eq!(cosine_lr(1000, &s).unwrap(), 0.001);
    assert!((cosine_lr(500, &s).unwrap() - 0.0505).abs() <= f64::EPSILON * 0.1);
    assert!(cosine_lr(1001, &s).is_err());
    let mut last = f64::INFINITY;
    for t in 0..=1000 {
        let eta = cosine_lr(t, &s).unwrap();
        assert!(eta <= last && eta >= 0.001);
        last = eta;
    }
    assert!(LrSchedule::new(0.01, 0.1, 10).is_err());
    assert!(LrSchedule::new(0.1, -0.1, 10).is_err());
    assert!(LrSchedule::new(0.1, 0.0, 0).is_err());
}

#[test]
fn classify_examples() {
    let pred = |v: Vec<f64>| Prediction { probs: v };
    assert_eq!(classify(&pred(vec![0.5, 0.4999])), vec![1, 0]);
    assert_eq!(classify(&pred(vec![0.0; 3])), vec![0; 3]);
    assert_eq!(classify(&pred(vec![1.0; 3])), vec![1; 3]);
}

#[test]
fn init_is_deterministic() {
    let a = ModelParams::init_seeded(small_arch(), 15).unwrap();
    let b = ModelParams::init_seeded(small_arch(), 15).unwrap();
    let c = ModelParams::init_seeded(small_arch(), 16).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // biases start at zero
    let fc_b = &a.layout().deep[6];
    assert!((0..4).all(|n| a.deep(n)[fc_b.range()][0] == 0.0));
}

#[test]
fn checkpoint_round_trip() {
    let mut p = ModelParams::init_seeded(ArchConfig::new(32, 8).with_shallow_filters(4), 17).unwrap();
    jitter_batchnorm(&mut p, 17);
    let mut buf = Vec::new();
    p.write_to(&mut buf).unwrap();
    let q = ModelParams::read_from(&buf[..]).unwrap();
    assert_eq!(p, q);
    assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(ModelParams::read_from(&bad[..]).is_err());
    assert!(ModelParams::read_from(&buf[..buf.len() - 3]).is_err());
    let mut extra = buf.clone();
    extra.push(0);
    assert!(ModelParams::read_from(&extra[..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn outputs_are_probabilities(seed in any::<u64>(), scale in 0.0f64..1e3) {
        let p = ModelParams::init_seeded(small_arch(), seed).unwrap();
        let x: Vec<f64> = random_inputs(2, 32, seed).into_iter().map(|v| v * scale).collect();
        for mode in [Mode::Train, Mode::Eval] {
            let (pred, _) = forward(&p, &x, mode).unwrap();
            prop_assert!(pred.probs.iter().all(|&q| (0.0..=1.0).contains(&q)));
            let loss = batch_bce_loss(&pred, &random_labels(2, 4, seed), &[1; 4]).unwrap();
            prop_assert!(loss.value.is_finite() && loss.value >= 0.0);
        }
    }

    #[test]
    fn midpoint_is_mean(eta0 in 1e-4f64..1.0, frac in 0.0f64..1.0, half in 1u64..10_000) {
        let s = LrSchedule::new(eta0, eta0 * frac, 2 * half).unwrap();
        let mid = cosine_lr(half, &s).unwrap();
        prop_assert!((mid - (s.eta0 + s.eta_min) / 2.0).abs() <= f64::EPSILON * s.eta0);
        prop_assert_eq!(cosine_lr(0, &s).unwrap(), s.eta0);
        prop_assert_eq!(cosine_lr(2 * half, &s).unwrap(), s.eta_min);
    }
}
