use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatgraph::enhancer::{modulate, normalize_depth, Enhancer, EnhancerConfig, Modulation};
use splatgraph::tensor::{finite_diff_check, finite_diff_params, ParamStore, Tape, Var};
use splatgraph::{Real, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: Real, hi: Real) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn build(seed: u64) -> (ParamStore, Enhancer) {
    let mut store = ParamStore::new();
    let e = Enhancer::new(&mut store, "enh", EnhancerConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, e)
}

/// Replaces every zero-initialized tensor with small random values.
fn randomize_zero_params(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).data().iter().all(|&v| v == 0.0) {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
}

#[test]
fn untrained_enhancer_is_clamped_identity() {
    let (store, enh) = build(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (h, w) in [(8, 8), (16, 12), (32, 32)] {
        let img = rand_tensor(&mut rng, vec![3, h, w], -0.3, 1.3);
        let depth = rand_tensor(&mut rng, vec![1, h, w], 0.0, 1.0);
        let mut tape = Tape::new();
        let i = tape.constant(img.clone());
        let d = tape.constant(depth);
        let out = enh.enhance(&mut tape, &store, i, d).unwrap();
        assert_eq!(tape.value(out).shape(), img.shape());
        let want: Vec<Real> = img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        assert_eq!(tape.value(out).data(), want.as_slice());
    }
}

#[test]
fn sides_not_divisible_by_four_are_rejected() {
    let (store, enh) = build(0);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::zeros(vec![3, 10, 8]));
    let d = tape.constant(Tensor::zeros(vec![1, 10, 8]));
    assert!(enh.enhance(&mut tape, &store, i, d).is_err());
    let i = tape.constant(Tensor::zeros(vec![3, 8, 8]));
    let d = tape.constant(Tensor::zeros(vec![1, 4, 8]));
    assert!(enh.enhance(&mut tape, &store, i, d).is_err());
}

#[test]
fn zero_modulation_is_exact_and_constant_depth_is_per_channel_affine() {
    let mut store = ParamStore::new();
    let m = Modulation::zeros(&mut store, "m", 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = rand_tensor(&mut rng, vec![4, 6, 6], -2.0, 2.0);
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let d = tape.constant(rand_tensor(&mut rng, vec![1, 12, 12], 0.0, 1.0));
    let out = modulate(&mut tape, &store, &m, fv, d).unwrap();
    assert_eq!(tape.value(out), &f);

    randomize_zero_params(&mut store, 3);
    let d = tape.constant(Tensor::full(vec![1, 3, 3], 0.4));
    let ones = tape.constant(Tensor::full(vec![4, 6, 6], 1.0));
    let zeros = tape.constant(Tensor::zeros(vec![4, 6, 6]));
    let a = modulate(&mut tape, &store, &m, ones, d).unwrap();
    let b = modulate(&mut tape, &store, &m, zeros, d).unwrap();
    let out = modulate(&mut tape, &store, &m, fv, d).unwrap();
    // with F = 1 and F = 0 we read off the per-channel (1 + γ̂) + β and β
    for c in 0..4 {
        let bc = tape.value(b).data()[c * 36];
        let gc = tape.value(a).data()[c * 36] - bc;
        for k in 0..36 {
            let idx = c * 36 + k;
            assert!((tape.value(b).data()[idx] - bc).abs() < 1e-12);
            let want = gc * f.data()[idx] + bc;
            assert!((tape.value(out).data()[idx] - want).abs() < 1e-12);
        }
    }
    assert!(modulate(&mut tape, &store, &m, zeros, ones).is_err());
}

#[test]
fn depth_normalization_uses_clip_range() {
    let mut tape = Tape::new();
    let d = tape.constant(Tensor::new(vec![1, 4], vec![0.0, 1.0, 5.5, 20.0]).unwrap());
    let n = normalize_depth(&mut tape, d, 1.0, 10.0).unwrap();
    assert_eq!(tape.value(n).shape(), [1, 1, 4]);
    assert_eq!(tape.value(n).data(), &[0.0, 0.0, 0.5, 1.0]);
    assert!(normalize_depth(&mut tape, d, 2.0, 1.0).is_err());
}

fn trained_like(seed: u64) -> (ParamStore, Enhancer) {
    let (mut store, enh) = build(seed);
    randomize_zero_params(&mut store, seed + 100);
    (store, enh)
}

#[test]
fn depth_gradient_matches_finite_differences() {
    let (store, enh) = trained_like(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = rand_tensor(&mut rng, vec![3, 8, 8], 0.2, 0.8);
    let depth = rand_tensor(&mut rng, vec![1, 8, 8], 0.1, 0.9);
    let wts = rand_tensor(&mut rng, vec![3, 8, 8], -1.0, 1.0);
    let f = |tape: &mut Tape, d: Var| {
        let i = tape.constant(img.clone());
        let o = enh.enhance(tape, &store, i, d).unwrap();
        let w = tape.constant(wts.clone());
        let p = tape.mul(o, w);
        tape.sum(p)
    };
    let rep = finite_diff_check(f, &depth, 1e-6);
    assert!(rep.passes(1e-6), "{rep:?}");
    assert!(rep.tape_grad.iter().map(|v| v.abs()).sum::<Real>() > 1e-6);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let (store, enh) = trained_like(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = rand_tensor(&mut rng, vec![3, 8, 8], 0.2, 0.8);
    let depth = rand_tensor(&mut rng, vec![1, 8, 8], 0.1, 0.9);
    let target = rand_tensor(&mut rng, vec![3, 8, 8], 0.0, 1.0);
    let f = |tape: &mut Tape, s: &ParamStore| {
        let i = tape.constant(img.clone());
        let d = tape.constant(depth.clone());
        let o = enh.enhance(tape, s, i, d).unwrap();
        let t = tape.constant(target.clone());
        let r = tape.sub(o, t);
        let r = tape.square(r);
        tape.sum(r)
    };
    let mut coords = Vec::new();
    for id in enh.param_ids() {
        let n = store.get(id).len();
        for i in (0..n).step_by(n / 3 + 1) {
            coords.push((id, i));
        }
    }
    let rep = finite_diff_params(&store, &coords, f, 1e-6);
    assert!(rep.passes(1e-6), "{rep:?}");
}

#[test]
fn impulse_stays_within_receptive_field() {
    let (store, enh) = trained_like(8);
    let size = 64;
    let radius = enh.receptive_radius(size);
    assert!(radius > 0 && radius < size / 2, "radius {radius}");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = rand_tensor(&mut rng, vec![3, size, size], 0.2, 0.8);
    let depth = rand_tensor(&mut rng, vec![1, size, size], 0.1, 0.9);
    let run = |img: &Tensor| {
        let mut tape = Tape::new();
        let i = tape.constant(img.clone());
        let d = tape.constant(depth.clone());
        let o = enh.enhance(&mut tape, &store, i, d).unwrap();
        tape.value(o).clone()
    };
    let base = run(&img);
    for (py, px) in [(31, 30), (5, 58), (40, 17)] {
        let mut hit = img.clone();
        hit.data_mut()[(py * size + px) + size * size] += 0.3;
        let out = run(&hit);
        let mut farthest = 0usize;
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let k = c * size * size + y * size + x;
                    if out.data()[k] != base.data()[k] {
                        farthest = farthest.max(y.abs_diff(py).max(x.abs_diff(px)));
                    }
                }
            }
        }
        assert!(farthest <= radius, "changed pixel at distance {farthest} > radius {radius}");
        assert!(farthest + 8 >= radius, "bound {radius} is loose (reach {farthest})");
    }
}
