use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatgraph::ggo::{apply_offsets, so3_exp, so3_exp_matrix, Ggo, GgoConfig, TrackingOffsets};
use splatgraph::render::{Camera, Intrinsics, PoseVars};
use splatgraph::tensor::{finite_diff_check, finite_diff_params, ParamStore, Tape, Var};
use splatgraph::{Real, Tensor};

fn build(seed: u64) -> (ParamStore, Ggo) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Ggo::new(&mut store, "g", GgoConfig::default(), 8, 8, &mut rng).unwrap();
    (store, g)
}

fn randomize_head(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in ["g.head.weight", "g.head.bias"] {
        let id = store.find(name).unwrap();
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

fn f_g(tape: &mut Tape, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tape.constant(Tensor::from_fn(vec![1, 16], |_| rng.random_range(-1.0..1.0)))
}

fn camera() -> Camera {
    let intr = Intrinsics::from_fov(0.6, 32, 32, 0.1, 10.0);
    Camera::look_at([0.3, -0.2, 3.0], [0.0; 3], [0.0, -1.0, 0.0], intr).unwrap()
}

#[test]
fn temporal_features_are_deterministic_and_distinguish_endpoints() {
    let (store, g) = build(0);
    let mut tape = Tape::new();
    let a = g.temporal_features(&mut tape, &store, 0.3);
    let b = g.temporal_features(&mut tape, &store, 0.3);
    assert_eq!(tape.value(a), tape.value(b));
    assert_eq!(tape.shape(a), [1, 32]);
    let z = g.temporal_features(&mut tape, &store, 0.0);
    let o = g.temporal_features(&mut tape, &store, 1.0);
    assert!(tape.value(z).max_abs_diff(tape.value(o)) > 0.0);
    assert!(tape.value(z).is_finite());
}

#[test]
fn zero_head_gives_exact_zero_offsets_and_normalized_attention() {
    let (store, g) = build(1);
    let mut tape = Tape::new();
    let fg = f_g(&mut tape, 2);
    let ft = g.temporal_features(&mut tape, &store, 0.7);
    let off = g.predict_offsets(&mut tape, &store, fg, ft).unwrap();
    assert!(tape.value(off.delta_e).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(off.omega).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(off.tau).data().iter().all(|&v| v == 0.0));
    let att = tape.value(off.attention);
    assert_eq!(att.shape(), [2, 4]);
    for r in 0..2 {
        assert!((att.row(r).iter().sum::<Real>() - 1.0).abs() < 1e-12);
    }

    // zero offsets leave pose and expression untouched
    let cam = camera();
    let pose = PoseVars::constant(&mut tape, &cam);
    let e = tape.constant(Tensor::from_fn(vec![1, 8], |i| i as Real * 0.1));
    let (p2, e2) = apply_offsets(&mut tape, &pose, e, &off).unwrap();
    assert_eq!(tape.value(e2), tape.value(e));
    assert_eq!(tape.value(p2.rotation), tape.value(pose.rotation));
    assert_eq!(tape.value(p2.translation), tape.value(pose.translation));
}

#[test]
fn dimension_mismatch_is_rejected() {
    let (store, g) = build(0);
    let mut tape = Tape::new();
    let fg = tape.constant(Tensor::zeros(vec![1, 12]));
    let ft = g.temporal_features(&mut tape, &store, 0.5);
    assert!(g.predict_offsets(&mut tape, &store, fg, ft).is_err());
    let mut store2 = ParamStore::new();
    let cfg = GgoConfig { temporal_dim: 30, ..GgoConfig::default() };
    assert!(Ggo::new(&mut store2, "h", cfg, 8, 8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn offsets_respect_bounds() {
    let (mut store, g) = build(3);
    let id = store.find("g.head.bias").unwrap();
    for v in store.get_mut(id).data_mut() {
        *v = 50.0;
    }
    let mut tape = Tape::new();
    let fg = f_g(&mut tape, 4);
    let ft = g.temporal_features(&mut tape, &store, 0.2);
    let off = g.predict_offsets(&mut tape, &store, fg, ft).unwrap();
    assert!(tape.value(off.delta_e).data().iter().all(|v| v.abs() <= 0.5));
    // saturated tanh reaches the bound exactly
    assert!(tape.value(off.omega).norm() <= std::f64::consts::PI as Real * (1.0 + 1e-12));
    assert!(tape.value(off.tau).data().iter().all(|v| v.abs() <= 0.1));

    let mut store2 = ParamStore::new();
    let cfg = GgoConfig { rotation_only: true, ..GgoConfig::default() };
    let g2 = Ggo::new(&mut store2, "g", cfg, 8, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    randomize_head(&mut store2, 9);
    let fg = f_g(&mut tape, 4);
    let ft = g2.temporal_features(&mut tape, &store2, 0.2);
    let off = g2.predict_offsets(&mut tape, &store2, fg, ft).unwrap();
    assert!(tape.value(off.tau).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(off.omega).norm() > 0.0);
}

#[test]
fn rodrigues_matches_nalgebra_and_is_orthonormal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let w: [Real; 3] = std::array::from_fn(|_| rng.random_range(-1.8..1.8));
        let r = so3_exp_matrix(&w);
        let m = Matrix3::from_fn(|i, j| r[i][j] as f64);
        let oracle = Rotation3::new(Vector3::new(w[0] as f64, w[1] as f64, w[2] as f64));
        assert!((m - oracle.matrix()).amax() < 1e-12);
        assert!((m.transpose() * m - Matrix3::identity()).amax() < 1e-12);
        assert!((m.determinant() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn inverse_rotation_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cam = camera();
    for _ in 0..20 {
        let w: Vec<Real> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let pose = PoseVars::constant(&mut tape, &cam);
        let e = tape.constant(Tensor::zeros(vec![1, 8]));
        let zero_e = tape.constant(Tensor::zeros(vec![1, 8]));
        let tau = tape.constant(Tensor::zeros(vec![3]));
        let att = tape.constant(Tensor::zeros(vec![2, 4]));
        let fwd = tape.constant(Tensor::from_vec(w.clone()));
        let back = tape.constant(Tensor::from_vec(w.iter().map(|v| -v).collect()));
        let o1 = TrackingOffsets { delta_e: zero_e, omega: fwd, tau, attention: att };
        let o2 = TrackingOffsets { omega: back, ..o1 };
        let (p1, e1) = apply_offsets(&mut tape, &pose, e, &o1).unwrap();
        let (p2, _) = apply_offsets(&mut tape, &p1, e1, &o2).unwrap();
        assert!(tape.value(p2.rotation).max_abs_diff(tape.value(pose.rotation)) < 1e-10);
    }
}

#[test]
fn so3_gradient_matches_finite_differences() {
    let weights = Tensor::from_fn(vec![3, 3], |i| (i as Real * 0.37).sin());
    let f = |tape: &mut Tape, w: Var| {
        let r = so3_exp(tape, w);
        let c = tape.constant(weights.clone());
        let p = tape.mul(r, c);
        tape.sum(p)
    };
    for w in [vec![0.3, -0.7, 1.1], vec![2.5, 0.4, -0.9], vec![1e-3, 2e-3, -1e-3], vec![0.0, 0.0, 0.0]] {
        let rep = finite_diff_check(f, &Tensor::from_vec(w.clone()), 1e-6);
        assert!(rep.passes(1e-6), "{w:?}: {rep:?}");
    }
    // the Taylor branch alone
    let rep = finite_diff_check(f, &Tensor::from_vec(vec![1e-10, -2e-10, 3e-11]), 1e-9);
    assert!(rep.passes(1e-5), "{rep:?}");
}

#[test]
fn gradients_of_weights_match_finite_differences() {
    let (mut store, g) = build(7);
    randomize_head(&mut store, 8);
    let cam = camera();
    let target = Tensor::from_fn(vec![3, 3], |i| (i as Real).cos());
    let f = |tape: &mut Tape, s: &ParamStore| {
        let fg = f_g(tape, 10);
        let ft = g.temporal_features(tape, s, 0.4);
        let off = g.predict_offsets(tape, s, fg, ft).unwrap();
        let pose = PoseVars::constant(tape, &cam);
        let e = tape.constant(Tensor::full(vec![1, 8], 0.2));
        let (p, e2) = apply_offsets(tape, &pose, e, &off).unwrap();
        let c = tape.constant(target.clone());
        let a = tape.mul(p.rotation, c);
        let a = tape.sum(a);
        let b = tape.square(e2);
        let b = tape.sum(b);
        let t = tape.sum(p.translation);
        let s1 = tape.add(a, b);
        tape.add(s1, t)
    };
    let mut coords = Vec::new();
    for id in g.param_ids() {
        let n = store.get(id).len();
        for i in (0..n).step_by(n / 4 + 1) {
            coords.push((id, i));
        }
    }
    let rep = finite_diff_params(&store, &coords, f, 1e-6);
    assert!(rep.passes(1e-6), "{rep:?}");
    assert!(rep.tape_grad.iter().any(|&v| v != 0.0));
}

proptest! {
    #[test]
    fn so3_is_a_rotation(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
        let r = so3_exp_matrix(&[x as Real, y as Real, z as Real]);
        let m = Matrix3::from_fn(|i, j| r[i][j] as f64);
        prop_assert!((m.transpose() * m - Matrix3::identity()).amax() < 1e-12);
        prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
    }
}
