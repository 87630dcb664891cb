use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatgraph::mesh::{build_hierarchy, build_operators, icosphere, SamplingHierarchy, TriMesh};
use splatgraph::tensor::{finite_diff_params, ParamId, ParamStore, Tape, Var};
use splatgraph::unet::{
    cheb_conv, generate_anchors, vertex_features, ChebLayer, GeometryActivation, GraphUnet, Role, UnetConfig,
};
use splatgraph::{Real, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) as Real)
}

#[test]
fn order_one_identity_filter_is_identity() {
    let ops = build_operators(&icosphere(0, 1.0)).unwrap();
    let mut store = ParamStore::new();
    let mut theta = Tensor::zeros(vec![1, 3, 3]);
    for i in 0..3 {
        theta.data_mut()[i * 3 + i] = 1.0;
    }
    let layer = ChebLayer::from_tensors(&mut store, "c", theta, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&mut rng, vec![12, 3]));
    let y = cheb_conv(&mut tape, &store, x, &ops, &layer).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn order_above_limit_is_rejected() {
    let mut store = ParamStore::new();
    let r = ChebLayer::from_tensors(&mut store, "c", Tensor::zeros(vec![17, 1, 1]), None);
    assert!(r.is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(ChebLayer::new(&mut store, "d", 0, 1, 1, false, &mut rng).is_err());
}

#[test]
fn cheb_conv_is_linear_without_bias() {
    let ops = build_operators(&icosphere(1, 1.0)).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layer = ChebLayer::new(&mut store, "c", 5, 2, 3, false, &mut rng).unwrap();
    let (a, b) = (0.7, -1.3);
    let xs = rand_tensor(&mut rng, vec![42, 2]);
    let ws = rand_tensor(&mut rng, vec![42, 2]);
    let mut tape = Tape::new();
    let x = tape.constant(xs);
    let w = tape.constant(ws);
    let ax = tape.scale(x, a);
    let bw = tape.scale(w, b);
    let mix = tape.add(ax, bw);
    let lhs = cheb_conv(&mut tape, &store, mix, &ops, &layer).unwrap();
    let cx = cheb_conv(&mut tape, &store, x, &ops, &layer).unwrap();
    let cw = cheb_conv(&mut tape, &store, w, &ops, &layer).unwrap();
    let acx = tape.scale(cx, a);
    let bcw = tape.scale(cw, b);
    let rhs = tape.add(acx, bcw);
    assert!(tape.value(lhs).max_abs_diff(tape.value(rhs)) < 1e-12);
}

/// Spectral oracle: `U (sum_k T_k(lambda~) theta_k) U^T x` per output channel.
#[test]
fn cheb_conv_matches_dense_spectral_oracle() {
    let mesh = icosphere(0, 1.0);
    let ops = build_operators(&mesh).unwrap();
    let d = ops.scaled_laplacian.to_dense();
    let lt = DMatrix::from_row_slice(12, 12, &d.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let eig = SymmetricEigen::new(lt);
    let u = eig.eigenvectors.clone();
    let lam = eig.eigenvalues.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (fin, fout) = (2, 3);
    for k in 1..=6 {
        let mut store = ParamStore::new();
        let theta = rand_tensor(&mut rng, vec![k, fin, fout]);
        let layer = ChebLayer::from_tensors(&mut store, "c", theta.clone(), None).unwrap();
        let xs = rand_tensor(&mut rng, vec![12, fin]);
        let mut tape = Tape::new();
        let x = tape.constant(xs.clone());
        let y = cheb_conv(&mut tape, &store, x, &ops, &layer).unwrap();
        let got = tape.value(y);

        let xm = DMatrix::from_row_slice(12, fin, &xs.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
        let xh = u.transpose() * &xm; // spectral coefficients [12, fin]
        let mut yh = DMatrix::<f64>::zeros(12, fout);
        for i in 0..12 {
            let l = lam[i];
            let mut t = vec![1.0, l];
            for j in 2..k {
                t.push(2.0 * l * t[j - 1] - t[j - 2]);
            }
            for o in 0..fout {
                let mut acc = 0.0;
                for kk in 0..k {
                    for f in 0..fin {
                        acc += t[kk] * theta.data()[(kk * fin + f) * fout + o] as f64 * xh[(i, f)];
                    }
                }
                yh[(i, o)] = acc;
            }
        }
        let want = &u * yh;
        for i in 0..12 {
            for o in 0..fout {
                let diff = (got.at2(i, o) as f64 - want[(i, o)]).abs();
                assert!(diff < 1e-8, "K={k}: {diff}");
            }
        }
    }
}

struct Fixture {
    mesh: TriMesh,
    h: SamplingHierarchy,
}

fn fixture() -> Fixture {
    // production uses 642 -> 160 -> 40; 162 -> 81 -> 40 keeps tests fast
    let mesh = icosphere(2, 1.0);
    let h = build_hierarchy(&mesh, 2, 2.0).unwrap();
    Fixture { mesh, h }
}

fn net(store: &mut ParamStore, role: Role, f: &Fixture, seed: u64) -> GraphUnet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GraphUnet::new(store, role.name(), role, UnetConfig::default(), &f.h, &mut rng).unwrap()
}

trait RoleName {
    fn name(&self) -> &'static str;
}
impl RoleName for Role {
    fn name(&self) -> &'static str {
        match self {
            Role::Geometry => "geo",
            Role::Appearance => "app",
        }
    }
}

fn encode_z(store: &ParamStore, n: &GraphUnet, mesh: &TriMesh, h: &SamplingHierarchy) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(vertex_features(mesh));
    let enc = n.encode(&mut tape, store, x, h).unwrap();
    tape.value(enc.z).clone()
}

#[test]
fn encoder_bottleneck_is_eight_wide_and_deterministic() {
    let f = fixture();
    let mut s1 = ParamStore::new();
    let n1 = net(&mut s1, Role::Geometry, &f, 7);
    let mut s2 = ParamStore::new();
    let n2 = net(&mut s2, Role::Geometry, &f, 7);
    let z1 = encode_z(&s1, &n1, &f.mesh, &f.h);
    let z2 = encode_z(&s2, &n2, &f.mesh, &f.h);
    assert_eq!(z1.shape(), &[1, 8]);
    assert_eq!(z1, z2);
    // translation sensitivity: positions are raw inputs, so z moves
    let moved = f.mesh.with_vertices(f.mesh.vertices.iter().map(|v| [v[0] + 0.3, v[1], v[2]]).collect()).unwrap();
    let z3 = encode_z(&s1, &n1, &moved, &f.h);
    let shift = z1.max_abs_diff(&z3);
    assert!(shift > 1e-6, "translation changed z by only {shift}");
}

fn zero_expr(tape: &mut Tape) -> Var {
    tape.constant(Tensor::zeros(vec![1, 8]))
}

#[test]
fn zero_heads_give_neutral_attributes() {
    let f = fixture();
    let mut store = ParamStore::new();
    let geo = net(&mut store, Role::Geometry, &f, 1);
    let app = net(&mut store, Role::Appearance, &f, 2);
    let act = GeometryActivation { max_offset: 0.1, scale_max: 10.0, scale_bias: 0.0 };
    let mut tape = Tape::new();
    let e = zero_expr(&mut tape);
    let a = generate_anchors(&mut tape, &store, &f.mesh, e, &geo, &app, &f.h, &act).unwrap();
    assert_eq!(tape.shape(a.cloud.centers), &[162, 3]);
    assert_eq!(tape.value(a.cloud.centers).data(), f.mesh.flat_vertices().as_slice());
    assert!(tape.value(a.cloud.scales).data().iter().all(|&s| s == 1.0));
    for r in tape.value(a.cloud.rotations).data().chunks(4) {
        assert_eq!(r, &[1.0, 0.0, 0.0, 0.0]);
    }
    assert!(tape.value(a.cloud.colors).data().iter().all(|&c| c == 0.5));
    assert!(tape.value(a.cloud.opacities).data().iter().all(|&c| c == 0.5));
    assert_eq!(tape.shape(a.f_g), &[1, 16]);
}

fn randomize(store: &mut ParamStore, ids: &[ParamId], seed: u64, amp: Real) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-amp..amp);
        }
    }
}

fn head_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().filter(|&id| store.name(id).contains(".head")).collect()
}

#[test]
fn activations_stay_in_range_and_expression_only_moves_decoder() {
    let f = fixture();
    let mut store = ParamStore::new();
    let geo = net(&mut store, Role::Geometry, &f, 1);
    let app = net(&mut store, Role::Appearance, &f, 2);
    let heads = head_ids(&store);
    randomize(&mut store, &heads, 9, 3.0);
    let act = GeometryActivation::for_mesh(&f.mesh);
    let run = |e: Vec<Real>| {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::new(vec![1, 8], e).unwrap());
        let a = generate_anchors(&mut tape, &store, &f.mesh, e, &geo, &app, &f.h, &act).unwrap();
        let g = |v| tape.value(v).clone();
        (g(a.z_geo), g(a.z_app), g(a.cloud.scales), g(a.cloud.rotations), g(a.cloud.opacities), g(a.cloud.colors))
    };
    let (zg0, za0, s0, q0, o0, c0) = run(vec![0.0; 8]);
    assert!(s0.data().iter().all(|&s| s > 0.0 && s <= act.scale_max));
    for q in q0.data().chunks(4) {
        let n: Real = q.iter().map(|v| v * v).sum::<Real>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    assert!(o0.data().iter().chain(c0.data()).all(|&v| v > 0.0 && v < 1.0));
    let (zg1, za1, s1, ..) = run(vec![0.5, -0.2, 0.1, 0.0, 0.3, 0.0, -0.4, 0.2]);
    assert_eq!(zg0, zg1);
    assert_eq!(za0, za1);
    assert!(s0.max_abs_diff(&s1) > 0.0);
}

/// Up to `per` evenly spaced coordinates of each listed parameter.
fn sample_coords(store: &ParamStore, ids: &[ParamId], per: usize) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for &id in ids {
        let n = store.get(id).len();
        let stride = (n / per).max(1);
        out.extend((0..n).step_by(stride).take(per).map(|i| (id, i)));
    }
    out
}

#[test]
fn geometry_offsets_gradient_matches_finite_differences() {
    let f = fixture();
    let mut store = ParamStore::new();
    let geo = net(&mut store, Role::Geometry, &f, 1);
    let app = net(&mut store, Role::Appearance, &f, 2);
    let heads = head_ids(&store);
    randomize(&mut store, &heads, 4, 0.5);
    let act = GeometryActivation::for_mesh(&f.mesh);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with("geo")).collect();
    let coords = sample_coords(&store, &ids, 4);
    let report = finite_diff_params(
        &store,
        &coords,
        |tape, s| {
            let e = tape.constant(Tensor::from_fn(vec![1, 8], |i| 0.1 * i as Real));
            let a = generate_anchors(tape, s, &f.mesh, e, &geo, &app, &f.h, &act).unwrap();
            let v = tape.constant(Tensor::new(vec![162, 3], f.mesh.flat_vertices()).unwrap());
            let off = tape.sub(a.cloud.centers, v);
            tape.mean(off)
        },
        1e-6,
    );
    assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
}

#[test]
fn appearance_gradient_matches_finite_differences() {
    let f = fixture();
    let mut store = ParamStore::new();
    let geo = net(&mut store, Role::Geometry, &f, 1);
    let app = net(&mut store, Role::Appearance, &f, 2);
    let heads = head_ids(&store);
    randomize(&mut store, &heads, 5, 0.5);
    let act = GeometryActivation::for_mesh(&f.mesh);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with("app")).collect();
    let coords = sample_coords(&store, &ids, 4);
    let report = finite_diff_params(
        &store,
        &coords,
        |tape, s| {
            let e = zero_expr(tape);
            let a = generate_anchors(tape, s, &f.mesh, e, &geo, &app, &f.h, &act).unwrap();
            let c = tape.mean(a.cloud.colors);
            let o = tape.mean(a.cloud.opacities);
            tape.add(c, o)
        },
        1e-6,
    );
    assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
}

#[test]
fn full_unet_gradient_on_42_vertex_mesh() {
    let mesh = icosphere(1, 1.0);
    // 42 -> 26 -> 16
    let h = build_hierarchy(&mesh, 2, 1.6).unwrap();
    let f = Fixture { mesh, h };
    let mut store = ParamStore::new();
    let cfg = UnetConfig { skips: true, ..UnetConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let geo = GraphUnet::new(&mut store, "geo", Role::Geometry, cfg.clone(), &f.h, &mut rng).unwrap();
    let app = GraphUnet::new(&mut store, "app", Role::Appearance, cfg, &f.h, &mut rng).unwrap();
    let heads = head_ids(&store);
    randomize(&mut store, &heads, 6, 0.5);
    let act = GeometryActivation::for_mesh(&f.mesh);
    let ids: Vec<ParamId> = store.ids().collect();
    let coords = sample_coords(&store, &ids, 3);
    let report = finite_diff_params(
        &store,
        &coords,
        |tape, s| {
            let e = tape.constant(Tensor::from_fn(vec![1, 8], |i| 0.05 * i as Real));
            let a = generate_anchors(tape, s, &f.mesh, e, &geo, &app, &f.h, &act).unwrap();
            let parts = [a.cloud.centers, a.cloud.rotations, a.cloud.scales, a.cloud.colors, a.cloud.opacities];
            let mut acc = tape.scalar(0.0);
            for p in parts {
                let sq = tape.sin(p);
                let m = tape.mean(sq);
                acc = tape.add(acc, m);
            }
            acc
        },
        1e-6,
    );
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
}
