use std::rc::Rc;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use splatgraph::mesh::{
    apply_sampling, build_hierarchy, build_operators, icosphere, operators_from_edges, SamplingHierarchy,
};
use splatgraph::tensor::{SparseMatrix, Tape};
use splatgraph::Tensor;

fn dense(m: &SparseMatrix) -> DMatrix<f64> {
    let d = m.to_dense();
    DMatrix::from_row_slice(m.rows(), m.cols(), &d.iter().map(|&x| x as f64).collect::<Vec<_>>())
}

fn eigenvalues(m: &SparseMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(dense(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

#[test]
fn single_edge_laplacian() {
    let ops = operators_from_edges(2, &[(0, 1)]).unwrap();
    assert_eq!(ops.laplacian.to_dense(), vec![1.0, -1.0, -1.0, 1.0]);
}

#[test]
fn icosahedron_lambda_max_matches_dense_oracle() {
    let ops = build_operators(&icosphere(0, 1.0)).unwrap();
    let ev = eigenvalues(&ops.laplacian);
    let top = *ev.last().unwrap();
    assert!((top - (5.0 + 5f64.sqrt())).abs() < 1e-12);
    let rel = (ops.lambda_estimate as f64 - top).abs() / top;
    assert!(rel < 1e-6, "relative error {rel}");
}

#[test]
fn laplacian_invariants_on_small_meshes() {
    for s in 0..=2 {
        let ops = build_operators(&icosphere(s, 1.0)).unwrap();
        let a = dense(&ops.adjacency);
        assert_eq!(a, a.transpose());
        assert!((0..a.nrows()).all(|i| a[(i, i)] == 0.0));
        let ones = vec![1.0; ops.num_vertices()];
        let l1 = ops.laplacian.matvec(&ones);
        assert!(l1.iter().all(|x| x.abs() < 1e-12));
        let ev = eigenvalues(&ops.laplacian);
        assert!(ev[0] >= -1e-9, "min eigenvalue {}", ev[0]);
        let sev = eigenvalues(&ops.scaled_laplacian);
        assert!(sev[0] >= -1.0 - 1e-9 && *sev.last().unwrap() <= 1.0 + 1e-6, "{:?}", (sev[0], sev.last()));
    }
}

fn check_sampling_rows(h: &SamplingHierarchy) {
    for level in &h.levels {
        for r in 0..level.up.rows() {
            let row: Vec<_> = level.up.row(r).collect();
            assert!(!row.is_empty() && row.len() <= 3);
            assert!(row.iter().all(|&(_, v)| v >= 0.0));
            let s: f64 = row.iter().map(|&(_, v)| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for r in 0..level.down.rows() {
            let row: Vec<_> = level.down.row(r).collect();
            assert_eq!(row.len(), 1);
            assert_eq!(row[0].1, 1.0);
        }
    }
}

#[test]
fn icosphere_hierarchy_sizes() {
    let mesh = icosphere(3, 1.0);
    assert_eq!(mesh.num_vertices(), 642);
    let h = build_hierarchy(&mesh, 2, 4.0).unwrap();
    let sizes = h.sizes();
    assert_eq!(sizes[0], 642);
    assert!((144..=176).contains(&sizes[1]), "{sizes:?}");
    assert!((36..=44).contains(&sizes[2]), "{sizes:?}");
    check_sampling_rows(&h);
    for l in 1..=2 {
        let ev = eigenvalues(&h.ops(l).scaled_laplacian);
        assert!(*ev.last().unwrap() <= 1.0 + 1e-6);
    }
    let again = build_hierarchy(&mesh, 2, 4.0).unwrap();
    for (a, b) in h.levels.iter().zip(&again.levels) {
        assert_eq!(a.kept, b.kept);
        assert_eq!(*a.up, *b.up);
        assert_eq!(a.mesh, b.mesh);
    }
}

#[test]
fn tiny_factor_gives_identity_sampling() {
    let mesh = icosphere(2, 1.0);
    let h = build_hierarchy(&mesh, 1, 1.000_1).unwrap();
    let id = SparseMatrix::identity(162);
    assert_eq!(*h.levels[0].down, id);
    assert_eq!(*h.levels[0].up, id);
}

#[test]
fn apply_sampling_identity_and_shape_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(vec![5, 2], |i| i as f64 as _));
    let id = Rc::new(SparseMatrix::identity(5));
    let y = apply_sampling(&mut tape, x, &id).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    let wrong = Rc::new(SparseMatrix::identity(4));
    assert!(apply_sampling(&mut tape, x, &wrong).is_err());
}

#[test]
fn apply_sampling_is_differentiable() {
    let h = build_hierarchy(&icosphere(2, 1.0), 1, 4.0).unwrap();
    let up = h.levels[0].up.clone();
    let n = up.cols();
    let point = Tensor::from_fn(vec![n, 3], |i| ((i * 7 % 11) as f64 * 0.1) as _);
    let report = splatgraph::tensor::finite_diff_check(
        |t, x| {
            let y = apply_sampling(t, x, &up).unwrap();
            let s = t.sin(y);
            t.sum(s)
        },
        &point,
        1e-6,
    );
    assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn up_after_down_restores_kept_vertices(vals in prop::collection::vec(-10.0f64..10.0, 162 * 2)) {
        let h = build_hierarchy(&icosphere(2, 1.0), 1, 4.0).unwrap();
        let lvl = &h.levels[0];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![162, 2], vals.iter().map(|&v| v as _).collect()).unwrap());
        let d = apply_sampling(&mut tape, x, &lvl.down).unwrap();
        let u = apply_sampling(&mut tape, d, &lvl.up).unwrap();
        let (xv, uv) = (tape.value(x).clone(), tape.value(u).clone());
        for &k in &lvl.kept {
            for f in 0..2 {
                prop_assert_eq!(uv.data()[k * 2 + f], xv.data()[k * 2 + f]);
            }
        }
    }

    #[test]
    fn constant_features_survive_upsampling(c in -5.0f64..5.0) {
        let h = build_hierarchy(&icosphere(2, 1.0), 1, 4.0).unwrap();
        let up = &h.levels[0].up;
        let y = up.matvec(&vec![c as _; up.cols()]);
        for v in y {
            prop_assert!((v as f64 - c).abs() < 1e-12 * c.abs().max(1.0));
        }
    }
}
