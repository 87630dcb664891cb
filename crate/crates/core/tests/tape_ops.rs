//! Gradient checks for every registered tape op against central differences.

use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatgraph::tensor::kernels::ResampleMode;
use splatgraph::tensor::{finite_diff_check, ParamStore, SparseMatrix, Tape, Tensor, Var};
use splatgraph::Real;

const TOL: Real = 1e-5;
const STEP: Real = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn check(name: &str, point: &Tensor, f: impl Fn(&mut Tape, Var) -> Var) {
    // weight the output so the check is not only on sum-of-elements symmetry
    let report = finite_diff_check(
        |t, x| {
            let y = f(t, x);
            let n = t.value(y).len();
            let shape = t.shape(y).to_vec();
            let w = t.constant(Tensor::from_fn(shape, |i| {
                1.0 + 0.37 * ((i * 7919) % 13) as Real / 13.0
            }));
            let _ = n;
            let p = t.mul(y, w);
            t.sum(p)
        },
        point,
        STEP,
    );
    assert!(
        report.passes(TOL),
        "{name}: max rel error {} (unreliable {:?})",
        report.max_rel_error,
        report.unreliable
    );
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let y = t.mul(x, x);
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().item(), 6.0);
}

#[test]
fn constants_give_zero_param_grads() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::from_vec(vec![1.0, 2.0]));
    let mut t = Tape::new();
    let _ = t.param(&store, p);
    let c = t.constant(Tensor::from_vec(vec![4.0, 5.0]));
    let s = t.sum(c);
    let g = t.backward(s).unwrap();
    assert_eq!(g.param(p, &store).data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_root_and_double_backward_are_errors() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    assert!(t.backward(x).is_err());
    let s = t.sum(x);
    assert!(t.backward(s).is_ok());
    assert!(t.backward(s).is_err());
    t.reset();
    let x = t.leaf(Tensor::scalar(1.0), true);
    assert!(t.backward(x).is_ok());
}

#[test]
fn matmul_chain_matches_finite_differences() {
    let b = random(&[3, 3], 2);
    let c = random(&[3, 3], 3);
    let report = finite_diff_check(
        |t, x| {
            let b = t.constant(b.clone());
            let c = t.constant(c.clone());
            let y = t.matmul(x, b);
            let y = t.matmul(y, c);
            let y = t.matmul(y, x);
            let y = t.tanh(y);
            t.sum(y)
        },
        &random(&[3, 3], 1),
        STEP,
    );
    assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
}

#[test]
fn sum_of_sines_passes_at_two_steps() {
    let p = random(&[7], 5);
    for step in [1e-5, 1e-6] {
        let r = finite_diff_check(
            |t, x| {
                let s = t.sin(x);
                t.sum(s)
            },
            &p,
            step,
        );
        assert!(r.max_rel_error < 1e-6);
    }
    let r = finite_diff_check(|t, _| t.scalar(4.0), &p, STEP);
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn clamp_kink_is_flagged_unreliable() {
    let p = Tensor::from_vec(vec![1.0, 0.3]);
    let r = finite_diff_check(
        |t, x| {
            let y = t.clamp(x, -1.0, 1.0);
            t.sum(y)
        },
        &p,
        STEP,
    );
    assert_eq!(r.unreliable, vec![0]);
    assert!(r.max_rel_error < 1e-6);
}

#[test]
fn elementwise_binary_ops() {
    let other = random(&[2, 3], 11);
    let pos = Tensor::from_fn(vec![2, 3], |i| 0.5 + i as Real * 0.1);
    let p = random(&[2, 3], 10);
    check("add", &p, |t, x| {
        let o = t.constant(other.clone());
        t.add(x, o)
    });
    check("sub", &p, |t, x| {
        let o = t.constant(other.clone());
        t.sub(o, x)
    });
    check("mul", &p, |t, x| t.mul(x, x));
    check("div-num", &p, |t, x| {
        let o = t.constant(pos.clone());
        t.div(x, o)
    });
    check("div-den", &pos, |t, x| {
        let o = t.constant(other.clone());
        t.div(o, x)
    });
}

#[test]
fn elementwise_unary_ops() {
    let p = random(&[4, 3], 20);
    let pos = Tensor::from_fn(vec![4, 3], |i| 0.2 + i as Real * 0.15);
    check("exp", &p, |t, x| t.exp(x));
    check("tanh", &p, |t, x| t.tanh(x));
    check("sigmoid", &p, |t, x| t.sigmoid(x));
    check("sin", &p, |t, x| t.sin(x));
    check("cos", &p, |t, x| t.cos(x));
    check("elu", &p, |t, x| t.elu(x));
    check("square", &p, |t, x| t.square(x));
    check("abs", &p, |t, x| t.abs(x));
    check("ln", &pos, |t, x| t.ln(x));
    check("sqrt", &pos, |t, x| t.sqrt(x));
    check("scale", &p, |t, x| t.scale(x, -2.5));
    check("add_scalar", &p, |t, x| t.add_scalar(x, 0.7));
}

#[test]
fn reductions_and_layout_ops() {
    let p = random(&[2, 3, 4], 30);
    check("sum_axis0", &p, |t, x| t.sum_axis(x, 0));
    check("sum_axis2", &p, |t, x| t.sum_axis(x, 2));
    check("mean", &p, |t, x| t.mean(x));
    check("reshape", &p, |t, x| t.reshape(x, vec![6, 4]));
    check("slice", &p, |t, x| t.slice(x, 1, 1, 2));
    check("concat", &p, |t, x| {
        let a = t.slice(x, 2, 0, 1);
        let b = t.scale(x, 2.0);
        t.concat(&[b, a, x], 2)
    });
    check("broadcast", &random(&[1, 3, 1], 31), |t, x| {
        t.broadcast(x, vec![2, 3, 4])
    });
    check("transpose", &random(&[3, 5], 32), |t, x| t.transpose(x));
    check("softmax", &p, |t, x| t.softmax(x));
    check("normalize_rows", &random(&[4, 3], 33), |t, x| {
        t.normalize_rows(x)
    });
}

#[test]
fn matmul_both_sides() {
    let a = random(&[3, 4], 40);
    let b = random(&[4, 2], 41);
    check("matmul-left", &a, |t, x| {
        let b = t.constant(b.clone());
        t.matmul(x, b)
    });
    check("matmul-right", &b, |t, x| {
        let a = t.constant(a.clone());
        t.matmul(a, x)
    });
}

#[test]
fn sparse_product() {
    let m = Rc::new(SparseMatrix::from_triplets(
        3,
        4,
        &[
            (0, 1, 2.0),
            (0, 3, -1.0),
            (1, 0, 0.5),
            (2, 2, 1.5),
            (2, 3, 0.25),
        ],
    ));
    check("spmm", &random(&[4, 2], 50), |t, x| t.spmm(&m, x));
}

#[test]
fn convolution_inputs_weights_bias() {
    let x = random(&[2, 5, 6], 60);
    let w = random(&[3, 2, 3, 3], 61);
    let b = random(&[3], 62);
    check("conv-x", &x, |t, v| {
        let w = t.constant(w.clone());
        let b = t.constant(b.clone());
        t.conv2d(v, w, Some(b), 1)
    });
    check("conv-w", &w, |t, v| {
        let x = t.constant(x.clone());
        t.conv2d(x, v, None, 1)
    });
    check("conv-b", &b, |t, v| {
        let x = t.constant(x.clone());
        let w = t.constant(w.clone());
        t.conv2d(x, w, Some(v), 0)
    });
    let w1 = random(&[4, 2, 1, 1], 63);
    check("conv1x1", &x, |t, v| {
        let w = t.constant(w1.clone());
        t.conv2d(v, w, None, 0)
    });
}

#[test]
fn resample_and_filter() {
    let x = random(&[2, 4, 6], 70);
    check("bilinear-up", &x, |t, v| {
        t.resample(v, 8, 12, ResampleMode::Bilinear)
    });
    check("bilinear-down", &x, |t, v| {
        t.resample(v, 2, 3, ResampleMode::Bilinear)
    });
    check("bilinear-odd", &x, |t, v| {
        t.resample(v, 5, 7, ResampleMode::Bilinear)
    });
    check("nearest", &x, |t, v| {
        t.resample(v, 8, 12, ResampleMode::Nearest)
    });
    let k = Rc::new(vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
    check("filter", &x, |t, v| t.filter(v, &k, 2, 3));
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut store = ParamStore::new();
        let w = store.add("w", random(&[5, 4], 80));
        let mut t = Tape::new();
        let x = t.constant(random(&[6, 5], 81));
        let wv = t.param(&store, w);
        let y = t.matmul(x, wv);
        let y = t.softmax(y);
        let y = t.sin(y);
        let s = t.sum(y);
        t.backward(s).unwrap().param(w, &store)
    };
    let a = run();
    let b = run();
    assert_eq!(a.data(), b.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_shapes_elementwise_chain(r in 1usize..4, c in 1usize..5, seed in 0u64..1000) {
        let p = random(&[r, c], seed);
        let report = finite_diff_check(|t, x| {
            let a = t.tanh(x);
            let b = t.sigmoid(x);
            let y = t.mul(a, b);
            let e = t.exp(y);
            let s = t.softmax(e);
            t.sum(s)
        }, &p, STEP);
        prop_assert!(report.max_rel_error < TOL);
    }

    #[test]
    fn random_shapes_matmul(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let a = random(&[m, k], seed);
        let b = random(&[k, n], seed + 1);
        let report = finite_diff_check(|t, x| {
            let b = t.constant(b.clone());
            let y = t.matmul(x, b);
            let y = t.sin(y);
            t.sum(y)
        }, &a, STEP);
        prop_assert!(report.max_rel_error < TOL);
    }
}
