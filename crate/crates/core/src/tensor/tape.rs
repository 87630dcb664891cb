//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! nodes in reverse insertion order, which is a valid reverse topological
//! order because inputs always precede their consumers.

use std::rc::Rc;

use super::kernels::{self, ConvGeom, ResampleMode};
use super::{Real, SparseMatrix, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// An op whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp {
    fn name(&self) -> &str;

    /// Gradient for each input (in recording order) given the output gradient.
    /// `None` means "no gradient flows to this input".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Elu,
    Square,
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, Real),
    Offset(Var),
    Unary(Var, Unary),
    Clamp(Var, Real, Real),
    Sum(Var),
    SumAxis(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Broadcast(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Softmax(Var),
    SpMM(Rc<SparseMatrix>, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    Resample(Var, ResampleMode),
    Filter {
        x: Var,
        kernel: Rc<Vec<Real>>,
        kh: usize,
        kw: usize,
    },
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    /// Gradient of a leaf or parameter node, if any flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter; zeros if it was not reached.
    pub fn param(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v).cloned())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
    }

    /// One gradient per parameter in `store`, in store order.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store.ids().map(|id| self.param(id, store)).collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    consumed: bool,
}

fn shape_of(t: &Tensor) -> Vec<usize> {
    t.shape().to_vec()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: Real) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Registers a parameter; repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
        name: &str,
    ) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{name}: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(shape_of(ta), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    fn map(&self, x: Var, f: impl Fn(Real) -> Real) -> Tensor {
        let t = self.value(x);
        Tensor::new(shape_of(t), t.data().iter().map(|v| f(*v)).collect()).unwrap()
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Var {
        let v = self.map(x, |a| a * s);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `x + c` for a scalar constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: Real) -> Var {
        let v = self.map(x, |a| a + c);
        let ng = self.ng(x);
        self.push(v, Op::Offset(x), ng)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let v = self.map(x, |a| match kind {
            Unary::Exp => a.exp(),
            Unary::Ln => a.ln(),
            Unary::Tanh => a.tanh(),
            Unary::Sigmoid => sigmoid(a),
            Unary::Sin => a.sin(),
            Unary::Cos => a.cos(),
            Unary::Sqrt => a.sqrt(),
            Unary::Abs => a.abs(),
            Unary::Elu => {
                if a > 0.0 {
                    a
                } else {
                    a.exp_m1()
                }
            }
            Unary::Square => a * a,
        });
        let ng = self.ng(x);
        self.push(v, Op::Unary(x, kind), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Elu)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Elementwise clamp. The gradient is zero outside the interval; exactly
    /// on a bound it passes only when a descent step would move the value inside.
    pub fn clamp(&mut self, x: Var, lo: Real, hi: Real) -> Var {
        let v = self.map(x, |a| a.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(v, Op::Clamp(x, lo, hi), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as Real;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let ng = self.ng(x);
        self.push(Tensor::new(oshape, out).unwrap(), Op::SumAxis(x), ng)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            ta.rank() == 2 && tb.rank() == 2,
            "matmul needs rank-2 operands"
        );
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        assert_eq!(
            k,
            tb.shape()[0],
            "matmul: inner dimension mismatch {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out).unwrap(), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 2);
        let v = transpose2(t);
        let ng = self.ng(x);
        self.push(v, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let v = self.value(x).clone().reshaped(shape).expect("reshape");
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Broadcast to `shape` (same rank; extents must match or be 1).
    pub fn broadcast(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let t = self.value(x);
        if t.shape() == shape.as_slice() {
            return x;
        }
        let map = broadcast_map(t.shape(), &shape);
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data).unwrap(), Op::Broadcast(x), ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let first = self.value(xs[0]).shape().to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let lens: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.value(v).shape();
                assert_eq!(s.len(), first.len(), "concat: rank mismatch");
                for (d, (a, b)) in s.iter().zip(&first).enumerate() {
                    assert!(
                        d == axis || a == b,
                        "concat: shape mismatch {s:?} vs {first:?}"
                    );
                }
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&lens) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(
            Tensor::new(shape, data).unwrap(),
            Op::Concat(xs.to_vec(), axis),
            ng,
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        assert!(start + len <= shape[axis], "slice out of range");
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let ng = self.ng(x);
        self.push(
            Tensor::new(oshape, data).unwrap(),
            Op::Slice(x, axis, start),
            ng,
        )
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let w = *t.shape().last().expect("softmax of a scalar");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(w) {
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::new(shape_of(t), data).unwrap();
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x), ng)
    }

    /// Sparse `[r, c]` times dense `[c, f]`.
    pub fn spmm(&mut self, m: &Rc<SparseMatrix>, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 2);
        assert_eq!(
            t.shape()[0],
            m.cols(),
            "spmm: {} rows vs matrix width {}",
            t.shape()[0],
            m.cols()
        );
        let f = t.shape()[1];
        let v = Tensor::new(vec![m.rows(), f], m.matmul_dense(t.data(), f)).unwrap();
        let ng = self.ng(x);
        self.push(v, Op::SpMM(Rc::clone(m), x), ng)
    }

    /// Stride-1 convolution of a `[cin, h, w]` image with `[cout, cin, kh, kw]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.rank(), 3, "conv2d input must be [c, h, w]");
        assert_eq!(tw.rank(), 4, "conv2d weight must be [cout, cin, kh, kw]");
        let g = ConvGeom {
            cin: tx.shape()[0],
            h: tx.shape()[1],
            w: tx.shape()[2],
            kh: tw.shape()[2],
            kw: tw.shape()[3],
            pad,
        };
        assert_eq!(tw.shape()[1], g.cin, "conv2d channel mismatch");
        let cout = tw.shape()[0];
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(tx.data(), tw.data(), bias, cout, &g);
        let v = Tensor::new(vec![cout, g.out_h(), g.out_w()], out).unwrap();
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(v, Op::Conv2d { x, w, b, pad }, ng)
    }

    /// Resample a `[c, h, w]` image to `[c, ho, wo]`.
    pub fn resample(&mut self, x: Var, ho: usize, wo: usize, mode: ResampleMode) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 3);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let out = kernels::resample_forward(t.data(), c, h, w, ho, wo, mode);
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![c, ho, wo], out).unwrap(),
            Op::Resample(x, mode),
            ng,
        )
    }

    /// Valid-mode depthwise filtering of a `[c, h, w]` image by a fixed kernel.
    pub fn filter(&mut self, x: Var, kernel: &Rc<Vec<Real>>, kh: usize, kw: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 3);
        assert_eq!(kernel.len(), kh * kw);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        assert!(h >= kh && w >= kw, "filter larger than image");
        let out = kernels::filter_valid_forward(t.data(), c, h, w, kernel, kh, kw);
        let v = Tensor::new(vec![c, h + 1 - kh, w + 1 - kw], out).unwrap();
        let ng = self.ng(x);
        self.push(
            v,
            Op::Filter {
                x,
                kernel: Rc::clone(kernel),
                kh,
                kw,
            },
            ng,
        )
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(output, Op::Custom(op, inputs.to_vec()), ng)
    }

    // ---- composite helpers -------------------------------------------------

    /// `x + b` with `b` broadcast to the shape of `x`.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast(b, shape);
        self.add(x, bb)
    }

    pub fn mul_bcast(&mut self, x: Var, b: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast(b, shape);
        self.mul(x, bb)
    }

    pub fn div_bcast(&mut self, x: Var, b: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast(b, shape);
        self.div(x, bb)
    }

    /// Affine map `x w + b` for `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => {
                let o = self.shape(b)[0];
                let b2 = self.reshape(b, vec![1, o]);
                self.add_bcast(y, b2)
            }
            None => y,
        }
    }

    /// Normalizes each row of an `[n, d]` matrix to unit length.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        let s = self.sum_axis(sq, 1);
        let n = self.sqrt(s);
        self.div_bcast(x, n)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar root. Fails on a non-scalar root or if the
    /// tape was already consumed by a previous backward without `reset`.
    pub fn backward(&mut self, root: Var) -> Result<Grads> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice on the same tape without reset".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(shape_of(self.value(root)), 1.0));
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    leaves[i] = Some(g);
                }
                op => self.backward_op(op, &node.value, &g, &mut grads),
            }
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Grads { leaves, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(shape_of(a), d).unwrap()
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let neg = Self::zip_map(g, g, |x, _| -x);
                self.acc(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, Self::zip_map(g, tb, |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, Self::zip_map(g, ta, |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                if self.ng(*a) {
                    self.acc(grads, *a, Self::zip_map(g, tb, |x, y| x / y));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -out/b
                    let t = Self::zip_map(g, out, |x, o| x * o);
                    self.acc(grads, *b, Self::zip_map(&t, tb, |x, y| -x / y));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, Self::zip_map(g, g, |v, _| v * s));
            }
            Op::Offset(x) => self.acc(grads, *x, g.clone()),
            Op::Unary(x, kind) => {
                let tx = self.value(*x);
                let d: Vec<Real> = tx
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&a, &y), &gv)| {
                        gv * match kind {
                            Unary::Exp => y,
                            Unary::Ln => 1.0 / a,
                            Unary::Tanh => 1.0 - y * y,
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Sin => a.cos(),
                            Unary::Cos => -a.sin(),
                            Unary::Sqrt => 0.5 / y,
                            Unary::Abs => {
                                if a > 0.0 {
                                    1.0
                                } else if a < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Elu => {
                                if a > 0.0 {
                                    1.0
                                } else {
                                    y + 1.0
                                }
                            }
                            Unary::Square => 2.0 * a,
                        }
                    })
                    .collect();
                self.acc(grads, *x, Tensor::new(shape_of(tx), d).unwrap());
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let tx = self.value(*x);
                let d = Self::zip_map(tx, g, |a, gv| {
                    // exactly on a bound, keep the one-sided derivative that points inward
                    let inside =
                        (a > lo && a < hi) || (a == hi && gv > 0.0) || (a == lo && gv < 0.0);
                    if inside {
                        gv
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *x, d);
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::full(s, g.item()));
            }
            Op::SumAxis(x) => {
                let s = self.shape(*x).to_vec();
                let map = broadcast_map(g.shape(), &s);
                let d = map.iter().map(|&i| g.data()[i]).collect();
                self.acc(grads, *x, Tensor::new(s, d).unwrap());
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, 0.0);
                    self.acc(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                    self.acc(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Transpose(x) => self.acc(grads, *x, transpose2(g)),
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                self.acc(grads, *x, g.clone().reshaped(s).unwrap());
            }
            Op::Broadcast(x) => {
                let s = self.shape(*x).to_vec();
                let map = broadcast_map(&s, g.shape());
                let mut d = vec![0.0; s.iter().product()];
                for (gi, &xi) in map.iter().enumerate() {
                    d[xi] += g.data()[gi];
                }
                self.acc(grads, *x, Tensor::new(s, d).unwrap());
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let s = self.shape(v).to_vec();
                    let len = s[*axis];
                    if self.ng(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.acc(grads, v, Tensor::new(s, d).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Slice(x, axis, start) => {
                let s = self.shape(*x).to_vec();
                let (outer, full, inner) = split_axis(&s, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![0.0; s.iter().product()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, Tensor::new(s, d).unwrap());
            }
            Op::Softmax(x) => {
                let w = *out.shape().last().unwrap();
                let mut d = vec![0.0; out.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(w)
                    .zip(out.data().chunks(w))
                    .zip(g.data().chunks(w))
                {
                    let dot: Real = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dv, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = y * (gv - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(shape_of(out), d).unwrap());
            }
            Op::SpMM(m, x) => {
                let f = g.shape()[1];
                let d = m.transpose_matmul_dense(g.data(), f);
                self.acc(grads, *x, Tensor::new(vec![m.cols(), f], d).unwrap());
            }
            Op::Conv2d { x, w, b, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let geom = ConvGeom {
                    cin: tx.shape()[0],
                    h: tx.shape()[1],
                    w: tx.shape()[2],
                    kh: tw.shape()[2],
                    kw: tw.shape()[3],
                    pad: *pad,
                };
                let cout = tw.shape()[0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    tx.data(),
                    tw.data(),
                    g.data(),
                    cout,
                    &geom,
                    self.ng(*x),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::new(shape_of(tx), dx).unwrap());
                }
                self.acc(grads, *w, Tensor::new(shape_of(tw), dw).unwrap());
                if let Some(b) = b {
                    self.acc(grads, *b, Tensor::new(vec![cout], db).unwrap());
                }
            }
            Op::Resample(x, mode) => {
                let s = self.shape(*x).to_vec();
                let d = kernels::resample_backward(
                    g.data(),
                    s[0],
                    s[1],
                    s[2],
                    g.shape()[1],
                    g.shape()[2],
                    *mode,
                );
                self.acc(grads, *x, Tensor::new(s, d).unwrap());
            }
            Op::Filter { x, kernel, kh, kw } => {
                let s = self.shape(*x).to_vec();
                let d =
                    kernels::filter_valid_backward(g.data(), s[0], s[1], s[2], kernel, *kh, *kw);
                self.acc(grads, *x, Tensor::new(s, d).unwrap());
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let ds = op.backward(&ins, out, g);
                assert_eq!(
                    ds.len(),
                    inputs.len(),
                    "custom op {} returned wrong gradient count",
                    op.name()
                );
                for (v, d) in inputs.iter().zip(ds) {
                    if let Some(d) = d {
                        self.acc(grads, *v, d);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(a: Real) -> Real {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut d = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            d[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], d).unwrap()
}

/// For each flat index of `to`, the flat index of `from` it reads under broadcasting.
fn broadcast_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    assert_eq!(
        from.len(),
        to.len(),
        "broadcast: rank mismatch {from:?} -> {to:?}"
    );
    for (a, b) in from.iter().zip(to) {
        assert!(
            a == b || *a == 1,
            "broadcast: cannot expand {from:?} to {to:?}"
        );
    }
    let rank = to.len();
    let mut fstride = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        fstride[d] = if from[d] == 1 { 0 } else { acc };
        acc *= from[d];
    }
    let n: usize = to.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        out.push(idx.iter().zip(&fstride).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
