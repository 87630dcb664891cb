use crate::error::{Error, Result};
use crate::mesh::GraphOperators;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::util::{normal_tensor, Rng};

/// Largest supported Chebyshev order.
pub const MAX_CHEB_ORDER: usize = 16;

/// Chebyshev graph filter bank of order `K` (polynomials `T_0..T_{K-1}`).
#[derive(Clone, Debug)]
pub struct ChebLayer {
    pub order: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    /// `[K, fan_in, fan_out]`
    pub theta: ParamId,
    /// `[fan_out]`
    pub bias: Option<ParamId>,
}

impl ChebLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        order: usize,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_order(order)?;
        let std = (1.0 / (order * fan_in) as Real).sqrt();
        let theta = normal_tensor(rng, vec![order, fan_in, fan_out], std);
        Self::from_tensors(store, name, theta, bias.then(|| Tensor::zeros(vec![fan_out])))
    }

    /// Wraps given coefficients; `theta` must be `[K, fan_in, fan_out]`.
    pub fn from_tensors(store: &mut ParamStore, name: &str, theta: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if theta.rank() != 3 {
            return Err(Error::Shape(format!("filter bank must be rank 3, got {:?}", theta.shape())));
        }
        let (order, fan_in, fan_out) = (theta.shape()[0], theta.shape()[1], theta.shape()[2]);
        check_order(order)?;
        if !theta.is_finite() {
            return Err(Error::Numeric("non-finite Chebyshev coefficients".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [fan_out] {
                return Err(Error::Shape(format!("bias shape {:?} vs {fan_out} outputs", b.shape())));
            }
        }
        Ok(Self {
            order,
            fan_in,
            fan_out,
            theta: store.add(format!("{name}.theta"), theta),
            bias: bias.map(|b| store.add(format!("{name}.bias"), b)),
        })
    }
}

fn check_order(order: usize) -> Result<()> {
    if order == 0 || order > MAX_CHEB_ORDER {
        return Err(Error::Config(format!("Chebyshev order {order} outside 1..={MAX_CHEB_ORDER}")));
    }
    Ok(())
}

/// `y = sum_k T_k(L~) x theta_k + b` via the three-term recurrence.
pub fn cheb_conv(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    ops: &GraphOperators,
    layer: &ChebLayer,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != ops.num_vertices() || shape[1] != layer.fan_in {
        return Err(Error::Shape(format!(
            "cheb_conv expects [{}, {}] features, got {shape:?}",
            ops.num_vertices(),
            layer.fan_in
        )));
    }
    let l = &ops.scaled_laplacian;
    let mut terms = Vec::with_capacity(layer.order);
    terms.push(x);
    if layer.order > 1 {
        terms.push(tape.spmm(l, x));
    }
    for k in 2..layer.order {
        let lt = tape.spmm(l, terms[k - 1]);
        let twice = tape.scale(lt, 2.0);
        terms.push(tape.sub(twice, terms[k - 2]));
    }
    // [n, K*fan_in] laid out k-major to match theta reshaped to [K*fan_in, fan_out]
    let stacked = if terms.len() == 1 { x } else { tape.concat(&terms, 1) };
    let theta = tape.param(store, layer.theta);
    let theta = tape.reshape(theta, vec![layer.order * layer.fan_in, layer.fan_out]);
    let bias = layer.bias.map(|b| tape.param(store, b));
    Ok(tape.linear(stacked, theta, bias))
}
