//! Small dense building blocks shared by the networks.

use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::util::{normal_tensor, Rng};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// He-style normal init, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = normal_tensor(rng, vec![fan_in, fan_out], (1.0 / fan_in as Real).sqrt());
        Self::from_tensors(store, name, w, Tensor::zeros(vec![fan_out]))
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::from_tensors(store, name, Tensor::zeros(vec![fan_in, fan_out]), Tensor::zeros(vec![fan_out]))
    }

    fn from_tensors(store: &mut ParamStore, name: &str, w: Tensor, b: Tensor) -> Self {
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// Two-layer perceptron with an ELU hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    /// `zero_out` zero-initializes the output layer so the network starts at
    /// its activation's neutral point.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        sizes: [usize; 3],
        zero_out: bool,
        rng: &mut Rng,
    ) -> Self {
        let hidden = Linear::new(store, &format!("{name}.0"), sizes[0], sizes[1], rng);
        let out = if zero_out {
            Linear::zeros(store, &format!("{name}.1"), sizes[1], sizes[2])
        } else {
            Linear::new(store, &format!("{name}.1"), sizes[1], sizes[2], rng)
        };
        Self { hidden, out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.hidden.forward(tape, store, x);
        let h = tape.elu(h);
        self.out.forward(tape, store, h)
    }
}

/// Same-padded stride-1 convolution over `[c, h, w]` images.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    /// He-normal init for odd `kernel`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut Rng) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = normal_tensor(rng, vec![cout, cin, kernel, kernel], (2.0 / fan_in as Real).sqrt());
        Self::from_tensors(store, name, w, Tensor::zeros(vec![cout]))
    }

    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::from_tensors(store, name, Tensor::zeros(vec![cout, cin, kernel, kernel]), Tensor::zeros(vec![cout]))
    }

    fn from_tensors(store: &mut ParamStore, name: &str, w: Tensor, b: Tensor) -> Self {
        debug_assert!(w.shape()[2] % 2 == 1 && w.shape()[2] == w.shape()[3]);
        Self {
            kernel: w.shape()[2],
            cin: w.shape()[1],
            cout: w.shape()[0],
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.kernel / 2)
    }
}
