use super::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Max over reliable coordinates of `|g_tape - g_fd| / max(1, |g_fd|)`; NaN propagates.
    pub max_rel_error: Real,
    /// Coordinates where one-sided differences disagree (a kink lies within the step).
    pub unreliable: Vec<usize>,
    pub tape_grad: Vec<Real>,
    pub fd_grad: Vec<Real>,
}

impl FdReport {
    pub fn passes(&self, tol: Real) -> bool {
        self.max_rel_error <= tol
    }
}

fn eval<F: Fn(&mut Tape, Var) -> Var>(f: &F, point: &Tensor) -> Real {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), false);
    let y = f(&mut tape, x);
    tape.value(y).item()
}

/// Checks the tape gradient of a scalar function at `point` against central
/// differences with step `step`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: Real) -> FdReport
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x);
    let tape_grad = match tape.backward(y) {
        Ok(g) => g
            .wrt(x)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; point.len()]),
        Err(_) => vec![Real::NAN; point.len()],
    };
    let f0 = tape.value(y).item();
    let mut p = point.clone();
    compare(f0, tape_grad, step, point.len(), |i, delta| {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + delta;
        let v = eval(&f, &p);
        p.data_mut()[i] = orig;
        v
    })
}

/// Central-difference check of selected parameter coordinates
/// `(param, flat index)` of a scalar function of a parameter store.
pub fn finite_diff_params<F>(store: &ParamStore, coords: &[(ParamId, usize)], f: F, step: Real) -> FdReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let y = f(&mut tape, store);
    let f0 = tape.value(y).item();
    let tape_grad: Vec<Real> = match tape.backward(y) {
        Ok(g) => {
            let mut cache = std::collections::HashMap::new();
            coords
                .iter()
                .map(|&(id, i)| cache.entry(id.index()).or_insert_with(|| g.param(id, store)).data()[i])
                .collect()
        }
        Err(_) => vec![Real::NAN; coords.len()],
    };
    let mut s = store.clone();
    compare(f0, tape_grad, step, coords.len(), |c, delta| {
        let (id, i) = coords[c];
        let orig = s.get(id).data()[i];
        s.get_mut(id).data_mut()[i] = orig + delta;
        let mut t = Tape::new();
        let y = f(&mut t, &s);
        s.get_mut(id).data_mut()[i] = orig;
        t.value(y).item()
    })
}

fn compare(
    f0: Real,
    tape_grad: Vec<Real>,
    step: Real,
    n: usize,
    mut eval_at: impl FnMut(usize, Real) -> Real,
) -> FdReport {
    let mut fd_grad = Vec::with_capacity(n);
    let mut unreliable = Vec::new();
    let mut max_rel_error: Real = 0.0;
    for i in 0..n {
        let fp = eval_at(i, step);
        let fm = eval_at(i, -step);
        let central = (fp - fm) / (2.0 * step);
        let fwd = (fp - f0) / step;
        let bwd = (f0 - fm) / step;
        fd_grad.push(central);
        if (fwd - bwd).abs() > 1e-3 * central.abs().max(1.0) {
            unreliable.push(i);
            continue;
        }
        let err = (tape_grad[i] - central).abs() / central.abs().max(1.0);
        if err.is_nan() || max_rel_error.is_nan() {
            max_rel_error = Real::NAN;
        } else {
            max_rel_error = max_rel_error.max(err);
        }
    }
    FdReport {
        max_rel_error,
        unreliable,
        tape_grad,
        fd_grad,
    }
}
