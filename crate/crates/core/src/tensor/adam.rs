use super::{Grads, ParamId, ParamStore, Real, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl AdamConfig {
    pub fn with_lr(lr: Real) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape_err(format!(
                "adam: {} params / {} grads for {} accumulators",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return shape_err(format!(
                    "adam: param {:?} / grad {:?} / state {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Adam bound to a group of parameters in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    ids: Vec<ParamId>,
    state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let shapes: Vec<&[usize]> = ids.iter().map(|&id| store.get(id).shape()).collect();
        let state = AdamState::new(config, &shapes);
        Self { ids, state }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps(&self) -> u64 {
        self.state.steps()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        let gs: Vec<Tensor> = self.ids.iter().map(|&id| grads.param(id, store)).collect();
        let mut taken: Vec<Tensor> = self
            .ids
            .iter()
            .map(|&id| std::mem::replace(store.get_mut(id), Tensor::scalar(0.0)))
            .collect();
        let res = {
            let mut refs: Vec<&mut Tensor> = taken.iter_mut().collect();
            let grefs: Vec<&Tensor> = gs.iter().collect();
            self.state.step(&mut refs, &grefs)
        };
        for (&id, t) in self.ids.iter().zip(taken) {
            *store.get_mut(id) = t;
        }
        res
    }
}
