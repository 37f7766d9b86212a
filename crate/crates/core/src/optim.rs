//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::tensor::{Gradients, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

fn check_grads<T: Scalar>(params: &ModelParams<T>, grads: &Gradients<T>) -> Result<()> {
    if grads.len() != params.entries().len()
        || params
            .entries()
            .iter()
            .zip(grads.iter())
            .any(|((pn, pt), (gn, gt))| pn != gn || pt.shape() != gt.shape())
    {
        return Err(Error::Contract("gradient set does not mirror the parameter set".into()));
    }
    Ok(())
}

/// Plain gradient descent, no momentum or weight decay.
pub fn sgd_step<T: Scalar>(params: &mut ModelParams<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    let lr = T::from_f64(lr);
    for (p, (_, g)) in params.tensors_mut().zip(grads.iter()) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w = *w - lr * d;
        }
    }
    Ok(())
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One Adam update with bias correction.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &Gradients<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.len() != grads.len() {
            return Err(Error::Contract(
                "Adam state was built for a different parameter set".into(),
            ));
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (c1, c2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
        let bc1 = T::from_f64(1.0 - cfg.beta1.powf(t));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powf(t));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(cfg.eps));
        for (((p, (_, g)), m), v) in params
            .tensors_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((w, &d), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + c1 * d;
                *vi = b2 * *vi + c2 * d * d;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
