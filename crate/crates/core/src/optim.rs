//! Adam with bias correction and the step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::net::DeblurNet;
use crate::tensor::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Learning rate at a given iteration: the base rate decays by ×0.75 every
/// 10⁴ iterations, stepwise.
pub fn lr_at(base_lr: f64, iteration: u64) -> f64 {
    base_lr * 0.75f64.powi((iteration / 10_000) as i32)
}

/// First and second moment estimates for every parameter tensor, in the
/// network's canonical parameter order, plus the shared step counter.
pub struct AdamState<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Number of completed steps; bias correction uses `t` after increment.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &DeblurNet<T>) -> Self {
        let sizes: Vec<usize> = net.params().iter().map(|(_, p)| p.numel()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }
}

/// One Adam update over every parameter of the network, consuming the
/// gradients accumulated by the latest backward pass.
///
/// `iteration` is only for error reporting: a non-finite gradient aborts the
/// step with the parameter's name before any tensor is modified.
pub fn adam_step<T: Scalar>(
    net: &mut DeblurNet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    iteration: u64,
) -> Result<()> {
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let eps = T::from_f64(ADAM_EPSILON);
    let one = T::one();

    // Collect gradients first: the step is all-or-nothing.
    let mut grads: Vec<Vec<T>> = Vec::with_capacity(state.m.len());
    for (name, p) in net.params() {
        let g = p.grad().ok_or_else(|| Error::Unsupported {
            op: "adam_step",
            detail: format!("parameter {name} has no gradient; run backward first"),
        })?;
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient { name, iteration });
        }
        grads.push(g);
    }

    state.t += 1;
    let corr1 = T::from_f64(1.0 - ADAM_BETA1.powi(state.t as i32));
    let corr2 = T::from_f64(1.0 - ADAM_BETA2.powi(state.t as i32));
    let lr_t = T::from_f64(lr);

    for (idx, (_, p)) in net.params_mut().into_iter().enumerate() {
        let g = &grads[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let mut data = p.data().to_vec();
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            data[i] = data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        p.replace_data(data);
    }
    Ok(())
}
