//! AdamW with decoupled weight decay, and the warmup plus step-decay schedule.

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<T: ParamTree<Tensor>>(params: &T) -> Self {
        let zeros: Vec<Vec<f64>> = params.leaves().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One update: `θ ← θ(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_step<T: ParamTree<Tensor>>(
    params: &mut T,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let lens: Vec<usize> = params.leaves().iter().map(|t| t.len()).collect();
    if grads.len() != lens.len()
        || state.m.len() != lens.len()
        || grads.iter().zip(&lens).any(|(g, n)| g.len() != *n)
        || state.m.iter().zip(&lens).any(|(g, n)| g.len() != *n)
    {
        return Err(Error::dim("gradients or optimizer state do not match parameters"));
    }
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    let decay = 1.0 - lr * weight_decay;
    let mut i = 0;
    params.visit_mut(&mut |t: &mut Tensor| {
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        i += 1;
    });
    Ok(())
}

/// Learning rate for 1-based `epoch`: a linear ramp to `base` over the
/// warmup epochs, then `base · factor^k` where `k` counts decay epochs
/// already reached.
pub fn lr_schedule(epoch: usize, base: f64, warmup: usize, decay_epochs: &[usize], factor: f64) -> f64 {
    if epoch <= warmup {
        return base * epoch as f64 / warmup as f64;
    }
    let k = decay_epochs.iter().filter(|&&e| epoch >= e).count();
    base * factor.powi(k as i32)
}
