use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyper-parameters. Moment buffers are allocated lazily on
/// the first step, shaped like the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Vec<f32>>,
    #[serde(skip)]
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update of `params` from their grad slots.
/// A parameter without a gradient is treated as having a zero gradient.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.numel() || p.grad().is_some_and(|g| g.len() != p.numel()) {
            return Err(Error::shape(format!("parameter {i} changed shape")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = p.take_grad() else {
            // zero gradient: moments decay, update uses the decayed moments
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for ((w, m), v) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                *m *= b1;
                *v *= b2;
                *w -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
            }
            continue;
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut())
            .zip(&g)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        }
        p.set_grad(Some(g));
    }
    Ok(())
}
