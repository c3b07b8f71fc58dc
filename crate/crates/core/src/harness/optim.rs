use nsf_tensor::ParamStore;

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: ParamStore<f64>,
    v: ParamStore<f64>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, hp: AdamParams) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = hp.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(CoreError::Data(format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if state.m.get(name).is_none() {
            state.m.insert(name, nsf_tensor::Tensor::zeros(p.shape()));
            state.v.insert(name, nsf_tensor::Tensor::zeros(p.shape()));
        }
        let m = state.m.get_mut(name).expect("inserted above").data_mut();
        let v = state.v.get_mut(name).expect("inserted above").data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w = (*w as f64 - moment_update(mi, vi, gi as f64, (c1, c2), hp)) as f32;
        }
    }
    Ok(())
}

/// Advances one element's moments and returns the step to subtract.
fn moment_update(m: &mut f64, v: &mut f64, g: f64, corr: (f64, f64), hp: AdamParams) -> f64 {
    let (b1, b2) = hp.betas;
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    hp.lr * (*m / corr.0) / ((*v / corr.1).sqrt() + hp.eps)
}

/// `base · 0.5^⌊epoch / halve_every⌋`.
pub fn lr_schedule(base: f64, epoch: usize, halve_every: usize) -> f64 {
    let k = epoch / halve_every.max(1);
    base * 0.5f64.powi(k.min(1000) as i32)
}
