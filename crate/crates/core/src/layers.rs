//! Parameter initialization and the small building blocks shared by the networks.
//!
//! Weights live in a [`ParamStore`] under dotted names; forward functions look them up
//! through [`BoundParams`] by the same names, so any `T: Element` graph can run them.

use nsf_tensor::{BoundParams, Element, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{CoreError, Result};

pub type Rng64 = rand_chacha::ChaCha8Rng;

const TRUNC_STD: f64 = 0.02;

/// Normal(0, 0.02) redrawn outside two standard deviations.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, TRUNC_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * TRUNC_STD {
                break v as f32;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng) as f32).collect()).expect("positive shape")
}

pub fn init_conv(store: &mut ParamStore, rng: &mut impl Rng, name: &str, out: usize, inp: usize, k: usize) {
    store.insert(format!("{name}.w"), fan_in_uniform(rng, &[out, inp, k, k], inp * k * k));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inp: usize, out: usize) {
    store.insert(format!("{name}.w"), trunc_normal(rng, &[inp, out]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

pub fn init_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::ones(&[dim]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

pub fn init_resblock(store: &mut ParamStore, rng: &mut impl Rng, name: &str, ch: usize) {
    init_conv(store, rng, &format!("{name}.conv0"), ch, ch, 3);
    init_conv(store, rng, &format!("{name}.conv1"), ch, ch, 3);
}

fn pair(p: &BoundParams, name: &str, a: &str, b: &str) -> Result<(Var, Var)> {
    Ok((p.get(&format!("{name}.{a}"))?, p.get(&format!("{name}.{b}"))?))
}

/// Square-kernel convolution with padding `k / 2`.
pub fn conv<T: Element>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let (w, b) = pair(p, name, "w", "b")?;
    let k = g.shape(w)[2];
    Ok(g.conv2d(x, w, Some(b), stride, k / 2, false)?)
}

/// Transposed convolution with kernel equal to stride (exact upsampling).
pub fn conv_transpose<T: Element>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let (w, b) = pair(p, name, "w", "b")?;
    let k = g.shape(w)[2];
    Ok(g.conv2d(x, w, Some(b), k, 0, true)?)
}

/// `x @ w + b` over the last axis of a 2-D input.
pub fn linear<T: Element>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let (w, b) = pair(p, name, "w", "b")?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

pub fn norm<T: Element>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let (gamma, beta) = pair(p, name, "g", "b")?;
    Ok(g.layer_norm(x, gamma, beta, 1e-5)?)
}

/// `x + conv1(gelu(conv0(x)))`.
pub fn resblock<T: Element>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let h = conv(g, p, &format!("{name}.conv0"), x, 1)?;
    let h = g.gelu(h)?;
    let h = conv(g, p, &format!("{name}.conv1"), h, 1)?;
    Ok(g.add(x, h)?)
}

/// Stores a scalar hyperparameter under `config.<key>` so checkpoints are self-describing.
pub fn put_config(store: &mut ParamStore, key: &str, value: f64) {
    store.insert(format!("config.{key}"), Tensor::scalar(value as f32));
}

pub fn get_config(store: &ParamStore, key: &str) -> Result<f64> {
    store
        .get(&format!("config.{key}"))
        .map(|t| t.item() as f64)
        .ok_or_else(|| CoreError::Config(format!("checkpoint lacks `config.{key}`")))
}

pub fn get_config_usize(store: &ParamStore, key: &str) -> Result<usize> {
    let v = get_config(store, key)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(CoreError::Config(format!("`config.{key}` = {v} is not a count")));
    }
    Ok(v as usize)
}

/// Trainable (non-`config.`) entries.
pub fn is_weight(name: &str) -> bool {
    !name.starts_with("config.")
}

/// Zero every entry whose name starts with `prefix`.
pub fn zero_prefix(store: &mut ParamStore, prefix: &str) {
    for (name, t) in store.iter_mut() {
        if name.starts_with(prefix) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
