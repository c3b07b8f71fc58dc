//! Central finite-difference checks against the tape's gradients.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-4;

fn eval<F, E>(f: &F, inputs: &[Tensor<f64>]) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if g.value(loss).numel() != 1 {
        return Err(TensorError::Contract("grad_check closure must return a scalar".into()).into());
    }
    Ok(g.value(loss).item())
}

/// Max over every input element of `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-6)`.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor<f64>], h: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_sampled(f, inputs, h, usize::MAX)
}

/// Like [`grad_check`] but probes at most `per_input` evenly spaced elements of each input.
pub fn grad_check_sampled<F, E>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    per_input: usize,
) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|&v| g.grad(v).cloned().expect("leaf grad populated")).collect();
    drop(g);

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        let n = inputs[t].numel();
        let count = n.min(per_input);
        for s in 0..count {
            let i = if count == n { s } else { s * n / count };
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + h;
            let plus = eval(&f, &probe)?;
            probe[t].data_mut()[i] = orig - h;
            let minus = eval(&f, &probe)?;
            probe[t].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let ad = grad.data()[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_f64(&[2, 3], &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4]).unwrap();
        let w = Tensor::from_f64(&[3, 2], &[1.0, 0.5, -0.25, 2.0, 0.75, -1.5]).unwrap();
        let err = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                g.sum(y)
            },
            &[x, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
