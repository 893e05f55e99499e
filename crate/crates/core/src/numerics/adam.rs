use super::Tensor;
use crate::{Error, Result, Scalar};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers for every parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update using each parameter's grad slot.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step<S: Scalar>(params: &mut [Tensor<S>], state: &mut AdamState<S>, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.len() {
            return Err(Error::Shape(format!("optimizer state for parameter {i} has the wrong size")));
        }
        if let Some(g) = p.grad() {
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i} at element {j}")));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (S::of(ADAM_BETA1), S::of(ADAM_BETA2));
    let (one_b1, one_b2) = (S::of(1.0 - ADAM_BETA1), S::of(1.0 - ADAM_BETA2));
    for (i, p) in params.iter_mut().enumerate() {
        let zeros;
        let g: Vec<S> = match p.grad() {
            Some(g) => g.to_vec(),
            None => {
                zeros = vec![S::zero(); p.len()];
                zeros
            }
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j].f64() / c1;
            let v_hat = v[j].f64() / c2;
            *w -= S::of(lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = S::of(max_norm / norm);
        for p in params.iter_mut() {
            if p.grad().is_some() {
                p.grad_mut().iter_mut().for_each(|g| *g *= factor);
            }
        }
    }
    norm
}
