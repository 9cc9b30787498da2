use crate::error::{Result, TensorError};
use crate::params::ParameterSet;
use crate::real::Real;
use crate::tensor::Tensor;

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update with bias correction.
pub fn adamw_step<T: Real>(
    params: &mut ParameterSet<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    hp: &AdamW,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TensorError::Params(format!(
            "adamw: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.1.shape() != g.shape() || p.1.shape() != m.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                left: p.1.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let (ob1, ob2) = (T::of(1.0 - hp.beta1), T::of(1.0 - hp.beta2));
    let step_size = T::of(hp.lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(hp.eps);
    let decay = T::of(1.0 - hp.lr * hp.weight_decay);
    for (((p, g), m), v) in params
        .values_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + ob1 * gi;
            vd[i] = b2 * vd[i] + ob2 * gi * gi;
            let denom = vd[i].sqrt() * inv_sqrt_bc2 + eps;
            pd[i] = pd[i] * decay - step_size * md[i] / denom;
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| g.sum_sq().to_f64()).sum::<f64>().sqrt();
    if total > max_norm && total.is_finite() {
        let c = T::of(max_norm / total);
        for g in grads.iter_mut() {
            g.scale_inplace(c);
        }
    }
    total
}
