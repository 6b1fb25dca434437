use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for one group of parameters, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    /// Completed update steps.
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect::<Vec<_>>();
        Ok(AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.m.len()
    }
}

/// One bias-corrected ADAM update over `params`, then zeroes their gradients.
///
/// Fails without touching anything if a parameter has no gradient or its
/// size disagrees with the state.
pub fn adam_step<T: Scalar>(params: &mut [&mut Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        }
        if p.len() != state.m[i].len() {
            return Err(Error::Contract(format!(
                "parameter {i} has {} values, optimizer state {}",
                p.len(),
                state.m[i].len()
            )));
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let b1 = T::lit(c.beta1);
    let b2 = T::lit(c.beta2);
    let one = T::one();
    let corr1 = T::lit(1.0 - c.beta1.powf(t));
    let corr2 = T::lit(1.0 - c.beta2.powf(t));
    let lr = T::lit(c.learning_rate);
    let eps = T::lit(c.epsilon);

    for (i, p) in params.iter_mut().enumerate() {
        let Tensor { data, grad, .. } = &mut **p;
        let grad = grad.as_mut().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, g), mi), vi) in data.iter_mut().zip(grad.iter_mut()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = std::mem::take(g);
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let mhat = *mi / corr1;
            let vhat = *vi / corr2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
