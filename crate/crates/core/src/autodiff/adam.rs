use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument {
                op: "adam",
                detail: format!("{self:?}: need lr > 0, eps > 0, betas in [0, 1)"),
            })
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// A named trainable tensor with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub adam: AdamState,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let n = tensor.numel();
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            adam: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}

/// One bias-corrected Adam update over `params`, then clears their grads.
///
/// Fails without touching anything if any parameter has no gradient.
pub fn adam_step<'a, T, I>(params: I, config: &AdamConfig) -> Result<()>
where
    T: Scalar,
    I: IntoIterator<Item = &'a mut Parameter<T>>,
{
    config.validate()?;
    let params: Vec<&'a mut Parameter<T>> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(TensorError::MissingGradient(p.name.clone()));
    }
    for p in params {
        p.adam.step += 1;
        let t = p.adam.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let grad: Vec<f64> = p.tensor.grad().expect("checked above").iter().map(|g| g.to_f64()).collect();
        let state = &mut p.adam;
        for (i, theta) in p.tensor.values_mut().iter_mut().enumerate() {
            let g = grad[i];
            state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
            state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            let updated = theta.to_f64() - config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            *theta = T::from_f64(updated);
        }
        p.tensor.zero_grad();
    }
    Ok(())
}
