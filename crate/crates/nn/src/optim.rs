//! Xavier initialization and the Adam optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{Conv, Model};
use crate::tensor::{Real, Tensor};

/// Fills `conv` with `Uniform(-a, a)` weights, `a = sqrt(6 / (fan_in + fan_out))`,
/// and zero bias.
pub fn xavier_init<T: Real, R: Rng>(conv: &mut Conv<T>, rng: &mut R) {
    let a = (6.0 / (conv.fan_in() + conv.fan_out()) as f64).sqrt();
    for v in conv.weight.value.data_mut() {
        *v = T::of(rng.random_range(-a..a));
    }
    conv.bias.value.data_mut().fill(T::zero());
}

/// Xavier-initializes every convolution in node order from one seeded stream.
pub fn init_model<T: Real>(model: &mut Model<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for conv in model.convs_mut() {
        xavier_init(conv, &mut rng);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient as `l2 * param`.
    pub l2: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, l2: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &Model<T>, config: AdamConfig) -> Self {
        let shapes: Vec<_> = model.params().iter().map(|p| p.value.shape()).collect();
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
        }
    }
}

/// One bias-corrected Adam update on `grad + l2 * param` using the gradients
/// stored in `model`.
pub fn adam_step<T: Real>(model: &mut Model<T>, state: &mut AdamState<T>) -> Result<()> {
    let mut params = model.params_mut();
    if params.len() != state.m.len() {
        return Err(NnError::Shape {
            layer: "adam".into(),
            message: format!(
                "optimizer tracks {} tensors, model has {}",
                state.m.len(),
                params.len()
            ),
        });
    }
    for (i, p) in params.iter().enumerate() {
        if p.value.shape() != state.m[i].shape() || p.grad.shape() != p.value.shape() {
            return Err(NnError::Shape {
                layer: "adam".into(),
                message: format!("parameter {i} has shape {:?}", p.value.shape()),
            });
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let step_size = T::of(c.lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(c.eps);
    let l2 = T::of(c.l2);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let (value, grad) = (p.value.data_mut(), p.grad.data());
        for j in 0..value.len() {
            let g = grad[j] + l2 * value[j];
            m[j] = b1 * m[j] + ob1 * g;
            v[j] = b2 * v[j] + ob2 * g * g;
            value[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model() -> Model<f64> {
        let mut m = Model::new(1);
        m.conv("c", 0, 1, 1, 1).unwrap();
        m
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = scalar_model();
        let mut st = AdamState::new(&m, AdamConfig::new(0.1, 0.0));
        for c in m.convs_mut() {
            c.weight.value.data_mut()[0] = 1.0;
            c.weight.grad.data_mut()[0] = 1.0;
        }
        adam_step(&mut m, &mut st).unwrap();
        let w = m.convs().next().unwrap().weight.value.data()[0];
        assert!((w - 0.9).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut m = scalar_model();
        init_model(&mut m, 3);
        let before = m.params()[0].value.clone();
        let mut st = AdamState::new(&m, AdamConfig::new(0.1, 0.0));
        adam_step(&mut m, &mut st).unwrap();
        assert_eq!(m.params()[0].value, before);
    }

    #[test]
    fn decay_shrinks_magnitude() {
        let mut m = scalar_model();
        m.convs_mut().next().unwrap().weight.value.data_mut()[0] = -0.5;
        let mut st = AdamState::new(&m, AdamConfig::new(0.01, 0.1));
        adam_step(&mut m, &mut st).unwrap();
        let w = m.params()[0].value.data()[0];
        assert!(w.abs() < 0.5);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut m = scalar_model();
        let mut st = AdamState::new(&Model::<f64>::new(1), AdamConfig::new(0.1, 0.0));
        assert!(adam_step(&mut m, &mut st).is_err());
    }

    #[test]
    fn xavier_bias_zero_and_deterministic() {
        let mut a = Model::<f32>::new(4);
        a.conv("c", 0, 5, 4, 8).unwrap();
        let mut b = a.clone();
        init_model(&mut a, 11);
        init_model(&mut b, 11);
        assert_eq!(a.params()[0].value, b.params()[0].value);
        assert!(a.params()[1].value.data().iter().all(|&v| v == 0.0));
    }
}
