use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::scalar::Scalar;

/// First and second Adam moments, shaped like the weights and the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    fn zeros(w: usize, b: usize) -> Self {
        Moments {
            weights: vec![T::zero(); w],
            bias: vec![T::zero(); b],
        }
    }
}

/// Trainable weights and bias of one layer with their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub adam_m: Moments<T>,
    pub adam_v: Moments<T>,
    pub step_count: u64,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Self {
        let (w, b) = (weights.len(), bias.len());
        LayerParams {
            weights,
            bias,
            adam_m: Moments::zeros(w, b),
            adam_v: Moments::zeros(w, b),
            step_count: 0,
        }
    }

    /// Kaiming-normal weights (std = √(2 / fan_in)) and zero bias.
    /// `fan_in` is the product of every weight dimension except the output
    /// one (`weight_shape[0]` for convolutions, `weight_shape[1]` for
    /// fully-connected `F×O` weights).
    pub fn kaiming(weight_shape: &[usize], bias_len: usize, fan_in: usize, prng: &mut Prng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn(weight_shape, |_| T::from_f64_lossy(std * prng.gaussian()));
        Self::new(w, Tensor::zeros(&[bias_len]))
    }

    pub fn zero_grad(&mut self) {
        self.weights.zero_grad();
        self.bias.zero_grad();
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        LayerParams {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            adam_m: Moments {
                weights: c(&self.adam_m.weights),
                bias: c(&self.adam_m.bias),
            },
            adam_v: Moments {
                weights: c(&self.adam_v.weights),
                bias: c(&self.adam_v.bias),
            },
            step_count: self.step_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the weight gradient (biases are exempt).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn adam_update<T: Scalar>(
    values: &mut [T],
    grads: Option<&[T]>,
    m: &mut [T],
    v: &mut [T],
    decay: T,
    k: &AdamCoeffs<T>,
) {
    let zeros;
    let grads = match grads {
        Some(g) => g,
        None => {
            zeros = vec![T::zero(); values.len()];
            &zeros
        }
    };
    for (((w, &g), m), v) in values.iter_mut().zip(grads).zip(m).zip(v) {
        let g = g + decay * *w;
        *m = k.beta1 * *m + (T::one() - k.beta1) * g;
        *v = k.beta2 * *v + (T::one() - k.beta2) * g * g;
        let m_hat = *m / k.bias1;
        let v_hat = *v / k.bias2;
        *w -= k.lr * m_hat / (v_hat.sqrt() + k.eps);
    }
}

struct AdamCoeffs<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    bias1: T,
    bias2: T,
}

/// One Adam step with bias correction over the accumulated gradients.
///
/// Moments and the bias-correction factors are computed in the parameter
/// precision; the step counter advances exactly once per call.
pub fn adam_step<T: Scalar>(params: &mut LayerParams<T>, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    params.step_count += 1;
    let t = params.step_count as i32;
    let k = AdamCoeffs {
        lr: T::from_f64_lossy(cfg.lr),
        beta1: T::from_f64_lossy(cfg.beta1),
        beta2: T::from_f64_lossy(cfg.beta2),
        eps: T::from_f64_lossy(cfg.eps),
        bias1: T::from_f64_lossy(1.0 - cfg.beta1.powi(t)),
        bias2: T::from_f64_lossy(1.0 - cfg.beta2.powi(t)),
    };
    let decay = T::from_f64_lossy(cfg.weight_decay);
    let LayerParams {
        weights,
        bias,
        adam_m,
        adam_v,
        ..
    } = params;
    let wg = weights.grad().map(<[T]>::to_vec);
    adam_update(
        weights.data_mut(),
        wg.as_deref(),
        &mut adam_m.weights,
        &mut adam_v.weights,
        decay,
        &k,
    );
    let bg = bias.grad().map(<[T]>::to_vec);
    adam_update(
        bias.data_mut(),
        bg.as_deref(),
        &mut adam_m.bias,
        &mut adam_v.bias,
        T::zero(),
        &k,
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64) -> LayerParams<f64> {
        LayerParams::new(
            Tensor::new(&[1], vec![w]).unwrap(),
            Tensor::new(&[1], vec![0.0]).unwrap(),
        )
    }

    fn no_decay() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(1.5);
        p.weights.grad_mut();
        adam_step(&mut p, &no_decay()).unwrap();
        assert_eq!(p.weights.data(), &[1.5]);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(0.0);
        p.weights.grad_mut()[0] = 0.5;
        adam_step(&mut p, &no_decay()).unwrap();
        assert!((p.weights.data()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn two_steps_match_scalar_trace() {
        // Independent scalar Adam, written out longhand.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.01f64);
        let mut w = 0.3f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, 0.5f64), (2, 0.25f64)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = scalar_param(0.3);
        for g in [0.5, 0.25] {
            p.zero_grad();
            p.weights.grad_mut()[0] = g;
            adam_step(&mut p, &no_decay()).unwrap();
        }
        assert!((p.weights.data()[0] - w).abs() < 1e-15, "{} vs {w}", p.weights.data()[0]);
        assert_eq!(p.step_count, 2);
    }

    #[test]
    fn decay_shrinks_weights_without_data_gradient() {
        let mut p = scalar_param(2.0);
        let mut prev = 2.0;
        for _ in 0..20 {
            p.zero_grad();
            p.weights.grad_mut();
            adam_step(&mut p, &AdamConfig::default()).unwrap();
            let now = p.weights.data()[0];
            assert!(now.abs() < prev);
            prev = now.abs();
        }
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let mut p = scalar_param(0.0);
        let bad_lr = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(adam_step(&mut p, &bad_lr).is_err());
        let bad_eps = AdamConfig {
            eps: 0.0,
            ..AdamConfig::default()
        };
        assert!(adam_step(&mut p, &bad_eps).is_err());
        assert_eq!(p.step_count, 0);
    }
}
