//! Fire module: 1×1 squeeze, then parallel 1×1 and 3×3 expand convolutions
//! whose ReLU outputs are stacked along the channel axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::gradcheck::{fold_pattern, Differentiable};
use crate::nn::layers::*;
use crate::nn::{LayerParams, Tensor};
use crate::rng::Prng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FireConfig {
    pub s1x1: usize,
    pub e1x1: usize,
    pub e3x3: usize,
}

impl FireConfig {
    pub const fn new(s1x1: usize, e1x1: usize, e3x3: usize) -> Self {
        FireConfig { s1x1, e1x1, e3x3 }
    }

    /// All counts positive and the squeeze narrower than the expand output.
    pub fn validate(&self) -> Result<()> {
        if self.s1x1 == 0 || self.e1x1 == 0 || self.e3x3 == 0 {
            return Err(Error::InvalidArgument(format!("fire counts must be >= 1: {self:?}")));
        }
        if self.s1x1 >= self.e1x1 + self.e3x3 {
            return Err(Error::InvalidArgument(format!(
                "fire squeeze {} must be < e1x1 + e3x3 = {}",
                self.s1x1,
                self.e1x1 + self.e3x3
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.e1x1 + self.e3x3
    }

    /// Weight and bias shapes of (squeeze, expand1x1, expand3x3).
    pub fn param_shapes(&self, in_channels: usize) -> [([usize; 4], usize); 3] {
        [
            ([self.s1x1, in_channels, 1, 1], self.s1x1),
            ([self.e1x1, self.s1x1, 1, 1], self.e1x1),
            ([self.e3x3, self.s1x1, 3, 3], self.e3x3),
        ]
    }
}

/// Parameters of one fire module.
#[derive(Debug, Clone, PartialEq)]
pub struct FireParams<T> {
    pub squeeze: LayerParams<T>,
    pub expand1x1: LayerParams<T>,
    pub expand3x3: LayerParams<T>,
}

impl<T: Scalar> FireParams<T> {
    pub fn kaiming(cfg: &FireConfig, in_channels: usize, prng: &mut Prng) -> Self {
        let [s, e1, e3] = cfg.param_shapes(in_channels).map(|(shape, bias)| {
            let fan_in = shape[1] * shape[2] * shape[3];
            LayerParams::kaiming(&shape, bias, fan_in, prng)
        });
        FireParams {
            squeeze: s,
            expand1x1: e1,
            expand3x3: e3,
        }
    }
}

/// Activations recorded by [`fire_forward_trace`].
#[derive(Debug, Clone)]
pub struct FireTrace<T> {
    pub input: Tensor<T>,
    pub squeezed: Tensor<T>,
    pub expanded1: Tensor<T>,
    pub expanded3: Tensor<T>,
}

impl<T: Scalar> FireTrace<T> {
    pub fn pattern(&self) -> u64 {
        let mask = |t: &Tensor<T>| fold_pattern(5, t.data().iter().map(|&v| (v > T::zero()) as u64));
        fold_pattern(
            4,
            [&self.squeezed, &self.expanded1, &self.expanded3].into_iter().map(mask),
        )
    }
}

fn check_channels<T: Scalar>(x: &Tensor<T>, p: &FireParams<T>) -> Result<()> {
    let (_, c, _, _) = x.dims4()?;
    let expect = p.squeeze.weights.shape()[1];
    if c != expect {
        return Err(Error::Shape(format!(
            "fire module expects {expect} input channels, got {c}"
        )));
    }
    Ok(())
}

pub fn fire_forward_trace<T: Scalar>(x: &Tensor<T>, p: &FireParams<T>) -> Result<(Tensor<T>, FireTrace<T>)> {
    check_channels(x, p)?;
    let squeezed = relu(&conv2d(x, &p.squeeze, 1, 0)?);
    let expanded1 = relu(&conv2d(&squeezed, &p.expand1x1, 1, 0)?);
    let expanded3 = relu(&conv2d(&squeezed, &p.expand3x3, 1, 1)?);
    let out = concat_channels(&expanded1, &expanded3)?;
    Ok((
        out,
        FireTrace {
            input: x.clone(),
            squeezed,
            expanded1,
            expanded3,
        },
    ))
}

/// Output channels = e1x1 + e3x3; spatial size preserved.
pub fn fire_forward<T: Scalar>(x: &Tensor<T>, p: &FireParams<T>) -> Result<Tensor<T>> {
    fire_forward_trace(x, p).map(|(y, _)| y)
}

pub fn fire_backward<T: Scalar>(
    trace: &FireTrace<T>,
    p: &mut FireParams<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let e1 = trace.expanded1.shape()[1];
    let (g1, g3) = concat_backward(grad_out, e1)?;
    // ReLU outputs are positive exactly where their inputs were.
    let g1 = relu_backward(&trace.expanded1, &g1)?;
    let g3 = relu_backward(&trace.expanded3, &g3)?;
    let mut gs = conv2d_backward(&trace.squeezed, &mut p.expand1x1, 1, 0, &g1)?;
    let gs3 = conv2d_backward(&trace.squeezed, &mut p.expand3x3, 1, 1, &g3)?;
    gs.data_mut().iter_mut().zip(gs3.data()).for_each(|(a, &b)| *a += b);
    let gs = relu_backward(&trace.squeezed, &gs)?;
    conv2d_backward(&trace.input, &mut p.squeeze, 1, 0, &gs)
}

/// Fire module as a standalone differentiable fragment.
pub struct FireModule<T> {
    pub params: FireParams<T>,
    trace: Option<FireTrace<T>>,
}

impl<T: Scalar> FireModule<T> {
    pub fn new(params: FireParams<T>) -> Self {
        FireModule {
            params,
            trace: None,
        }
    }
}

impl<T: Scalar> Differentiable<T> for FireModule<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, tr) = fire_forward_trace(x, &self.params)?;
        self.trace = Some(tr);
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let tr = self
            .trace
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("backward called before forward".into()))?;
        fire_backward(tr, &mut self.params, g)
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        vec![
            &mut self.params.squeeze,
            &mut self.params.expand1x1,
            &mut self.params.expand3x3,
        ]
    }

    fn activation_pattern(&self) -> u64 {
        self.trace.as_ref().map_or(0, FireTrace::pattern)
    }
}
