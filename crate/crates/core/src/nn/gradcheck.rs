//! Finite-difference verification of the backward passes.
//!
//! A fragment is anything implementing [`Differentiable`]. The check
//! contracts the fragment output with a fixed random tensor `r` to get a
//! scalar `L = Σ r·y`, then compares backprop against central differences
//! for the input and every parameter tensor. Coordinates whose ±h
//! perturbation flips a ReLU mask or a pooling argmax are skipped, since
//! the function is not differentiable across that kink.

use serde::Serialize;

use super::layers::*;
use super::params::LayerParams;
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::{derive_seed, Prng};
use crate::scalar::Scalar;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// A piece of network with a recorded forward pass and a backward pass.
pub trait Differentiable<T: Scalar> {
    /// Forward pass that records whatever `backward` needs.
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// Input gradient; parameter gradients accumulate into their buffers.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        Vec::new()
    }
    /// Hash of the piecewise-linear region of the last forward pass.
    fn activation_pattern(&self) -> u64 {
        0
    }
}

pub(crate) fn fold_pattern(seed: u64, bits: impl Iterator<Item = u64>) -> u64 {
    let mut h = seed ^ 0xcbf2_9ce4_8422_2325;
    for b in bits {
        h ^= b;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn missing_forward() -> crate::error::Error {
    crate::error::Error::InvalidArgument("backward called before forward".into())
}

pub struct Conv2dLayer<T> {
    pub params: LayerParams<T>,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(params: LayerParams<T>, stride: usize, pad: usize) -> Self {
        Conv2dLayer {
            params,
            stride,
            pad,
            input: None,
        }
    }
}

impl<T: Scalar> Differentiable<T> for Conv2dLayer<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.params, self.stride, self.pad)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(missing_forward)?;
        conv2d_backward(x, &mut self.params, self.stride, self.pad, g)
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        vec![&mut self.params]
    }
}

pub struct LinearLayer<T> {
    pub params: LayerParams<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(params: LayerParams<T>) -> Self {
        LinearLayer {
            params,
            input: None,
        }
    }
}

impl<T: Scalar> Differentiable<T> for LinearLayer<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = fully_connected(x, &self.params)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(missing_forward)?;
        fully_connected_backward(x, &mut self.params, g)
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        vec![&mut self.params]
    }
}

#[derive(Default)]
pub struct ReluLayer<T> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ReluLayer<T> {
    pub fn new() -> Self {
        ReluLayer { input: None }
    }
}

impl<T: Scalar> Differentiable<T> for ReluLayer<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input = Some(x.clone());
        Ok(relu(x))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        relu_backward(self.input.as_ref().ok_or_else(missing_forward)?, g)
    }

    fn activation_pattern(&self) -> u64 {
        match &self.input {
            Some(x) => fold_pattern(1, x.data().iter().map(|&v| (v > T::zero()) as u64)),
            None => 0,
        }
    }
}

pub struct MaxPoolLayer {
    pub k: usize,
    pub stride: usize,
    input_shape: Vec<usize>,
    argmax: Vec<u32>,
}

impl MaxPoolLayer {
    pub fn new(k: usize, stride: usize) -> Self {
        MaxPoolLayer {
            k,
            stride,
            input_shape: Vec::new(),
            argmax: Vec::new(),
        }
    }
}

impl<T: Scalar> Differentiable<T> for MaxPoolLayer {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, arg) = maxpool(x, self.k, self.stride)?;
        self.input_shape = x.shape().to_vec();
        self.argmax = arg;
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        maxpool_backward(&self.input_shape, &self.argmax, g)
    }

    fn activation_pattern(&self) -> u64 {
        fold_pattern(2, self.argmax.iter().map(|&a| a as u64))
    }
}

#[derive(Default)]
pub struct GlobalAvgPoolLayer {
    input_shape: Vec<usize>,
}

impl GlobalAvgPoolLayer {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Differentiable<T> for GlobalAvgPoolLayer {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input_shape = x.shape().to_vec();
        global_avg_pool(x)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        global_avg_pool_backward(&self.input_shape, g)
    }
}

/// Sequential composition of fragments.
pub struct Chain<T> {
    pub layers: Vec<Box<dyn Differentiable<T>>>,
}

impl<T: Scalar> Chain<T> {
    pub fn new(layers: Vec<Box<dyn Differentiable<T>>>) -> Self {
        Chain { layers }
    }
}

impl<T: Scalar> Differentiable<T> for Chain<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = g.clone();
        for l in self.layers.iter_mut().rev() {
            cur = l.backward(&cur)?;
        }
        Ok(cur)
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn activation_pattern(&self) -> u64 {
        fold_pattern(3, self.layers.iter().map(|l| l.activation_pattern()))
    }
}

/// Comparison for one gradient tensor.
#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_abs_error: f64,
    pub scale: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }
}

fn dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum()
}

fn compare(name: String, pairs: &[(f64, f64)], skipped: usize, tolerance: f64) -> TensorCheck {
    let mut max_abs_error = 0.0f64;
    let mut scale = 1e-8f64;
    for &(a, n) in pairs {
        max_abs_error = max_abs_error.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    let rel_error = max_abs_error / scale;
    TensorCheck {
        name,
        checked: pairs.len(),
        skipped,
        max_abs_error,
        scale,
        rel_error,
        passed: rel_error <= tolerance,
    }
}

/// Probe `L` at `value ± h` through `set` (`Some(offset)` perturbs,
/// `None` restores), returning `None` when either side leaves the
/// reference activation region.
fn central_difference<T, F>(
    frag: &mut dyn Differentiable<T>,
    x: &Tensor<T>,
    r: &Tensor<T>,
    pattern: u64,
    mut set: F,
) -> Result<Option<f64>>
where
    T: Scalar,
    F: FnMut(&mut dyn Differentiable<T>, &mut Tensor<T>, Option<f64>),
{
    let mut probe = |sign: f64, frag: &mut dyn Differentiable<T>| -> Result<Option<f64>> {
        let mut xi = x.clone();
        set(frag, &mut xi, Some(sign * FD_STEP));
        let y = frag.forward(&xi);
        set(frag, &mut xi, None);
        let y = y?;
        let same_region = frag.activation_pattern() == pattern;
        Ok(same_region.then(|| dot(&y, r)))
    };
    let plus = probe(1.0, frag)?;
    let minus = probe(-1.0, frag)?;
    Ok(match (plus, minus) {
        (Some(p), Some(m)) => Some((p - m) / (2.0 * FD_STEP)),
        _ => None,
    })
}

/// Compare backprop against central differences with step [`FD_STEP`].
///
/// Per tensor the error is `max|a - n| / max(max|a|, max|n|, 1e-8)` over
/// all checked coordinates; the report passes when every tensor is within
/// `tolerance`. Intended for `f64` fragments.
pub fn gradient_check<T: Scalar>(
    frag: &mut dyn Differentiable<T>,
    input: &Tensor<T>,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    gradient_check_sampled(frag, input, tolerance, seed, usize::MAX)
}

/// Indices to check: all of them, or `max` drawn without replacement.
fn coordinates(len: usize, max: usize, prng: &mut Prng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if len > max {
        prng.shuffle(&mut idx);
        idx.truncate(max);
        idx.sort_unstable();
    }
    idx
}

/// [`gradient_check`] on at most `max_per_tensor` random coordinates of
/// the input and of every parameter tensor.
pub fn gradient_check_sampled<T: Scalar>(
    frag: &mut dyn Differentiable<T>,
    input: &Tensor<T>,
    tolerance: f64,
    seed: u64,
    max_per_tensor: usize,
) -> Result<GradCheckReport> {
    let mut prng = Prng::new(seed);
    let mut picker = Prng::new(derive_seed(seed, 1));
    let y = frag.forward(input)?;
    let r = Tensor::from_fn(y.shape(), |_| T::from_f64_lossy(prng.gaussian()));
    let pattern = frag.activation_pattern();
    for p in frag.params_mut() {
        p.zero_grad();
    }
    let dx = frag.backward(&r)?;
    let analytic_params: Vec<(Vec<T>, Vec<T>)> = frag
        .params_mut()
        .into_iter()
        .map(|p| {
            (
                p.weights.grad_mut().to_vec(),
                p.bias.grad_mut().to_vec(),
            )
        })
        .collect();

    let mut checks = Vec::new();

    let mut pairs = Vec::new();
    let mut skipped = 0;
    for i in coordinates(input.len(), max_per_tensor, &mut picker) {
        let n = central_difference(frag, input, &r, pattern, |_, xi, d| {
            if let Some(d) = d {
                xi.data_mut()[i] += T::from_f64_lossy(d);
            }
        })?;
        match n {
            Some(n) => pairs.push((dx.data()[i].to_f64_lossy(), n)),
            None => skipped += 1,
        }
    }
    // Restore the recorded state of the unperturbed input.
    frag.forward(input)?;
    checks.push(compare("input".into(), &pairs, skipped, tolerance));

    for (pi, (gw, gb)) in analytic_params.iter().enumerate() {
        for (part, grads) in [("weights", gw), ("bias", gb)] {
            let mut pairs = Vec::new();
            let mut skipped = 0;
            for i in coordinates(grads.len(), max_per_tensor, &mut picker) {
                let a = grads[i];
                let mut original = None;
                let n = central_difference(frag, input, &r, pattern, |f, _, d| {
                    let mut params = f.params_mut();
                    let p = &mut params[pi];
                    let buf = if part == "weights" {
                        p.weights.data_mut()
                    } else {
                        p.bias.data_mut()
                    };
                    let orig = *original.get_or_insert(buf[i]);
                    buf[i] = match d {
                        Some(d) => orig + T::from_f64_lossy(d),
                        None => orig,
                    };
                })?;
                match n {
                    Some(n) => pairs.push((a.to_f64_lossy(), n)),
                    None => skipped += 1,
                }
            }
            if !grads.is_empty() {
                checks.push(compare(format!("param{pi}.{part}"), &pairs, skipped, tolerance));
            }
        }
    }
    frag.forward(input)?;
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        tolerance,
        checks,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Linear layer whose backward is scaled by two.
    struct Corrupted(LinearLayer<f64>);

    impl Differentiable<f64> for Corrupted {
        fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
            self.0.forward(x)
        }
        fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(self.0.backward(g)?.scale(2.0))
        }
        fn params_mut(&mut self) -> Vec<&mut LayerParams<f64>> {
            self.0.params_mut()
        }
    }

    fn linear(seed: u64) -> LinearLayer<f64> {
        let mut prng = Prng::new(seed);
        let mut p = LayerParams::kaiming(&[6, 4], 4, 6, &mut prng);
        p.bias = Tensor::from_fn(&[4], |i| 0.1 * i as f64);
        LinearLayer::new(p)
    }

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut prng = Prng::new(seed);
        Tensor::from_fn(shape, |_| prng.gaussian())
    }

    #[test]
    fn linear_layer_passes_tight_tolerance() {
        let rep = gradient_check(&mut linear(1), &input(&[3, 6], 2), 1e-6, 3).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn corrupted_backward_fails() {
        let rep = gradient_check(&mut Corrupted(linear(1)), &input(&[3, 6], 2), 1e-4, 3).unwrap();
        assert!(!rep.passed);
        assert!(rep.checks[0].rel_error > 0.4);
    }

    #[test]
    fn relu_check_skips_only_kinks() {
        let x = input(&[2, 3, 4, 4], 5);
        let rep = gradient_check(&mut ReluLayer::new(), &x, 1e-4, 6).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.checks[0].checked + rep.checks[0].skipped, x.len());
        assert!(x.data().iter().all(|v| v.abs() > 1e-6) || rep.checks[0].skipped > 0);
    }
}
