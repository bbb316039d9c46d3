//! SqueezeNet-style network with classification and regression heads.
//!
//! Layer order: conv1 → maxpool → fire2..fire4 → maxpool → fire5..fire8 →
//! maxpool → fire9 → 1×1 conv → global average pool → fully connected.
//! Every convolution except the final 1×1 is followed by a ReLU. Inputs are
//! multiplied by a fixed `input_scale` before conv1.

pub mod fire;
pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorResult, Method};
use crate::nn::gradcheck::{fold_pattern, Differentiable};
use crate::nn::layers::*;
use crate::nn::{LayerParams, Tensor};
use crate::rng::{derive_seed, Prng};
use crate::scalar::Scalar;
use crate::synth::{sample_patches, DifferenceImage};

pub use fire::{fire_backward, fire_forward, fire_forward_trace, FireConfig, FireModule, FireParams};
pub use io::{load_model, save_model, FORMAT_VERSION};

/// Number of σ classes of the classification head.
pub const DEFAULT_CLASSES: usize = 5;

/// Fire stage lengths, separated by max pooling.
pub const STAGE_LENGTHS: [usize; 3] = [3, 4, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Classification { classes: usize },
    Regression,
}

impl Head {
    pub fn outputs(&self) -> usize {
        match *self {
            Head::Classification { classes } => classes,
            Head::Regression => 1,
        }
    }

    pub fn is_regression(&self) -> bool {
        matches!(self, Head::Regression)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Widths scaled to about 1/8 (squeeze 1/4) for CPU training.
    Micro,
    /// Original SqueezeNet widths.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Preset::Micro),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::InvalidArgument(format!("unknown preset {s:?}"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Micro => "micro",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub patch_size: usize,
    /// Fixed factor applied to every input value.
    #[serde(default = "unit_scale")]
    pub input_scale: f64,
    /// Initial bias of the regression output.
    #[serde(default)]
    pub output_bias: f64,
    pub conv1: ConvSpec,
    pub pool: PoolSpec,
    pub fire_stages: Vec<Vec<FireConfig>>,
    pub final_conv_channels: usize,
    pub head: Head,
    pub preset: Preset,
}

fn unit_scale() -> f64 {
    1.0
}

/// Default input factor; 0–255 differences then enter at roughly unit size.
pub const DEFAULT_INPUT_SCALE: f64 = 1.0 / 32.0;

// Expand widths are 1/8 of the original; squeeze widths 1/4, since a
// two-channel squeeze dies easily under early Adam steps.
const MICRO_FIRES: [FireConfig; 8] = [
    FireConfig::new(4, 8, 8),
    FireConfig::new(4, 8, 8),
    FireConfig::new(8, 16, 16),
    FireConfig::new(8, 16, 16),
    FireConfig::new(12, 24, 24),
    FireConfig::new(12, 24, 24),
    FireConfig::new(16, 32, 32),
    FireConfig::new(16, 32, 32),
];

const PAPER_FIRES: [FireConfig; 8] = [
    FireConfig::new(16, 64, 64),
    FireConfig::new(16, 64, 64),
    FireConfig::new(32, 128, 128),
    FireConfig::new(32, 128, 128),
    FireConfig::new(48, 192, 192),
    FireConfig::new(48, 192, 192),
    FireConfig::new(64, 256, 256),
    FireConfig::new(64, 256, 256),
];

fn staged(fires: &[FireConfig; 8]) -> Vec<Vec<FireConfig>> {
    vec![fires[0..3].to_vec(), fires[3..7].to_vec(), fires[7..8].to_vec()]
}

impl NetworkConfig {
    pub fn preset(preset: Preset, input_channels: usize, patch_size: usize, head: Head) -> Self {
        match preset {
            Preset::Micro => NetworkConfig {
                input_channels,
                patch_size,
                input_scale: DEFAULT_INPUT_SCALE,
                output_bias: 0.0,
                conv1: ConvSpec {
                    filters: 16,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
                pool: PoolSpec { kernel: 2, stride: 2 },
                fire_stages: staged(&MICRO_FIRES),
                final_conv_channels: 8,
                head,
                preset,
            },
            Preset::Paper => NetworkConfig {
                input_channels,
                patch_size,
                input_scale: DEFAULT_INPUT_SCALE,
                output_bias: 0.0,
                conv1: ConvSpec {
                    filters: 96,
                    kernel: 7,
                    stride: 2,
                    pad: 0,
                },
                pool: PoolSpec { kernel: 3, stride: 2 },
                fire_stages: staged(&PAPER_FIRES),
                final_conv_channels: 512,
                head,
                preset,
            },
        }
    }

    pub fn micro(input_channels: usize, patch_size: usize, head: Head) -> Self {
        Self::preset(Preset::Micro, input_channels, patch_size, head)
    }

    pub fn fires(&self) -> impl Iterator<Item = &FireConfig> {
        self.fire_stages.iter().flatten()
    }

    /// Spatial size after each pooling stage, or an error if a stage
    /// no longer fits.
    pub fn spatial_sizes(&self) -> Result<Vec<usize>> {
        let c = &self.conv1;
        if c.stride == 0 || self.patch_size + 2 * c.pad < c.kernel {
            return Err(Error::InvalidArgument(format!(
                "patch {} too small for conv1 {}x{}",
                self.patch_size, c.kernel, c.kernel
            )));
        }
        let mut s = (self.patch_size + 2 * c.pad - c.kernel) / c.stride + 1;
        let mut sizes = vec![s];
        for _ in 0..3 {
            if s < self.pool.kernel || self.pool.stride == 0 {
                return Err(Error::InvalidArgument(format!(
                    "patch {} shrinks to {s} before a {}-wide pool",
                    self.patch_size, self.pool.kernel
                )));
            }
            s = (s - self.pool.kernel) / self.pool.stride + 1;
            sizes.push(s);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "input channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        let lengths: Vec<usize> = self.fire_stages.iter().map(Vec::len).collect();
        if lengths != STAGE_LENGTHS {
            return Err(Error::InvalidArgument(format!(
                "fire stages must have lengths {STAGE_LENGTHS:?}, got {lengths:?}"
            )));
        }
        for f in self.fires() {
            f.validate()?;
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) || !self.output_bias.is_finite() {
            return Err(Error::InvalidArgument("input_scale must be positive and output_bias finite".into()));
        }
        if self.conv1.filters == 0 || self.final_conv_channels == 0 || self.head.outputs() == 0 {
            return Err(Error::InvalidArgument("layer widths must be >= 1".into()));
        }
        self.spatial_sizes()?;
        Ok(())
    }

    /// Weight and bias shapes of every layer in table order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let c1 = &self.conv1;
        let mut out = vec![(
            "conv1".to_string(),
            vec![c1.filters, self.input_channels, c1.kernel, c1.kernel],
            c1.filters,
        )];
        let mut ch = c1.filters;
        for (i, f) in self.fires().enumerate() {
            let names = ["squeeze1x1", "expand1x1", "expand3x3"];
            for (name, (shape, bias)) in names.iter().zip(f.param_shapes(ch)) {
                out.push((format!("fire{}.{name}", i + 2), shape.to_vec(), bias));
            }
            ch = f.out_channels();
        }
        out.push((
            "conv10".to_string(),
            vec![self.final_conv_channels, ch, 1, 1],
            self.final_conv_channels,
        ));
        let o = self.head.outputs();
        out.push(("fc".to_string(), vec![self.final_conv_channels, o], o));
        out
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
enum StepTrace<T> {
    /// Convolution followed by ReLU: its input and rectified output.
    Conv { input: Tensor<T>, output: Tensor<T> },
    /// The final 1×1 convolution, which has no ReLU.
    FinalConv { input: Tensor<T> },
    Pool { input_shape: Vec<usize>, argmax: Vec<u32> },
    Fire(Box<fire::FireTrace<T>>),
    Gap { input_shape: Vec<usize> },
    Fc { input: Tensor<T> },
}

/// Record of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    steps: Vec<StepTrace<T>>,
}

impl<T: Scalar> Trace<T> {
    /// Hash of every ReLU mask and pooling argmax in the pass.
    pub fn pattern(&self) -> u64 {
        fold_pattern(
            6,
            self.steps.iter().map(|s| match s {
                StepTrace::Conv { output, .. } => {
                    fold_pattern(7, output.data().iter().map(|&v| (v > T::zero()) as u64))
                }
                StepTrace::Pool { argmax, .. } => fold_pattern(8, argmax.iter().map(|&a| a as u64)),
                StepTrace::Fire(t) => t.pattern(),
                _ => 0,
            }),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: NetworkConfig,
    pub conv1: LayerParams<T>,
    pub fires: Vec<FireParams<T>>,
    pub conv10: LayerParams<T>,
    pub fc: LayerParams<T>,
    pub format_version: u32,
}

/// Assemble a network with Kaiming-normal weights drawn from `seed`.
/// Biases start at zero, except a regression output at `output_bias`.
pub fn build_network<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut prng = Prng::new(seed);
    let layout = cfg.param_layout();
    let mut layers = layout.iter().map(|(_, shape, bias)| {
        let fan_in: usize = if shape.len() == 4 {
            shape[1..].iter().product()
        } else {
            shape[0]
        };
        LayerParams::kaiming(shape, *bias, fan_in, &mut prng)
    });
    let conv1 = layers.next().unwrap();
    let fires = (0..8)
        .map(|_| FireParams {
            squeeze: layers.next().unwrap(),
            expand1x1: layers.next().unwrap(),
            expand3x3: layers.next().unwrap(),
        })
        .collect();
    let conv10 = layers.next().unwrap();
    let mut fc = layers.next().unwrap();
    if cfg.head.is_regression() {
        fc.bias.data_mut()[0] = T::from_f64_lossy(cfg.output_bias);
    }
    Ok(Model {
        config: cfg.clone(),
        conv1,
        fires,
        conv10,
        fc,
        format_version: FORMAT_VERSION,
    })
}

impl<T: Scalar> Model<T> {
    /// Ordered `(name, params)` table.
    pub fn named_params(&self) -> Vec<(String, &LayerParams<T>)> {
        let names = self.config.param_layout().into_iter().map(|(n, _, _)| n);
        names.zip(self.params()).collect()
    }

    pub fn params(&self) -> Vec<&LayerParams<T>> {
        let mut v = vec![&self.conv1];
        for f in &self.fires {
            v.extend([&f.squeeze, &f.expand1x1, &f.expand3x3]);
        }
        v.extend([&self.conv10, &self.fc]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        let mut v = vec![&mut self.conv1];
        for f in &mut self.fires {
            v.extend([&mut f.squeeze, &mut f.expand1x1, &mut f.expand3x3]);
        }
        v.extend([&mut self.conv10, &mut self.fc]);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(LayerParams::zero_grad);
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = batch.dims4()?;
        let cfg = &self.config;
        if c != cfg.input_channels || h != cfg.patch_size || w != cfg.patch_size {
            return Err(Error::Shape(format!(
                "model expects N×{}×{p}×{p}, got {:?}",
                cfg.input_channels,
                batch.shape(),
                p = cfg.patch_size
            )));
        }
        Ok(())
    }

    /// Forward pass recording the activations needed by [`Self::backward`].
    pub fn forward_trace(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(batch)?;
        let cfg = &self.config;
        let mut steps = Vec::with_capacity(16);
        let conv = |x: Tensor<T>, p: &LayerParams<T>, s: usize, pad: usize, steps: &mut Vec<StepTrace<T>>| {
            let y = relu(&conv2d(&x, p, s, pad)?);
            steps.push(StepTrace::Conv {
                input: x,
                output: y.clone(),
            });
            Ok::<_, Error>(y)
        };
        let pool = |x: Tensor<T>, steps: &mut Vec<StepTrace<T>>| {
            let (y, argmax) = maxpool(&x, cfg.pool.kernel, cfg.pool.stride)?;
            steps.push(StepTrace::Pool {
                input_shape: x.shape().to_vec(),
                argmax,
            });
            Ok::<_, Error>(y)
        };

        let input = if cfg.input_scale == 1.0 {
            batch.clone()
        } else {
            batch.scale(T::from_f64_lossy(cfg.input_scale))
        };
        let mut x = conv(input, &self.conv1, cfg.conv1.stride, cfg.conv1.pad, &mut steps)?;
        let mut fire_idx = 0;
        for stage in &cfg.fire_stages {
            x = pool(x, &mut steps)?;
            for _ in stage {
                let (y, tr) = fire_forward_trace(&x, &self.fires[fire_idx])?;
                steps.push(StepTrace::Fire(Box::new(tr)));
                x = y;
                fire_idx += 1;
            }
        }
        let y = conv2d(&x, &self.conv10, 1, 0)?;
        steps.push(StepTrace::FinalConv { input: x });
        x = y;
        steps.push(StepTrace::Gap {
            input_shape: x.shape().to_vec(),
        });
        let pooled = global_avg_pool(&x)?;
        let out = fully_connected(&pooled, &self.fc)?;
        steps.push(StepTrace::Fc { input: pooled });
        Ok((out, Trace { steps }))
    }

    /// Predictions: logits for classification, σ̂ for regression.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_trace(batch).map(|(y, _)| y)
    }

    /// Backpropagate `grad_out`, accumulating every parameter gradient.
    pub fn backward(&mut self, trace: &Trace<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (s1, p1) = (self.config.conv1.stride, self.config.conv1.pad);
        let mut g = grad_out.clone();
        let mut fire_idx = self.fires.len();
        for step in trace.steps.iter().rev() {
            g = match step {
                StepTrace::Fc { input } => fully_connected_backward(input, &mut self.fc, &g)?,
                StepTrace::Gap { input_shape } => global_avg_pool_backward(input_shape, &g)?,
                StepTrace::FinalConv { input } => conv2d_backward(input, &mut self.conv10, 1, 0, &g)?,
                StepTrace::Conv { input, output } => {
                    conv2d_backward(input, &mut self.conv1, s1, p1, &relu_backward(output, &g)?)?
                }
                StepTrace::Pool { input_shape, argmax } => maxpool_backward(input_shape, argmax, &g)?,
                StepTrace::Fire(tr) => {
                    fire_idx -= 1;
                    fire_backward(tr, &mut self.fires[fire_idx], &g)?
                }
            };
        }
        if self.config.input_scale != 1.0 {
            g = g.scale(T::from_f64_lossy(self.config.input_scale));
        }
        Ok(g)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            conv1: self.conv1.cast(),
            fires: self
                .fires
                .iter()
                .map(|f| FireParams {
                    squeeze: f.squeeze.cast(),
                    expand1x1: f.expand1x1.cast(),
                    expand3x3: f.expand3x3.cast(),
                })
                .collect(),
            conv10: self.conv10.cast(),
            fc: self.fc.cast(),
            format_version: self.format_version,
        }
    }
}

/// Free-function form of [`Model::forward`].
pub fn forward<T: Scalar>(model: &Model<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    model.forward(batch)
}

/// Patches per forward call in [`predict_sigma`].
const PREDICT_CHUNK: usize = 64;

fn mean_prediction<T: Scalar>(model: &Model<T>, patches: &Tensor<T>) -> Result<f64> {
    let n = patches.shape()[0];
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + PREDICT_CHUNK).min(n);
        let y = model.forward(&patches.batch_slice(start, end))?;
        total += y.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        start = end;
    }
    Ok(total / n as f64)
}

/// Average the regression output over `n_patches` random patches.
///
/// A 1-channel model on a 3-channel difference estimates each channel on
/// its own and averages the three; a 3-channel model sees RGB patches.
pub fn predict_sigma<T: Scalar>(
    model: &Model<T>,
    diff: &DifferenceImage<T>,
    n_patches: usize,
    seed: u64,
) -> Result<EstimatorResult> {
    if !model.config.head.is_regression() {
        return Err(Error::HeadMismatch("sigma prediction needs a regression head".into()));
    }
    if n_patches == 0 {
        return Err(Error::InvalidArgument("n_patches must be >= 1".into()));
    }
    let p = model.config.patch_size;
    let per_channel = match (model.config.input_channels, diff.channels) {
        (m, d) if m == d => {
            let batch = sample_patches(diff, p, n_patches, seed)?;
            vec![mean_prediction(model, &batch.patches)?]
        }
        (1, d) => (0..d)
            .map(|c| {
                let batch = sample_patches(&diff.channel(c), p, n_patches, derive_seed(seed, c as u64))?;
                mean_prediction(model, &batch.patches)
            })
            .collect::<Result<Vec<_>>>()?,
        (m, d) => {
            return Err(Error::Shape(format!(
                "{m}-channel model cannot consume a {d}-channel difference"
            )))
        }
    };
    Ok(EstimatorResult::from_channels(Method::Cnn, per_channel))
}

/// A model together with the trace of its last forward pass, usable
/// wherever a [`Differentiable`] fragment is expected.
pub struct ModelFragment<T> {
    pub model: Model<T>,
    trace: Option<Trace<T>>,
}

impl<T: Scalar> ModelFragment<T> {
    pub fn new(model: Model<T>) -> Self {
        ModelFragment { model, trace: None }
    }
}

impl<T: Scalar> Differentiable<T> for ModelFragment<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, tr) = self.model.forward_trace(x)?;
        self.trace = Some(tr);
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let tr = self
            .trace
            .take()
            .ok_or_else(|| Error::InvalidArgument("backward called before forward".into()))?;
        let out = self.model.backward(&tr, g);
        self.trace = Some(tr);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        self.model.params_mut()
    }

    fn activation_pattern(&self) -> u64 {
        self.trace.as_ref().map_or(0, Trace::pattern)
    }
}
