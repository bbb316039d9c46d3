//! Gradient verification suite: every layer kernel, a fire module, a
//! two-fire micro chain and the full micro network, in double precision.
//! The full-network cases check a random subset of coordinates per tensor.

use serde::Serialize;

use crate::error::Result;
use crate::model::fire::{FireConfig, FireModule, FireParams};
use crate::model::{build_network, Head, ModelFragment, NetworkConfig};
use crate::nn::gradcheck::*;
use crate::nn::{LayerParams, Tensor};
use crate::rng::{derive_seed, Prng};

pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Coordinates checked per tensor in the full-network cases; every other
/// case checks all of them.
pub const NETWORK_COORDS_PER_TENSOR: usize = 40;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    /// Passed, and at least one coordinate of every tensor was compared.
    pub fn ok(&self) -> bool {
        self.report.passed && self.report.checks.iter().all(|c| c.checked > 0)
    }
}

/// Name, fragment, input shape and coordinates checked per tensor.
type Case = (String, Box<dyn Differentiable<f64>>, Vec<usize>, usize);

fn gaussian_tensor(shape: &[usize], prng: &mut Prng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| prng.gaussian())
}

// Zero biases leave whole channels exactly on a ReLU kink, where every
// coordinate would be skipped.
fn jitter_biases<'a>(params: impl IntoIterator<Item = &'a mut LayerParams<f64>>, prng: &mut Prng) {
    for p in params {
        p.bias.data_mut().iter_mut().for_each(|b| *b = 0.1 * prng.gaussian());
    }
}

fn conv(k: usize, c: usize, kh: usize, prng: &mut Prng) -> LayerParams<f64> {
    let mut p = LayerParams::kaiming(&[k, c, kh, kh], k, c * kh * kh, prng);
    jitter_biases([&mut p], prng);
    p
}

fn fire(cfg: FireConfig, in_ch: usize, prng: &mut Prng) -> FireParams<f64> {
    let mut p = FireParams::kaiming(&cfg, in_ch, prng);
    jitter_biases([&mut p.squeeze, &mut p.expand1x1, &mut p.expand3x3], prng);
    p
}

/// Run every check; the caller decides what to do with failures.
pub fn gradient_suite(tolerance: f64, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut prng = Prng::new(seed);
    let mut cases: Vec<Case> = Vec::new();
    for &(k, c, kh, stride, pad, hw) in &[
        (3, 2, 3, 1, 1, 6),
        (2, 3, 3, 2, 0, 7),
        (4, 1, 1, 1, 0, 5),
        (2, 2, 7, 2, 0, 11),
    ] {
        cases.push((
            format!("conv{kh}x{kh} stride {stride} pad {pad}"),
            Box::new(Conv2dLayer::new(conv(k, c, kh, &mut prng), stride, pad)),
            vec![2, c, hw, hw],
            usize::MAX,
        ));
    }
    let all = usize::MAX;
    cases.push(("relu".into(), Box::new(ReluLayer::new()), vec![2, 3, 4, 4], all));
    cases.push(("maxpool 2/2".into(), Box::new(MaxPoolLayer::new(2, 2)), vec![2, 2, 6, 6], all));
    cases.push(("maxpool 3/2".into(), Box::new(MaxPoolLayer::new(3, 2)), vec![1, 2, 7, 7], all));
    cases.push(("global average pool".into(), Box::new(GlobalAvgPoolLayer::new()), vec![3, 2, 3, 3], all));
    let linear = LayerParams::new(gaussian_tensor(&[5, 3], &mut prng), gaussian_tensor(&[3], &mut prng));
    cases.push(("fully connected".into(), Box::new(LinearLayer::new(linear)), vec![4, 5], all));
    cases.push((
        "fire".into(),
        Box::new(FireModule::new(fire(FireConfig::new(3, 4, 4), 5, &mut prng))),
        vec![2, 5, 5, 5],
        all,
    ));
    let f1 = fire(FireConfig::new(2, 8, 8), 16, &mut prng);
    let f2 = fire(FireConfig::new(2, 8, 8), 16, &mut prng);
    cases.push((
        "two-fire micro chain".into(),
        Box::new(Chain::new(vec![
            Box::new(Conv2dLayer::new(conv(16, 1, 3, &mut prng), 2, 1)),
            Box::new(ReluLayer::new()),
            Box::new(MaxPoolLayer::new(2, 2)),
            Box::new(FireModule::new(f1)),
            Box::new(FireModule::new(f2)),
            Box::new(GlobalAvgPoolLayer::new()),
        ])),
        vec![2, 1, 8, 8],
        all,
    ));
    for (name, head) in [
        ("micro network, regression head", Head::Regression),
        ("micro network, classification head", Head::Classification { classes: 5 }),
    ] {
        let mut model = build_network::<f64>(&NetworkConfig::micro(1, 16, head), prng.next_u64())?;
        jitter_biases(model.params_mut(), &mut prng);
        cases.push((
            name.into(),
            Box::new(ModelFragment::new(model)),
            vec![2, 1, 16, 16],
            NETWORK_COORDS_PER_TENSOR,
        ));
    }

    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, mut frag, shape, coords))| {
            let input = gaussian_tensor(&shape, &mut Prng::new(derive_seed(seed, i as u64)));
            let check_seed = derive_seed(seed, 1000 + i as u64);
            let report = gradient_check_sampled(frag.as_mut(), &input, tolerance, check_seed, coords)?;
            Ok(SuiteEntry { name, report })
        })
        .collect()
}
