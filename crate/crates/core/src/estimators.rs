//! Classical σ estimators.
//!
//! `direct` and `mad` consume a difference image and divide its spread by
//! √2, since `Var(n1 - n2) = 2σ²`. `patch_min` is the single-image baseline
//! that works on one noisy frame and is sensitive to texture.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::synth::DifferenceImage;

/// Normal-consistency constant of the median absolute deviation.
pub const MAD_NORMAL_CONSISTENCY: f64 = 0.6745;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    Mad,
    PatchMin,
    Cnn,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Mad => "mad",
            Method::PatchMin => "patch_min",
            Method::Cnn => "cnn",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub method: Method,
    pub sigma_hat: f64,
    pub per_channel: Vec<f64>,
}

impl EstimatorResult {
    /// Combine per-channel estimates by arithmetic mean.
    pub fn from_channels(method: Method, per_channel: Vec<f64>) -> Self {
        let sigma_hat = per_channel.iter().sum::<f64>() / per_channel.len() as f64;
        EstimatorResult {
            method,
            sigma_hat,
            per_channel,
        }
    }
}

/// Unbiased (n-1) sample standard deviation, two-pass.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Median, averaging the two central order statistics for even lengths.
pub fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, &mut upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

fn planes_f64<T: Scalar>(diff: &DifferenceImage<T>) -> Result<Vec<Vec<f64>>> {
    if diff.width * diff.height < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 pixels per channel, got {}",
            diff.width * diff.height
        )));
    }
    Ok((0..diff.channels)
        .map(|c| diff.plane(c).into_iter().map(Scalar::to_f64_lossy).collect())
        .collect())
}

pub fn estimate_direct<T: Scalar>(diff: &DifferenceImage<T>) -> Result<EstimatorResult> {
    let per = planes_f64(diff)?
        .iter()
        .map(|p| sample_std(p) / std::f64::consts::SQRT_2)
        .collect();
    Ok(EstimatorResult::from_channels(Method::Direct, per))
}

pub fn estimate_mad<T: Scalar>(diff: &DifferenceImage<T>) -> Result<EstimatorResult> {
    let per = planes_f64(diff)?
        .into_iter()
        .map(|mut p| {
            let m = median(&mut p);
            p.iter_mut().for_each(|v| *v = (*v - m).abs());
            median(&mut p) / MAD_NORMAL_CONSISTENCY / std::f64::consts::SQRT_2
        })
        .collect();
    Ok(EstimatorResult::from_channels(Method::Mad, per))
}

/// Smallest sample std among the non-overlapping `p×p` tiles of one noisy
/// image, per channel.
pub fn estimate_patch_min<T: Scalar>(noisy: &Image<T>, p: usize) -> Result<EstimatorResult> {
    if p < 2 {
        return Err(Error::InvalidArgument(format!("tile size must be >= 2, got {p}")));
    }
    if p > noisy.width().min(noisy.height()) {
        return Err(Error::Shape(format!(
            "tile size {p} exceeds {}x{}",
            noisy.width(),
            noisy.height()
        )));
    }
    let (tx, ty) = (noisy.width() / p, noisy.height() / p);
    let mut tile = Vec::with_capacity(p * p);
    let per = (0..noisy.channels())
        .map(|c| {
            let mut best = f64::INFINITY;
            for by in 0..ty {
                for bx in 0..tx {
                    tile.clear();
                    for y in by * p..(by + 1) * p {
                        for x in bx * p..(bx + 1) * p {
                            tile.push(noisy.get(x, y, c).to_f64_lossy());
                        }
                    }
                    best = best.min(sample_std(&tile));
                }
            }
            best
        })
        .collect();
    Ok(EstimatorResult::from_channels(Method::PatchMin, per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{add_awgn, difference, make_frame_pair};

    fn diff_from(data: Vec<f64>, w: usize, h: usize, c: usize) -> DifferenceImage<f64> {
        DifferenceImage::new(w, h, c, data, 0.0).unwrap()
    }

    fn synthetic(sigma: f64, seed: u64) -> DifferenceImage<f64> {
        let img = Image::constant(256, 256, 1, 100.0).unwrap();
        difference(&make_frame_pair(&img, sigma, seed, false).unwrap()).unwrap()
    }

    #[test]
    fn zero_and_constant_differences_give_zero() {
        let z = diff_from(vec![0.0; 16], 4, 4, 1);
        assert_eq!(estimate_direct(&z).unwrap().sigma_hat, 0.0);
        assert_eq!(estimate_mad(&z).unwrap().sigma_hat, 0.0);
        let c = diff_from(vec![3.5; 16], 4, 4, 1);
        assert_eq!(estimate_direct(&c).unwrap().sigma_hat, 0.0);
    }

    #[test]
    fn degenerate_input_rejected() {
        let one = diff_from(vec![1.0], 1, 1, 1);
        assert!(matches!(estimate_direct(&one), Err(Error::Degenerate(_))));
        assert!(matches!(estimate_mad(&one), Err(Error::Degenerate(_))));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn multichannel_result_is_channel_mean() {
        let mut data = Vec::new();
        for i in 0..64 {
            data.extend_from_slice(&[(i % 2) as f64, 2.0 * (i % 3) as f64, 0.0]);
        }
        let r = estimate_direct(&diff_from(data, 8, 8, 3)).unwrap();
        assert_eq!(r.per_channel.len(), 3);
        let mean = r.per_channel.iter().sum::<f64>() / 3.0;
        assert_eq!(r.sigma_hat, mean);
        assert_eq!(r.per_channel[2], 0.0);
    }

    #[test]
    fn direct_recovers_sigma_25() {
        let r = estimate_direct(&synthetic(25.0, 11)).unwrap();
        assert!((r.sigma_hat - 25.0).abs() <= 0.3, "{}", r.sigma_hat);
    }

    #[test]
    fn mad_recovers_sigma_10_and_resists_outliers() {
        let d = synthetic(10.0, 12);
        let r = estimate_mad(&d).unwrap();
        assert!((r.sigma_hat - 10.0).abs() <= 0.2, "{}", r.sigma_hat);

        let mut spoiled = d.clone();
        let n = spoiled.data.len();
        for k in 0..n / 100 {
            let i = (k * 7919) % n;
            spoiled.data[i] = if k % 2 == 0 { 1000.0 } else { -1000.0 };
        }
        let mad = estimate_mad(&spoiled).unwrap().sigma_hat;
        let direct = estimate_direct(&spoiled).unwrap().sigma_hat;
        assert!((mad - 10.0).abs() <= 0.5, "{mad}");
        assert!((direct - 10.0).abs() > 5.0, "{direct}");
    }

    #[test]
    fn patch_min_on_flat_and_noisy_images() {
        let flat = Image::constant(64, 64, 1, 80.0).unwrap();
        assert_eq!(estimate_patch_min(&flat, 8).unwrap().sigma_hat, 0.0);

        let big = Image::constant(256, 256, 1, 128.0).unwrap();
        let noisy = add_awgn(&big, 15.0, 4, false).unwrap();
        let s = estimate_patch_min(&noisy, 16).unwrap().sigma_hat;
        assert!((12.0..=15.5).contains(&s), "{s}");

        assert!(estimate_patch_min(&flat, 65).is_err());
        assert!(estimate_patch_min(&flat, 1).is_err());
    }

    #[test]
    fn patch_min_is_fooled_by_texture() {
        let flat = Image::constant(128, 128, 1, 128.0).unwrap();
        let textured = Image::from_fn(128, 128, 1, "tex", |x, y, _| {
            128.0 + 60.0 * ((x as f64 * 0.9).sin() * (y as f64 * 0.7).cos())
        })
        .unwrap();
        let a = estimate_patch_min(&add_awgn(&flat, 5.0, 3, false).unwrap(), 8).unwrap();
        let b = estimate_patch_min(&add_awgn(&textured, 5.0, 3, false).unwrap(), 8).unwrap();
        assert!(b.sigma_hat > a.sigma_hat, "{} vs {}", b.sigma_hat, a.sigma_hat);
    }
}
