//! Frame-pair synthesis and the difference images fed to the estimators.
//!
//! Noise increments are quantized to `2^-NOISE_FRACTION_BITS` before they
//! are added. For images on the 0–255 scale with integer (or coarser
//! dyadic) intensities every `pixel + noise` sum is then exact, so
//! `frame1 - frame2` reproduces `noise1 - noise2` bit for bit regardless
//! of the clean image. The quantization step (2^-41 in f64, 2^-12 in f32)
//! is far below any statistic of interest.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Tensor;
use crate::rng::{derive_seed, Prng, ALGORITHM_ID};
use crate::scalar::Scalar;

pub const CLIP_MIN: f64 = 0.0;
pub const CLIP_MAX: f64 = 255.0;

/// Two independently noised renderings of one clean image.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyFramePair<T> {
    pub frame1: Image<T>,
    pub frame2: Image<T>,
    pub sigma_true: f64,
    pub seed1: u64,
    pub seed2: u64,
    pub clipped: bool,
}

impl<T> NoisyFramePair<T> {
    pub fn algorithm(&self) -> &'static str {
        ALGORITHM_ID
    }

    pub fn swapped(self) -> Self {
        NoisyFramePair {
            frame1: self.frame2,
            frame2: self.frame1,
            seed1: self.seed2,
            seed2: self.seed1,
            ..self
        }
    }
}

/// Signed raster `frame1 - frame2`, same layout as [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceImage<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
    pub sigma_true: f64,
}

impl<T: Scalar> DifferenceImage<T> {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<T>,
        sigma_true: f64,
    ) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "difference data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite difference value".into()));
        }
        Ok(DifferenceImage {
            width,
            height,
            channels,
            data,
            sigma_true,
        })
    }

    pub fn plane(&self, c: usize) -> Vec<T> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Single-channel view of channel `c`.
    pub fn channel(&self, c: usize) -> DifferenceImage<T> {
        DifferenceImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.plane(c),
            sigma_true: self.sigma_true,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> DifferenceImage<T> {
        DifferenceImage {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn cast<U: Scalar>(&self) -> DifferenceImage<U> {
        DifferenceImage {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            sigma_true: self.sigma_true,
        }
    }
}

/// `N×C×p×p` difference patches with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch<T> {
    pub patches: Tensor<T>,
    pub labels_sigma: Vec<f64>,
    pub labels_class: Vec<usize>,
    pub patch_size: usize,
    /// Top-left corner `(x, y)` of each patch in its source raster.
    pub offsets: Vec<(usize, usize)>,
}

impl<T: Scalar> PatchBatch<T> {
    pub fn empty(channels: usize, patch_size: usize) -> Self {
        PatchBatch {
            patches: Tensor::zeros(&[0, channels, patch_size, patch_size]),
            labels_sigma: Vec::new(),
            labels_class: Vec::new(),
            patch_size,
            offsets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels_sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels_sigma.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Patch `i` as a `C×p×p` slice.
    pub fn patch(&self, i: usize) -> &[T] {
        let per = self.channels() * self.patch_size * self.patch_size;
        &self.patches.data()[i * per..(i + 1) * per]
    }

    /// Concatenate batches with equal channel count and patch size.
    pub fn concat(parts: Vec<PatchBatch<T>>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidArgument("no batches to concatenate".into()));
        };
        let (c, p) = (first.channels(), first.patch_size);
        let mut data = Vec::new();
        let mut out = PatchBatch::empty(c, p);
        for part in parts {
            if part.channels() != c || part.patch_size != p {
                return Err(Error::Shape("patch batches differ in shape".into()));
            }
            data.extend_from_slice(part.patches.data());
            out.labels_sigma.extend(part.labels_sigma);
            out.labels_class.extend(part.labels_class);
            out.offsets.extend(part.offsets);
        }
        out.patches = Tensor::new(&[out.labels_sigma.len(), c, p, p], data)?;
        Ok(out)
    }

    pub fn set_class(&mut self, class: usize) {
        self.labels_class.iter_mut().for_each(|l| *l = class);
    }
}

/// `round(v · 2^bits) / 2^bits`, the grid every noise increment lives on.
#[inline]
fn quantize_noise<T: Scalar>(v: f64) -> T {
    let scale = (T::NOISE_FRACTION_BITS as f64).exp2();
    T::from_f64_lossy((v * scale).round() / scale)
}

/// Add i.i.d. `N(0, sigma²)` noise drawn from `seed`, optionally clipping
/// the result to `[0, 255]`.
pub fn add_awgn<T: Scalar>(img: &Image<T>, sigma: f64, seed: u64, clip: bool) -> Result<Image<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut prng = Prng::new(seed);
    let (lo, hi) = (T::from_f64_lossy(CLIP_MIN), T::from_f64_lossy(CLIP_MAX));
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let noisy = v + quantize_noise::<T>(sigma * prng.gaussian());
            if clip {
                noisy.max(lo).min(hi)
            } else {
                noisy
            }
        })
        .collect();
    Image::new(img.width(), img.height(), img.channels(), data, img.tag())
}

/// Seeds of the two frames derived from a pair's base seed.
pub fn frame_seeds(base_seed: u64) -> (u64, u64) {
    (derive_seed(base_seed, 1), derive_seed(base_seed, 2))
}

pub fn make_frame_pair<T: Scalar>(
    img: &Image<T>,
    sigma: f64,
    base_seed: u64,
    clip: bool,
) -> Result<NoisyFramePair<T>> {
    let (seed1, seed2) = frame_seeds(base_seed);
    Ok(NoisyFramePair {
        frame1: add_awgn(img, sigma, seed1, clip)?,
        frame2: add_awgn(img, sigma, seed2, clip)?,
        sigma_true: sigma,
        seed1,
        seed2,
        clipped: clip,
    })
}

/// Difference of two frames given directly (e.g. captured files).
pub fn difference_of<T: Scalar>(
    frame1: &Image<T>,
    frame2: &Image<T>,
    sigma_true: f64,
) -> Result<DifferenceImage<T>> {
    if (frame1.width(), frame1.height(), frame1.channels())
        != (frame2.width(), frame2.height(), frame2.channels())
    {
        return Err(Error::Shape(format!(
            "frames differ: {}x{}x{} vs {}x{}x{}",
            frame1.width(),
            frame1.height(),
            frame1.channels(),
            frame2.width(),
            frame2.height(),
            frame2.channels()
        )));
    }
    let data = frame1.data().iter().zip(frame2.data()).map(|(&a, &b)| a - b).collect();
    DifferenceImage::new(frame1.width(), frame1.height(), frame1.channels(), data, sigma_true)
}

pub fn difference<T: Scalar>(pair: &NoisyFramePair<T>) -> Result<DifferenceImage<T>> {
    difference_of(&pair.frame1, &pair.frame2, pair.sigma_true)
}

/// `n` random `p×p` crops of `diff` (corners uniform, with replacement).
pub fn sample_patches<T: Scalar>(
    diff: &DifferenceImage<T>,
    p: usize,
    n: usize,
    seed: u64,
) -> Result<PatchBatch<T>> {
    if p == 0 || p > diff.width.min(diff.height) {
        return Err(Error::Shape(format!(
            "patch size {p} does not fit {}x{}",
            diff.width, diff.height
        )));
    }
    let c = diff.channels;
    let mut prng = Prng::new(seed);
    let mut data = Vec::with_capacity(n * c * p * p);
    let mut offsets = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = prng.below((diff.width - p + 1) as u64) as usize;
        let y0 = prng.below((diff.height - p + 1) as u64) as usize;
        for ch in 0..c {
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    data.push(diff.data[(y * diff.width + x) * c + ch]);
                }
            }
        }
        offsets.push((x0, y0));
    }
    Ok(PatchBatch {
        patches: Tensor::new(&[n, c, p, p], data)?,
        labels_sigma: vec![diff.sigma_true; n],
        labels_class: vec![0; n],
        patch_size: p,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_of(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    fn flat(w: usize, v: f64) -> Image<f64> {
        Image::constant(w, w, 1, v).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = Image::from_fn(8, 8, 3, "ramp", |x, y, c| (x * 7 + y * 3 + c) as f64).unwrap();
        assert_eq!(add_awgn(&img, 0.0, 5, false).unwrap(), img);
        let pair = make_frame_pair(&img, 0.0, 5, true).unwrap();
        assert_eq!(pair.frame1, img);
        assert_eq!(pair.frame2, img);
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(add_awgn(&flat(4, 0.0), -1.0, 0, false).is_err());
    }

    #[test]
    fn awgn_sample_std_near_sigma() {
        let img = flat(256, 128.0);
        let out = add_awgn(&img, 10.0, 77, false).unwrap();
        let noise: Vec<f64> = out.data().iter().map(|v| v - 128.0).collect();
        let s = std_of(&noise);
        assert!((9.89..=10.11).contains(&s), "{s}");
    }

    #[test]
    fn clipping_at_white_biases_downward() {
        let img = flat(256, 255.0);
        let out = add_awgn(&img, 25.0, 1, true).unwrap();
        let mean = out.data().iter().map(|v| v - 255.0).sum::<f64>() / out.data().len() as f64;
        assert!(mean < 0.0);
        assert!(out.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn pair_is_deterministic_and_seeds_differ() {
        let img = flat(16, 100.0);
        let a = make_frame_pair(&img, 15.0, 123, false).unwrap();
        let b = make_frame_pair(&img, 15.0, 123, false).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.seed1, a.seed2);
    }

    #[test]
    fn pair_difference_variance_is_two_sigma_squared() {
        let pair = make_frame_pair(&flat(256, 90.0), 15.0, 2024, false).unwrap();
        let d = difference(&pair).unwrap();
        let s = std_of(&d.data);
        let target = 15.0 * 2f64.sqrt();
        assert!((s - target).abs() <= 0.011 * target, "{s}");
    }

    #[test]
    fn difference_antisymmetric_and_zero_on_identical() {
        let img = Image::from_fn(16, 16, 1, "t", |x, y, _| ((x ^ y) * 9) as f64).unwrap();
        let pair = make_frame_pair(&img, 7.0, 3, false).unwrap();
        let d = difference(&pair).unwrap();
        let back = difference(&pair.clone().swapped()).unwrap();
        for (a, b) in d.data.iter().zip(&back.data) {
            assert_eq!(*a, -*b);
        }
        let same = difference_of(&img, &img, 0.0).unwrap();
        assert!(same.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn difference_mean_within_monte_carlo_bound() {
        let sigma = 20.0;
        let pair = make_frame_pair(&flat(256, 60.0), sigma, 8, false).unwrap();
        let d = difference(&pair).unwrap();
        let n = d.data.len() as f64;
        let mean = d.data.iter().sum::<f64>() / n;
        assert!(mean.abs() <= 4.0 * sigma * 2f64.sqrt() / n.sqrt());
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(difference_of(&flat(4, 0.0), &flat(5, 0.0), 1.0).is_err());
    }

    #[test]
    fn full_size_patch_equals_difference() {
        let pair = make_frame_pair(&flat(12, 10.0), 5.0, 1, false).unwrap();
        let d = difference(&pair).unwrap();
        let b = sample_patches(&d, 12, 3, 9).unwrap();
        for i in 0..3 {
            assert_eq!(b.offsets[i], (0, 0));
            assert_eq!(b.patch(i), &d.data[..]);
        }
        assert!(sample_patches(&d, 13, 1, 0).is_err());
        assert!(sample_patches(&d, 4, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn patches_match_source_exhaustively() {
        let img = Image::from_fn(20, 14, 3, "t", |x, y, c| (x * 3 + y * 5 + c * 11) as f64).unwrap();
        let d = difference_of(&img, &flat3(20, 14), 10.0).unwrap();
        let p = 5;
        let b = sample_patches(&d, p, 40, 4).unwrap();
        for (i, &(x0, y0)) in b.offsets.iter().enumerate() {
            let patch = b.patch(i);
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        let v = patch[(c * p + y) * p + x];
                        assert_eq!(v, d.data[((y0 + y) * 20 + x0 + x) * 3 + c]);
                    }
                }
            }
        }
        assert!(b.labels_sigma.iter().all(|&s| s == 10.0));
    }

    fn flat3(w: usize, h: usize) -> Image<f64> {
        Image::constant(w, h, 3, 1.0).unwrap()
    }
}
