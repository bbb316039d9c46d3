//! Labelled difference-patch datasets, the mini-batch Adam loop, and
//! validation metrics.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DatasetManifest, Image};
use crate::model::{Head, Model, NetworkConfig, Preset};
use crate::nn::{adam_step, mse_loss, softmax_cross_entropy, AdamConfig, Tensor};
use crate::rng::{derive_seed, Prng};
use crate::scalar::Scalar;
use crate::synth::{difference, make_frame_pair, sample_patches, PatchBatch};

/// Seed used whenever the caller does not pick one.
pub const DEFAULT_SEED: u64 = 20_220_525;

pub const DEFAULT_LEVELS: [f64; 5] = [5.0, 10.0, 15.0, 20.0, 25.0];

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const VALIDATION_STREAM: u64 = 0x7661_6c69_6400;
const SHUFFLE_STREAM: u64 = 0x7368_7566_666c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub levels: Vec<f64>,
    pub samples_per_level: usize,
    pub validation_per_level: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub epochs: usize,
    pub validation_frequency: usize,
    pub seed: u64,
    pub patch_size: usize,
    pub shuffle_each_epoch: bool,
    /// Channels fed to the network; color images are reduced to luma when 1.
    pub channels: usize,
}

impl Default for TrainConfig {
    /// Desk scale: 400 samples per level on 32×32 patches, with the
    /// optimizer settings of the full-scale run.
    fn default() -> Self {
        TrainConfig {
            levels: DEFAULT_LEVELS.to_vec(),
            samples_per_level: 400,
            validation_per_level: 100,
            lr: 0.01,
            batch_size: 128,
            l2: 1e-4,
            epochs: 10,
            validation_frequency: 50,
            seed: DEFAULT_SEED,
            patch_size: 32,
            shuffle_each_epoch: true,
            channels: 1,
        }
    }
}

impl TrainConfig {
    /// 2000 training and 500 validation samples per level, 30 epochs.
    pub fn paper_scale() -> Self {
        TrainConfig {
            samples_per_level: 2000,
            validation_per_level: 500,
            epochs: 30,
            patch_size: 64,
            ..Self::default()
        }
    }

    /// `lr == 0` is accepted and freezes the parameters (no optimizer step).
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidArgument("at least one noise level is required".into()));
        }
        if self.levels[0] <= 0.0 || self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "levels must be positive and strictly increasing: {:?}",
                self.levels
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid learning rate {}", self.lr)));
        }
        if self.validation_frequency == 0 {
            return Err(Error::InvalidArgument("validation frequency must be >= 1".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument("channels must be 1 or 3".into()));
        }
        Ok(())
    }

    /// Network matching this data: channels and patch size, and for the
    /// regression head an output bias at the mean training level.
    pub fn network(&self, preset: Preset, head: Head) -> NetworkConfig {
        let mut net = NetworkConfig::preset(preset, self.channels, self.patch_size, head);
        if head.is_regression() && !self.levels.is_empty() {
            net.output_bias = self.levels.iter().sum::<f64>() / self.levels.len() as f64;
        }
        net
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.l2,
            ..AdamConfig::default()
        }
    }
}

fn prepare_images(images: &[Image<f64>], channels: usize) -> Result<Vec<Image<f64>>> {
    images
        .iter()
        .map(|img| match (img.channels(), channels) {
            (c, d) if c == d => Ok(img.clone()),
            (3, 1) => Ok(img.to_gray()),
            (c, d) => Err(Error::Shape(format!(
                "{} has {c} channels, training needs {d}",
                img.tag()
            ))),
        })
        .collect()
}

fn build_split(
    images: &[Image<f64>],
    cfg: &TrainConfig,
    clip: bool,
    stream: u64,
    per_level: usize,
) -> Result<PatchBatch<f32>> {
    let p = cfg.patch_size;
    let root = derive_seed(cfg.seed, stream);
    let tasks: Vec<(usize, usize)> = (0..cfg.levels.len())
        .flat_map(|li| (0..per_level).map(move |si| (li, si)))
        .collect();
    let parts = tasks
        .par_iter()
        .map(|&(li, si)| {
            let img = &images[si % images.len()];
            let base = derive_seed(derive_seed(root, li as u64), si as u64);
            let mut prng = Prng::new(derive_seed(base, 3));
            let x0 = prng.below((img.width() - p + 1) as u64) as usize;
            let y0 = prng.below((img.height() - p + 1) as u64) as usize;
            // Noise outside the crop never reaches the patch, so only the
            // crop is synthesized.
            let crop = img.crop(x0, y0, p, p)?;
            let diff = difference(&make_frame_pair(&crop, cfg.levels[li], base, clip)?)?;
            let mut batch = sample_patches(&diff.cast::<f32>(), p, 1, 0)?;
            batch.offsets = vec![(x0, y0)];
            batch.set_class(li);
            Ok(batch)
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Ok(PatchBatch::empty(cfg.channels, p));
    }
    PatchBatch::concat(parts)
}

/// Training and validation patches from in-memory clean images.
///
/// Sample `i` of level `l` uses image `i mod len` and its own derived seed;
/// the validation split draws from a separate seed stream.
pub fn build_dataset_from_images(
    images: &[Image<f64>],
    cfg: &TrainConfig,
    clip: bool,
) -> Result<(PatchBatch<f32>, PatchBatch<f32>)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("no clean images to build a dataset from".into()));
    }
    let images = prepare_images(images, cfg.channels)?;
    if let Some(small) = images.iter().find(|i| i.width().min(i.height()) < cfg.patch_size) {
        return Err(Error::Shape(format!(
            "patch size {} exceeds {} ({}x{})",
            cfg.patch_size,
            small.tag(),
            small.width(),
            small.height()
        )));
    }
    let train = build_split(&images, cfg, clip, TRAIN_STREAM, cfg.samples_per_level)?;
    let val = build_split(&images, cfg, clip, VALIDATION_STREAM, cfg.validation_per_level)?;
    Ok((train, val))
}

pub fn build_dataset(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    clip: bool,
) -> Result<(PatchBatch<f32>, PatchBatch<f32>)> {
    if manifest.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {} is empty", manifest.name)));
    }
    build_dataset_from_images(&manifest.load_all()?, cfg, clip)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metrics {
    Classification { accuracy: f64 },
    Regression { mae: f64, mae_per_level: Vec<(f64, f64)> },
}

impl Metrics {
    /// Accuracy for classification, overall MAE for regression.
    pub fn headline(&self) -> f64 {
        match self {
            Metrics::Classification { accuracy } => *accuracy,
            Metrics::Regression { mae, .. } => *mae,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Metrics from raw model outputs against a batch's labels.
pub fn metrics_from_outputs<T: Scalar>(head: Head, outputs: &Tensor<T>, val: &PatchBatch<T>) -> Result<Metrics> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let (n, k) = outputs.dims2()?;
    if n != val.len() || k != head.outputs() {
        return Err(Error::Shape(format!(
            "outputs {:?} do not match {} samples with {} outputs",
            outputs.shape(),
            val.len(),
            head.outputs()
        )));
    }
    match head {
        Head::Classification { .. } => {
            let hits = outputs
                .data()
                .chunks_exact(k)
                .zip(&val.labels_class)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            Ok(Metrics::Classification {
                accuracy: hits as f64 / n as f64,
            })
        }
        Head::Regression => {
            let mut levels: Vec<f64> = val.labels_sigma.clone();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            let mut sums = vec![(0.0f64, 0usize); levels.len()];
            let mut total = 0.0;
            for (y, &s) in outputs.data().iter().zip(&val.labels_sigma) {
                let err = (y.to_f64_lossy() - s).abs();
                total += err;
                let li = levels.partition_point(|&l| l < s);
                sums[li].0 += err;
                sums[li].1 += 1;
            }
            Ok(Metrics::Regression {
                mae: total / n as f64,
                mae_per_level: levels
                    .iter()
                    .zip(&sums)
                    .map(|(&l, &(e, c))| (l, e / c as f64))
                    .collect(),
            })
        }
    }
}

const EVAL_CHUNK: usize = 128;

/// Run the model over `val` in chunks and concatenate the outputs.
pub fn predict_batch<T: Scalar>(model: &Model<T>, patches: &Tensor<T>) -> Result<Tensor<T>> {
    let n = patches.shape()[0];
    let k = model.config.head.outputs();
    let mut data = Vec::with_capacity(n * k);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        data.extend_from_slice(model.forward(&patches.batch_slice(start, end))?.data());
        start = end;
    }
    Tensor::new(&[n, k], data)
}

/// Accuracy (classification) or per-level MAE (regression) on `val`.
pub fn validate<T: Scalar>(model: &Model<T>, val: &PatchBatch<T>) -> Result<Metrics> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let outputs = predict_batch(model, &val.patches)?;
    metrics_from_outputs(model.config.head, &outputs, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: usize,
    pub metric: f64,
}

/// Append-only log of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub iterations: Vec<IterationRecord>,
    pub validations: Vec<ValidationRecord>,
    pub epoch_seconds: Vec<f64>,
    pub final_metrics: Option<Metrics>,
    pub seed: u64,
}

impl TrainHistory {
    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.iterations == other.iterations
            && self.validations == other.validations
            && self.final_metrics == other.final_metrics
            && self.seed == other.seed
    }

    pub fn wall_clock_s(&self) -> f64 {
        self.epoch_seconds.iter().sum()
    }

    /// `iteration,loss,val_metric`; `val_metric` is empty on iterations
    /// without a validation pass.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,val_metric\n");
        let mut vals = self.validations.iter().peekable();
        for it in &self.iterations {
            let metric = match vals.peek() {
                Some(v) if v.iteration == it.iteration => {
                    let m = v.metric;
                    vals.next();
                    format!("{m}")
                }
                _ => String::new(),
            };
            let _ = writeln!(out, "{},{},{}", it.iteration, it.loss, metric);
        }
        out
    }

    /// Summary object: final metrics, epochs, wall clock, seed and preset.
    pub fn summary_json(&self, preset: &str) -> serde_json::Value {
        let mut v = serde_json::json!({
            "epochs": self.epoch_seconds.len(),
            "wall_clock_s": self.wall_clock_s(),
            "seed": self.seed,
            "preset": preset,
        });
        match &self.final_metrics {
            Some(Metrics::Classification { accuracy }) => {
                v["final_accuracy"] = serde_json::json!(accuracy);
            }
            Some(Metrics::Regression { mae, mae_per_level }) => {
                v["final_mae"] = serde_json::json!(mae);
                v["final_mae_per_level"] = mae_per_level
                    .iter()
                    .map(|(l, e)| serde_json::json!({"sigma": l, "mae": e}))
                    .collect();
            }
            None => {}
        }
        v
    }
}

fn check_labels(head: Head, data: &PatchBatch<f32>) -> Result<()> {
    if let Head::Classification { classes } = head {
        if let Some(&l) = data.labels_class.iter().find(|&&l| l >= classes) {
            return Err(Error::HeadMismatch(format!(
                "class label {l} but the head has {classes} outputs"
            )));
        }
    }
    Ok(())
}

/// Mini-batch Adam over `train`, reshuffled each epoch, with validation
/// every `validation_frequency` iterations and once more at the end.
pub fn train(
    model: &mut Model<f32>,
    train_set: &PatchBatch<f32>,
    val_set: &PatchBatch<f32>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let head = model.config.head;
    check_labels(head, train_set)?;
    check_labels(head, val_set)?;
    let adam = cfg.adam();
    let mut history = TrainHistory {
        iterations: Vec::new(),
        validations: Vec::new(),
        epoch_seconds: Vec::new(),
        final_metrics: None,
        seed: cfg.seed,
    };
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if cfg.shuffle_each_epoch {
            order = (0..n).collect();
            Prng::new(derive_seed(derive_seed(cfg.seed, SHUFFLE_STREAM), epoch as u64)).shuffle(&mut order);
        }
        for idx in order.chunks(cfg.batch_size) {
            let x = train_set.patches.gather(idx);
            let (y, trace) = model.forward_trace(&x)?;
            let (loss, grad) = match head {
                Head::Regression => {
                    let target = Tensor::new(
                        &[idx.len(), 1],
                        idx.iter().map(|&i| train_set.labels_sigma[i] as f32).collect(),
                    )?;
                    mse_loss(&y, &target)?
                }
                Head::Classification { .. } => {
                    let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels_class[i]).collect();
                    softmax_cross_entropy(&y, &labels)?
                }
            };
            model.zero_grad();
            model.backward(&trace, &grad)?;
            if cfg.lr > 0.0 {
                for p in model.params_mut() {
                    adam_step(p, &adam)?;
                }
            }
            iteration += 1;
            history.iterations.push(IterationRecord {
                iteration,
                epoch,
                loss: loss as f64,
            });
            if iteration % cfg.validation_frequency == 0 && !val_set.is_empty() {
                history.validations.push(ValidationRecord {
                    iteration,
                    metric: validate(model, val_set)?.headline(),
                });
            }
        }
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    if !val_set.is_empty() {
        let m = validate(model, val_set)?;
        if history.validations.last().is_none_or(|v| v.iteration != iteration) {
            history.validations.push(ValidationRecord {
                iteration,
                metric: m.headline(),
            });
        }
        history.final_metrics = Some(m);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, NetworkConfig};

    fn images() -> Vec<Image<f64>> {
        vec![
            Image::constant(40, 40, 1, 128.0).unwrap(),
            Image::from_fn(48, 40, 3, "rgb", |x, y, c| ((x * 5 + y * 3 + c * 40) % 256) as f64).unwrap(),
        ]
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            samples_per_level: 20,
            validation_per_level: 6,
            patch_size: 16,
            epochs: 2,
            batch_size: 16,
            validation_frequency: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            levels: vec![10.0, 5.0],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            levels: vec![],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_sizes_labels_and_determinism() {
        let cfg = small_cfg();
        let (tr, va) = build_dataset_from_images(&images(), &cfg, false).unwrap();
        assert_eq!(tr.len(), 5 * 20);
        assert_eq!(va.len(), 5 * 6);
        assert_eq!(tr.patches.shape(), &[100, 1, 16, 16]);
        for (i, (&s, &c)) in tr.labels_sigma.iter().zip(&tr.labels_class).enumerate() {
            assert_eq!(s, cfg.levels[c]);
            assert_eq!(c, i / 20);
        }
        let (tr2, va2) = build_dataset_from_images(&images(), &cfg, false).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        assert_ne!(tr.patch(0), va.patch(0));
    }

    #[test]
    fn patch_too_large_rejected() {
        let cfg = TrainConfig {
            patch_size: 41,
            ..small_cfg()
        };
        assert!(build_dataset_from_images(&images(), &cfg, false).is_err());
    }

    #[test]
    fn validate_stub_predictions() {
        let labels = vec![5.0, 10.0, 15.0, 20.0, 25.0];
        let batch = PatchBatch {
            patches: Tensor::<f32>::zeros(&[5, 1, 2, 2]),
            labels_sigma: labels.clone(),
            labels_class: (0..5).collect(),
            patch_size: 2,
            offsets: vec![(0, 0); 5],
        };
        let perfect = Tensor::new(&[5, 1], labels.iter().map(|&v| v as f32).collect()).unwrap();
        let m = metrics_from_outputs(Head::Regression, &perfect, &batch).unwrap();
        assert_eq!(m.headline(), 0.0);
        let constant = Tensor::new(&[5, 1], vec![15.0f32; 5]).unwrap();
        let m = metrics_from_outputs(Head::Regression, &constant, &batch).unwrap();
        assert!((m.headline() - 6.0).abs() < 1e-12);

        let mut onehot = vec![0.0f32; 25];
        for i in 0..5 {
            onehot[i * 5 + i] = 1.0;
        }
        let logits = Tensor::new(&[5, 5], onehot).unwrap();
        let cls = Head::Classification { classes: 5 };
        assert_eq!(metrics_from_outputs(cls, &logits, &batch).unwrap().headline(), 1.0);
        assert_eq!(argmax(&[0.3, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn zero_learning_rate_freezes_model() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..small_cfg()
        };
        let (tr, va) = build_dataset_from_images(&images(), &cfg, false).unwrap();
        let mut m = build_network::<f32>(&NetworkConfig::micro(1, 16, Head::Regression), 1).unwrap();
        let before = m.clone();
        let initial = validate(&before, &va).unwrap();
        let h = train(&mut m, &tr, &va, &cfg).unwrap();
        for (a, b) in m.params().iter().zip(before.params()) {
            assert_eq!(a.weights.data(), b.weights.data());
            assert_eq!(a.bias.data(), b.bias.data());
        }
        assert_eq!(h.final_metrics, Some(initial));
    }

    #[test]
    fn history_is_deterministic_and_csv_shaped() {
        let cfg = small_cfg();
        let (tr, va) = build_dataset_from_images(&images(), &cfg, false).unwrap();
        let run = || {
            let mut m = build_network::<f32>(
                &NetworkConfig::micro(1, 16, Head::Classification { classes: 5 }),
                4,
            )
            .unwrap();
            let h = train(&mut m, &tr, &va, &cfg).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(m1, m2);
        assert!(h1.same_trajectory(&h2));
        // 100 samples / 16 = 7 batches per epoch
        assert_eq!(h1.iterations.len(), 14);
        assert!(h1.iterations.windows(2).all(|w| w[0].iteration < w[1].iteration));
        let csv = h1.to_csv();
        assert_eq!(csv.lines().count(), 15);
        assert_eq!(csv.lines().nth(3).unwrap().split(',').count(), 3);
        assert!(!csv.lines().nth(3).unwrap().ends_with(','));
    }

    #[test]
    fn label_head_mismatch_rejected() {
        let cfg = small_cfg();
        let (tr, va) = build_dataset_from_images(&images(), &cfg, false).unwrap();
        let mut m = build_network::<f32>(
            &NetworkConfig::micro(1, 16, Head::Classification { classes: 3 }),
            4,
        )
        .unwrap();
        assert!(matches!(train(&mut m, &tr, &va, &cfg), Err(Error::HeadMismatch(_))));
    }
}
