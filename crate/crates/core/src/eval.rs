//! Per-dataset, per-σ estimation error and timing reports.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate_direct, estimate_mad, estimate_patch_min, median};
use crate::image::{DatasetManifest, Image};
use crate::model::{predict_sigma, Model};
use crate::rng::derive_seed;
use crate::synth::{difference, make_frame_pair, NoisyFramePair};

pub const DEFAULT_PATCH_MIN_SIZE: usize = 16;
pub const DEFAULT_CNN_PATCHES: usize = 16;

const EVAL_STREAM: u64 = 0x6576_616c;

/// Anything that maps a noisy frame pair to a σ estimate.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    Direct,
    Mad,
    /// Single-image baseline on frame 1 with `patch`×`patch` tiles.
    PatchMin { patch: usize },
    Cnn { model: &'a Model<f32>, n_patches: usize },
}

impl Estimator<'_> {
    pub fn tag(&self) -> &'static str {
        match self {
            Estimator::Direct => "direct",
            Estimator::Mad => "mad",
            Estimator::PatchMin { .. } => "patch_min",
            Estimator::Cnn { .. } => "cnn",
        }
    }

    pub fn estimate(&self, pair: &NoisyFramePair<f64>, seed: u64) -> Result<f64> {
        let r = match *self {
            Estimator::Direct => estimate_direct(&difference(pair)?)?,
            Estimator::Mad => estimate_mad(&difference(pair)?)?,
            Estimator::PatchMin { patch } => estimate_patch_min(&pair.frame1, patch)?,
            Estimator::Cnn { model, n_patches } => {
                predict_sigma(model, &difference(pair)?.cast::<f32>(), n_patches, seed)?
            }
        };
        Ok(r.sigma_hat)
    }

    fn check(&self) -> Result<()> {
        if let Estimator::Cnn { model, .. } = self {
            if !model.config.head.is_regression() {
                return Err(Error::HeadMismatch(
                    "evaluation needs a regression-headed model".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub dataset: String,
    pub sigma: f64,
    pub method: String,
    pub mae: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub dataset: String,
    pub seconds_per_image: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub preset: Option<String>,
    pub clip: bool,
    /// Set by the caller; kept out of every rendered body except JSON.
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ErrorRow>,
    pub timing: Vec<TimingRow>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    /// Append rows and timing from `other`; a repeated
    /// (dataset, σ, method) triple is an error.
    pub fn merge(&mut self, other: EvalReport) -> Result<()> {
        for row in other.rows {
            if self
                .rows
                .iter()
                .any(|r| r.dataset == row.dataset && r.sigma == row.sigma && r.method == row.method)
            {
                return Err(Error::InvalidArgument(format!(
                    "duplicate row ({}, {}, {})",
                    row.dataset, row.sigma, row.method
                )));
            }
            self.rows.push(row);
        }
        self.timing.extend(other.timing);
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "text" | "table" | "text-table" => Ok(ReportFormat::Text),
            other => Err(Error::InvalidArgument(format!("unknown report format {other:?}"))),
        }
    }
}

/// Seed of the frame pair for image `index` at level `level_index`. It does
/// not depend on the dataset, so equal-sized images in different datasets
/// receive identical noise.
pub fn pair_seed(seed: u64, level_index: usize, index: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(seed, EVAL_STREAM), level_index as u64), index as u64)
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("no noise levels given".into()));
    }
    if let Some(s) = levels.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::InvalidArgument(format!("invalid noise level {s}")));
    }
    Ok(())
}

/// Error rows for an arbitrary estimator function over in-memory images.
///
/// `f` receives the frame pair and a per-task seed for any sampling it does.
pub fn evaluate_with<F>(
    method: &str,
    dataset: &str,
    images: &[Image<f64>],
    levels: &[f64],
    seed: u64,
    clip: bool,
    f: F,
) -> Result<EvalReport>
where
    F: Fn(&NoisyFramePair<f64>, u64) -> Result<f64> + Sync,
{
    check_levels(levels)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {dataset} has no images")));
    }
    let tasks: Vec<(usize, usize)> = (0..levels.len())
        .flat_map(|li| (0..images.len()).map(move |i| (li, i)))
        .collect();
    let errors = tasks
        .par_iter()
        .map(|&(li, i)| {
            let base = pair_seed(seed, li, i);
            let pair = make_frame_pair(&images[i], levels[li], base, clip)?;
            Ok((f(&pair, derive_seed(base, 4))? - levels[li]).abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows = errors
        .chunks(images.len())
        .zip(levels)
        .map(|(errs, &sigma)| ErrorRow {
            dataset: dataset.to_string(),
            sigma,
            method: method.to_string(),
            mae: errs.iter().sum::<f64>() / errs.len() as f64,
            n: errs.len(),
        })
        .collect();
    Ok(EvalReport {
        rows,
        timing: Vec::new(),
        metadata: ReportMetadata {
            seed,
            clip,
            ..ReportMetadata::default()
        },
    })
}

pub fn evaluate_images(
    estimator: &Estimator,
    dataset: &str,
    images: &[Image<f64>],
    levels: &[f64],
    seed: u64,
    clip: bool,
) -> Result<EvalReport> {
    estimator.check()?;
    let mut report = evaluate_with(estimator.tag(), dataset, images, levels, seed, clip, |pair, s| {
        estimator.estimate(pair, s)
    })?;
    if let Estimator::Cnn { model, .. } = estimator {
        report.metadata.preset = Some(model.config.preset.to_string());
    }
    Ok(report)
}

/// One frame pair per (image, σ); mean |σ̂ − σ| per σ.
pub fn evaluate(
    estimator: &Estimator,
    manifest: &DatasetManifest,
    levels: &[f64],
    seed: u64,
    clip: bool,
) -> Result<EvalReport> {
    estimator.check()?;
    if manifest.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {} is empty", manifest.name)));
    }
    evaluate_images(estimator, &manifest.name, &manifest.load_all()?, levels, seed, clip)
}

/// Median over `repetitions` of the mean seconds per image, estimation only.
pub fn time_images(
    estimator: &Estimator,
    dataset: &str,
    images: &[Image<f64>],
    sigma: f64,
    repetitions: usize,
    seed: u64,
) -> Result<TimingRow> {
    if repetitions < 3 {
        return Err(Error::InvalidArgument(format!(
            "timing needs at least 3 repetitions, got {repetitions}"
        )));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {dataset} has no images")));
    }
    estimator.check()?;
    let pairs = images
        .iter()
        .enumerate()
        .map(|(i, img)| make_frame_pair(img, sigma, pair_seed(seed, 0, i), false))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for (i, pair) in pairs.iter().enumerate() {
            std::hint::black_box(estimator.estimate(pair, i as u64)?);
        }
        samples.push(start.elapsed().as_secs_f64() / pairs.len() as f64);
    }
    Ok(TimingRow {
        method: estimator.tag().to_string(),
        dataset: dataset.to_string(),
        seconds_per_image: median(&mut samples),
    })
}

pub fn time_estimator(
    estimator: &Estimator,
    manifest: &DatasetManifest,
    sigma: f64,
    repetitions: usize,
    seed: u64,
) -> Result<TimingRow> {
    time_images(estimator, &manifest.name, &manifest.load_all()?, sigma, repetitions, seed)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Left-align the first `left` columns, right-align the rest.
fn pad_table(rows: &[Vec<String>], left: usize) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let pad = widths[c] - s.chars().count();
                if c < left {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Datasets as row groups, σ ascending within each, one column per method.
fn render_error_table(report: &EvalReport) -> String {
    let datasets = first_seen(report.rows.iter().map(|r| r.dataset.as_str()));
    let methods = first_seen(report.rows.iter().map(|r| r.method.as_str()));
    let mut table = vec![["Dataset", "Noise Level"]
        .into_iter()
        .map(String::from)
        .chain(methods.iter().map(|m| m.to_string()))
        .collect::<Vec<_>>()];
    for ds in &datasets {
        let rows: Vec<&ErrorRow> = report.rows.iter().filter(|r| r.dataset == *ds).collect();
        let mut sigmas: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
        sigmas.sort_by(f64::total_cmp);
        sigmas.dedup();
        let count = rows.iter().map(|r| r.n).max().unwrap_or(0);
        for (k, s) in sigmas.iter().enumerate() {
            let mut line = vec![
                if k == 0 {
                    format!("{ds} ({count} images)")
                } else {
                    String::new()
                },
                format!("σ = {s}"),
            ];
            for m in &methods {
                line.push(
                    rows.iter()
                        .find(|r| r.sigma == *s && r.method == *m)
                        .map_or("-".to_string(), |r| format!("{:.2}", r.mae)),
                );
            }
            table.push(line);
        }
    }
    pad_table(&table, 2)
}

/// One row per dataset, one column per method, seconds per image.
fn render_timing_table(report: &EvalReport) -> String {
    let datasets = first_seen(report.timing.iter().map(|r| r.dataset.as_str()));
    let methods = first_seen(report.timing.iter().map(|r| r.method.as_str()));
    let mut table = vec![std::iter::once("Database".to_string())
        .chain(methods.iter().map(|m| m.to_string()))
        .collect::<Vec<_>>()];
    for ds in datasets {
        let mut line = vec![ds.to_string()];
        for m in &methods {
            line.push(
                report
                    .timing
                    .iter()
                    .find(|t| t.dataset == ds && t.method == *m)
                    .map_or("-".to_string(), |t| format!("{:.4}", t.seconds_per_image)),
            );
        }
        table.push(line);
    }
    pad_table(&table, 1)
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("dataset,sigma,method,mae,n\n");
            for r in &report.rows {
                let _ = writeln!(out, "{},{},{},{},{}", csv_field(&r.dataset), r.sigma, csv_field(&r.method), r.mae, r.n);
            }
            Ok(out.into_bytes())
        }
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report)?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Text => {
            let mut out = String::new();
            if !report.rows.is_empty() {
                out.push_str(&render_error_table(report));
            }
            if !report.timing.is_empty() {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&render_timing_table(report));
            }
            Ok(out.into_bytes())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, w: usize) -> Vec<Image<f64>> {
        (0..n)
            .map(|k| Image::from_fn(w, w, 1, "t", |x, y, _| ((x * 7 + y * 13 + k * 31) % 200) as f64 + 20.0).unwrap())
            .collect()
    }

    fn row(ds: &str, sigma: f64, method: &str, mae: f64) -> ErrorRow {
        ErrorRow {
            dataset: ds.into(),
            sigma,
            method: method.into(),
            mae,
            n: 2,
        }
    }

    #[test]
    fn oracle_estimator_has_zero_error() {
        let r = evaluate_with("oracle", "d", &images(3, 16), &DEFAULT_LEVELS, 1, false, |p, _| Ok(p.sigma_true)).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert!(r.rows.iter().all(|r| r.mae == 0.0 && r.n == 3));
    }

    #[test]
    fn direct_rows_are_image_independent() {
        let flat = vec![Image::constant(32, 32, 1, 100.0).unwrap(); 2];
        let textured = images(2, 32);
        let a = evaluate_images(&Estimator::Direct, "a", &flat, &DEFAULT_LEVELS, 9, false).unwrap();
        let b = evaluate_images(&Estimator::Direct, "a", &textured, &DEFAULT_LEVELS, 9, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn direct_error_shrinks_with_image_size() {
        let mae = |w| {
            let r = evaluate_images(&Estimator::Direct, "d", &images(6, w), &[20.0], 3, false).unwrap();
            r.rows[0].mae
        };
        let (s, m, l) = (mae(16), mae(64), mae(256));
        assert!(s > m && m > l, "{s} {m} {l}");
    }

    #[test]
    fn deterministic_regardless_of_threads() {
        let run = || evaluate_images(&Estimator::Mad, "d", &images(4, 24), &[5.0, 25.0], 2, true).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        assert_eq!(run(), pool.install(run));
    }

    #[test]
    fn timing_needs_three_repetitions() {
        assert!(time_images(&Estimator::Direct, "d", &images(1, 16), 10.0, 2, 0).is_err());
        let t = time_images(&Estimator::Direct, "d", &images(1, 16), 10.0, 3, 0).unwrap();
        assert_eq!(t.method, "direct");
        assert!(t.seconds_per_image >= 0.0);
    }

    #[test]
    fn classification_model_rejected() {
        use crate::model::{build_network, Head, NetworkConfig};
        let m = build_network::<f32>(&NetworkConfig::micro(1, 16, Head::Classification { classes: 5 }), 0).unwrap();
        let e = Estimator::Cnn { model: &m, n_patches: 2 };
        assert!(matches!(
            evaluate_images(&e, "d", &images(1, 16), &[5.0], 0, false),
            Err(Error::HeadMismatch(_))
        ));
    }

    #[test]
    fn csv_shapes() {
        let empty = EvalReport::default();
        assert_eq!(render_report(&empty, ReportFormat::Csv).unwrap(), b"dataset,sigma,method,mae,n\n");
        let one = EvalReport {
            rows: vec![row("kodak", 5.0, "direct", 0.25)],
            ..EvalReport::default()
        };
        let text = String::from_utf8(render_report(&one, ReportFormat::Csv).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "kodak,5,direct,0.25,2");
    }

    #[test]
    fn json_round_trip_is_stable() {
        let r = EvalReport {
            rows: vec![row("a", 5.0, "direct", 0.1 + 0.2), row("a", 10.0, "direct", 1.0 / 3.0)],
            timing: vec![TimingRow {
                method: "direct".into(),
                dataset: "a".into(),
                seconds_per_image: 1.5e-3,
            }],
            metadata: ReportMetadata {
                seed: 7,
                preset: Some("micro".into()),
                clip: false,
                timestamp: Some("1970-01-01T00:00:00Z".into()),
            },
        };
        let once = render_report(&r, ReportFormat::Json).unwrap();
        let back = EvalReport::from_json(std::str::from_utf8(&once).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(render_report(&back, ReportFormat::Json).unwrap(), once);
    }

    #[test]
    fn merge_rejects_duplicate_triples() {
        let mut a = EvalReport {
            rows: vec![row("a", 5.0, "direct", 0.1)],
            ..EvalReport::default()
        };
        let b = EvalReport {
            rows: vec![row("a", 5.0, "mad", 0.2)],
            ..EvalReport::default()
        };
        a.merge(b.clone()).unwrap();
        assert!(a.merge(b).is_err());
    }

    #[test]
    fn format_parsing() {
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert_eq!("text".parse::<ReportFormat>().unwrap(), ReportFormat::Text);
        assert!("xml".parse::<ReportFormat>().is_err());
    }

    use crate::train::DEFAULT_LEVELS;
}
