use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use diffsigma::estimators::{estimate_direct, estimate_mad, estimate_patch_min, EstimatorResult};
use diffsigma::eval::{
    evaluate_images, render_report, time_images, EvalReport, Estimator, ReportFormat, ReportMetadata,
};
use diffsigma::image::{load_image, save_image, scan_dataset, DatasetManifest, Image};
use diffsigma::model::{build_network, load_model, predict_sigma, save_model, Head, Model, Preset};
use diffsigma::rng::{derive_seed, ALGORITHM_ID};
use diffsigma::synth::{difference_of, make_frame_pair};
use diffsigma::train::{build_dataset, train, TrainConfig};
use diffsigma::verify::gradient_suite;
use diffsigma::Error;

use crate::*;

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn stdout(bytes: &[u8]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(bytes)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::Runtime(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    bytes.push(b'\n');
    stdout(&bytes)
}

fn dataset(dir: &Path) -> Result<DatasetManifest> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(scan_dataset(dir, name)?)
}

fn receipt(seed: u64, preset: &str) {
    eprintln!("diffsigma: seed={seed} preset={preset}");
}

fn format_of(f: FormatArg) -> ReportFormat {
    match f {
        FormatArg::Text => ReportFormat::Text,
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
    }
}

/// Commit time when reproducible builds ask for one, else wall clock.
fn timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<u64>().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        });
    format!("unix:{secs}")
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.print_config {
        let mut cfg = serde_json::to_value(cli).map_err(Error::from)?;
        if let Command::Train(a) = &cli.command {
            cfg["train_config"] = serde_json::to_value(train_config(cli.seed, a)).map_err(Error::from)?;
        }
        return print_json(&cfg);
    }
    match &cli.command {
        Command::Synth(a) => synth(cli.seed, a),
        Command::Train(a) => train_cmd(cli.seed, a),
        Command::Estimate(a) => estimate(cli.seed, a),
        Command::Baseline(a) => baseline(cli.seed, a),
        Command::Evaluate(a) => evaluate(cli.seed, a),
        Command::Bench(a) => bench(cli.seed, a),
        Command::Gradcheck(a) => gradcheck(cli.seed, a),
    }
}

fn synth(seed: u64, a: &SynthArgs) -> Result<()> {
    receipt(seed, "none");
    if !(a.sigma.is_finite() && a.sigma >= 0.0) {
        return Err(usage(format!("--sigma must be a non-negative number, got {}", a.sigma)));
    }
    let manifest = dataset(&a.input)?;
    let mut written = Vec::new();
    for (i, entry) in manifest.entries().iter().enumerate() {
        let img: Image<f64> = load_image(&entry.path)?;
        let pair = make_frame_pair(&img, a.sigma, derive_seed(seed, i as u64), a.clip)?;
        let stem = entry.path.file_stem().unwrap_or_default().to_string_lossy();
        let ext = entry.path.extension().unwrap_or_default().to_string_lossy().to_lowercase();
        let f1 = a.out.join(format!("{stem}_f1.{ext}"));
        let f2 = a.out.join(format!("{stem}_f2.{ext}"));
        fs::create_dir_all(&a.out).map_err(|e| Error::Io {
            path: a.out.clone(),
            source: e,
        })?;
        // 8-bit files: values are rounded and clamped on write.
        save_image(&pair.frame1, &f1, true)?;
        save_image(&pair.frame2, &f2, true)?;
        let sidecar = serde_json::json!({
            "source": entry.path,
            "frame1": f1,
            "frame2": f2,
            "sigma_true": pair.sigma_true,
            "seeds": [pair.seed1, pair.seed2],
            "clip": pair.clipped,
            "algorithm": ALGORITHM_ID,
            "stored": "8-bit, rounded and clamped",
        });
        let mut bytes = serde_json::to_vec_pretty(&sidecar).map_err(Error::from)?;
        bytes.push(b'\n');
        write_file(&a.out.join(format!("{stem}.json")), &bytes)?;
        written.push(sidecar);
    }
    print_json(&written)
}

fn train_config(seed: u64, a: &TrainArgs) -> TrainConfig {
    let mut cfg = if a.paper_scale {
        TrainConfig::paper_scale()
    } else {
        TrainConfig::default()
    };
    cfg.seed = seed;
    cfg.channels = a.channels;
    if a.preset == PresetArg::Paper && !a.paper_scale {
        // The full-width stem needs more than 32 pixels to reach the last pool.
        cfg.patch_size = 64;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.samples_per_level {
        cfg.samples_per_level = v;
    }
    if let Some(v) = a.validation_per_level {
        cfg.validation_per_level = v;
    }
    if let Some(v) = a.patch_size {
        cfg.patch_size = v;
    }
    if let Some(Levels(v)) = &a.levels {
        cfg.levels = v.clone();
    }
    cfg
}

fn train_cmd(seed: u64, a: &TrainArgs) -> Result<()> {
    let preset = match a.preset {
        PresetArg::Micro => Preset::Micro,
        PresetArg::Paper => Preset::Paper,
    };
    receipt(seed, &preset.to_string());
    let cfg = train_config(seed, a);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let head = match a.head {
        HeadArg::Reg => Head::Regression,
        HeadArg::Cls => Head::Classification {
            classes: cfg.levels.len(),
        },
    };
    let net = cfg.network(preset, head);
    net.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = dataset(&a.data)?;
    eprintln!(
        "diffsigma: {} images, {} training / {} validation samples per level",
        manifest.len(),
        cfg.samples_per_level,
        cfg.validation_per_level
    );
    let (train_set, val_set) = build_dataset(&manifest, &cfg, a.clip)?;
    let mut model: Model<f32> = build_network(&net, seed)?;
    let history = train(&mut model, &train_set, &val_set, &cfg)?;
    save_model(&model, &a.out)?;
    let history_path = a.history.clone().unwrap_or_else(|| a.out.with_extension("history.csv"));
    write_file(&history_path, history.to_csv().as_bytes())?;
    let mut summary = history.summary_json(&preset.to_string());
    summary["model"] = serde_json::json!(a.out);
    summary["history"] = serde_json::json!(history_path);
    print_json(&summary)
}

fn load_pair(f1: &Path, f2: &Path) -> Result<(Image<f64>, Image<f64>)> {
    Ok((load_image(f1)?, load_image(f2)?))
}

fn estimate(seed: u64, a: &EstimateArgs) -> Result<()> {
    let model: Model<f32> = load_model(&a.model)?;
    receipt(seed, &model.config.preset.to_string());
    let (f1, f2) = load_pair(&a.f1, &a.f2)?;
    let diff = difference_of(&f1, &f2, f64::NAN)?;
    let result = predict_sigma(&model, &diff.cast::<f32>(), a.patches, seed)?;
    print_json(&result)
}

fn baseline(seed: u64, a: &BaselineArgs) -> Result<()> {
    receipt(seed, "none");
    let f1: Image<f64> = load_image(&a.f1)?;
    let result: EstimatorResult = match a.method {
        MethodArg::Direct | MethodArg::Mad => {
            let f2 = a.f2.as_ref().ok_or_else(|| usage("--f2 is required for this method"))?;
            let diff = difference_of(&f1, &load_image(f2)?, f64::NAN)?;
            if a.method == MethodArg::Direct {
                estimate_direct(&diff)?
            } else {
                estimate_mad(&diff)?
            }
        }
        MethodArg::Patchmin => estimate_patch_min(&f1, a.patch)?,
        MethodArg::Cnn => return Err(usage("use `estimate --model` for the network estimator")),
    };
    print_json(&result)
}

fn resolve_methods(methods: &[MethodArg], has_model: bool) -> Result<Vec<MethodArg>> {
    let methods = if methods.is_empty() {
        let mut m = vec![MethodArg::Direct, MethodArg::Mad, MethodArg::Patchmin];
        if has_model {
            m.push(MethodArg::Cnn);
        }
        m
    } else {
        methods.to_vec()
    };
    if methods.contains(&MethodArg::Cnn) && !has_model {
        return Err(usage("method cnn needs --model"));
    }
    Ok(methods)
}

fn estimator<'a>(m: MethodArg, model: Option<&'a Model<f32>>, patches: usize, patch: usize) -> Estimator<'a> {
    match m {
        MethodArg::Direct => Estimator::Direct,
        MethodArg::Mad => Estimator::Mad,
        MethodArg::Patchmin => Estimator::PatchMin { patch },
        MethodArg::Cnn => Estimator::Cnn {
            model: model.expect("checked by resolve_methods"),
            n_patches: patches,
        },
    }
}

fn load_optional_model(path: Option<&PathBuf>) -> Result<Option<Model<f32>>> {
    Ok(match path {
        Some(p) => Some(load_model(p)?),
        None => None,
    })
}

fn evaluate(seed: u64, a: &EvaluateArgs) -> Result<()> {
    let model = load_optional_model(a.model.as_ref())?;
    let preset = model.as_ref().map(|m| m.config.preset.to_string());
    receipt(seed, preset.as_deref().unwrap_or("none"));
    let methods = resolve_methods(&a.methods, model.is_some())?;
    let mut report = EvalReport {
        metadata: ReportMetadata {
            seed,
            preset: preset.clone(),
            clip: a.clip,
            timestamp: Some(timestamp()),
        },
        ..EvalReport::default()
    };
    for dir in &a.data {
        let manifest = dataset(dir)?;
        let images: Vec<Image<f64>> = manifest.load_all()?;
        for &m in &methods {
            let est = estimator(m, model.as_ref(), a.patches, a.patch);
            let part = evaluate_images(&est, &manifest.name, &images, &a.levels.0, seed, a.clip)?;
            report.merge(part)?;
        }
    }
    let bytes = render_report(&report, format_of(a.format))?;
    match &a.out {
        Some(path) => write_file(path, &bytes),
        None => stdout(&bytes),
    }
}

fn bench(seed: u64, a: &BenchArgs) -> Result<()> {
    let model = load_optional_model(a.model.as_ref())?;
    let preset = model.as_ref().map(|m| m.config.preset.to_string());
    receipt(seed, preset.as_deref().unwrap_or("none"));
    if a.repetitions < 3 {
        return Err(usage(format!("--repetitions must be >= 3, got {}", a.repetitions)));
    }
    let methods = resolve_methods(&a.methods, model.is_some())?;
    let mut report = EvalReport {
        metadata: ReportMetadata {
            seed,
            preset,
            clip: false,
            timestamp: Some(timestamp()),
        },
        ..EvalReport::default()
    };
    for dir in &a.data {
        let manifest = dataset(dir)?;
        let images: Vec<Image<f64>> = manifest.load_all()?;
        for &m in &methods {
            let est = estimator(m, model.as_ref(), a.patches, a.patch);
            report
                .timing
                .push(time_images(&est, &manifest.name, &images, a.sigma, a.repetitions, seed)?);
        }
    }
    stdout(&render_report(&report, format_of(a.format))?)
}

fn gradcheck(seed: u64, a: &GradcheckArgs) -> Result<()> {
    receipt(seed, "micro");
    let suite = gradient_suite(a.tolerance, seed)?;
    let rows: Vec<serde_json::Value> = suite
        .iter()
        .map(|e| {
            serde_json::json!({
                "name": e.name,
                "passed": e.ok(),
                "worst_rel_error": e.report.worst(),
                "tensors": e.report.checks.len(),
            })
        })
        .collect();
    print_json(&rows)?;
    let failed: Vec<&str> = suite.iter().filter(|e| !e.ok()).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(Error::InvalidArgument(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        ))))
    }
}
