use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use padforge::conv::{conv2d, conv2d_counted, ConvKernel, MacCounter};
use padforge::cost::{flop_cost, speedup_ratio, ConvShape, ConvVariant};
use padforge::data::{build_split, generate_corpus, load_samples, Manifest, Protocol, Sample};
use padforge::gradcheck::{run_suite, CheckedLayer, SuiteOptions, DEFAULT_EPSILON};
use padforge::metrics::{
    bpcer_at_apcer, compute_metrics, det_curve, mean_report, write_det_csv, write_scores_csv, BpcerAtApcer,
    MetricsReport,
};
use padforge::model::{build_model, load_checkpoint, predict_scores, save_checkpoint, score_records, ModelConfig};
use padforge::training::{score_samples, train_with_hook};
use padforge::{seed, Error, Label, Result, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Accepts a manifest file or a directory holding `manifest.tsv`.
fn read_manifest(data: &Path) -> Result<Manifest> {
    if data.is_dir() {
        Manifest::read(data.join("manifest.tsv"))
    } else {
        Manifest::read(data)
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path, workers: usize) -> Result<()> {
    cfg.corpus.validate()?;
    ensure_dir(out)?;
    let manifest = generate_corpus(&cfg.corpus, cfg.stream("corpus"), out, workers)?;
    cfg.write_resolved(out)?;
    println!(
        "wrote {} samples to {}",
        manifest.len(),
        out.join("manifest.tsv").display()
    );
    Ok(())
}

fn check_image_size(model: &ModelConfig, samples: &[Sample]) -> Result<()> {
    match samples.first() {
        Some(s) if s.image.height() != model.input_size || s.image.width() != model.input_size => {
            Err(Error::Config(format!(
                "data images are {}x{} but model.input_size is {}",
                s.image.height(),
                s.image.width(),
                model.input_size
            )))
        }
        _ => Ok(()),
    }
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, workers: usize) -> Result<()> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    let manifest = read_manifest(data)?;
    let (train_m, val_m) = build_split(&manifest, &cfg.split, cfg.stream("split"))?;
    let train_set = load_samples(&train_m, workers)?;
    let val_set = load_samples(&val_m, workers)?;
    check_image_size(&cfg.model, &train_set)?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let params = build_model(&cfg.model, cfg.stream("model"))?;
    let every = cfg.checkpoint_every;
    let mut hook = |r: &padforge::training::EpochRecord, p: &padforge::model::ModelParams| {
        println!(
            "epoch {:>3}  loss {:.5}  train ACE {:.2}%  val ACE {}  ({:.1}s)",
            r.epoch,
            r.mean_loss,
            r.train_ace,
            r.val_ace.map(|v| format!("{v:.2}%")).unwrap_or_else(|| "-".into()),
            r.seconds
        );
        if every > 0 && r.epoch.is_multiple_of(every) {
            save_checkpoint(p, out.join(format!("checkpoint-epoch{:04}.bin", r.epoch)))?;
        }
        Ok(())
    };
    let (params, log) = train_with_hook(
        params,
        &train_set,
        &val_set,
        &cfg.train,
        cfg.stream("train"),
        workers,
        &mut hook,
    )?;
    save_checkpoint(&params, out.join("checkpoint.bin"))?;
    let log_path = out.join("train_log.csv");
    fs::write(&log_path, log.to_csv()).map_err(|e| Error::io(&log_path, e))?;
    println!("{} optimizer steps; checkpoint in {}", log.steps, out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Test,
    All,
}

#[derive(Serialize)]
struct EvalSummary {
    protocol: Protocol,
    subset: Subset,
    train_sensors: Vec<String>,
    test_sensors: Vec<String>,
    held_out_materials: Vec<String>,
    n_samples: usize,
    metrics: MetricsReport,
    per_sensor: BTreeMap<String, MetricsReport>,
    mean_of_sensors: MetricsReport,
    bpcer_at_apcer: BpcerAtApcer,
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    protocol: Option<Protocol>,
    subset: Subset,
    out: &Path,
    workers: usize,
) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let mut split = cfg.split.clone();
    if let Some(p) = protocol {
        split.protocol = p;
        if p != Protocol::CrossSensor {
            split.test_sensors.clear();
        }
        if p != Protocol::IntraSensorUnknownMaterial {
            split.held_out_materials.clear();
        }
    }
    let manifest = read_manifest(data)?;
    if split.protocol == Protocol::CrossSensor && split.test_sensors.is_empty() {
        split.test_sensors = manifest
            .sensors()
            .into_iter()
            .filter(|s| !split.train_sensors.contains(s))
            .collect();
    }
    let (train_m, test_m) = build_split(&manifest, &split, cfg.stream("split"))?;
    let chosen = match subset {
        Subset::Train => train_m,
        Subset::Test => test_m,
        Subset::All => Manifest::new(&manifest.root, [train_m.records, test_m.records].concat())?,
    };
    let samples = load_samples(&chosen, workers)?;
    check_image_size(params.config(), &samples)?;
    let raw = score_samples(&params, &samples, cfg.eval.batch_size)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let truth: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let records = score_records(&ids, &raw, &truth)?;
    let metrics = compute_metrics(&records)?;
    let curve = det_curve(&records, cfg.eval.n_thresholds)?;

    let mut per_sensor = BTreeMap::new();
    for sensor in chosen.sensors() {
        let subset: Vec<_> = records
            .iter()
            .zip(&samples)
            .filter(|(_, s)| s.sensor == sensor)
            .map(|(r, _)| r.clone())
            .collect();
        if let Ok(report) = compute_metrics(&subset) {
            per_sensor.insert(sensor, report);
        }
    }
    let per: Vec<MetricsReport> = per_sensor.values().copied().collect();
    let summary = EvalSummary {
        protocol: split.protocol,
        subset,
        train_sensors: split.train_sensors.clone(),
        test_sensors: split.effective_test_sensors().to_vec(),
        held_out_materials: split.held_out_materials.clone(),
        n_samples: samples.len(),
        metrics,
        mean_of_sensors: if per.is_empty() { metrics } else { mean_report(&per)? },
        per_sensor,
        bpcer_at_apcer: bpcer_at_apcer(&curve, cfg.eval.apcer_target),
    };
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    write_scores_csv(&records, out.join("scores.csv"))?;
    write_det_csv(&curve, out.join("det.csv"))?;
    write_json(&summary, &out.join("metrics.json"))?;
    println!(
        "{} on {} samples: APCER {:.2}%  BPCER {:.2}%  ACE {:.2}%  accuracy {:.2}%",
        split.protocol.as_str(),
        samples.len(),
        metrics.apcer,
        metrics.bpcer,
        metrics.ace,
        metrics.accuracy
    );
    Ok(())
}

pub const DEFAULT_BENCH_SHAPES: &str =
    "3x32x64x56,3x64x128x56,3x128x128x28,3x256x256x14,3x512x512x7,3x8x64x7,5x16x32x16";

/// Parses `DkxXxYxDy` items separated by commas.
pub fn parse_shapes(spec: &str) -> Result<Vec<ConvShape>> {
    spec.split(',')
        .map(|item| {
            let dims: Vec<u64> = item
                .trim()
                .split('x')
                .map(|d| d.parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("shape {item:?} is not DkxXxYxDy")))?;
            match dims[..] {
                [k, x, y, d] if k % 2 == 1 => ConvShape::new(k, x, y, d),
                [_, _, _, _] => Err(Error::Config(format!(
                    "shape {item:?}: kernel extent must be odd for same padding"
                ))),
                _ => Err(Error::Config(format!("shape {item:?} is not DkxXxYxDy"))),
            }
        })
        .collect()
}

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn bench_conv(shapes: &[ConvShape], out: &Path, repeats: usize, seed_value: u64) -> Result<()> {
    let mut csv = String::from(
        "shape,analytic_standard,analytic_separable,measured_standard,measured_separable,standard_seconds,separable_seconds,speedup,measured_time_ratio\n",
    );
    let mut rng = seed::rng(seed::derive(seed_value, "bench-conv"));
    for s in shapes {
        let (k, x, y, d) = (
            s.kernel as usize,
            s.in_channels as usize,
            s.out_channels as usize,
            s.spatial as usize,
        );
        let input = Tensor::from_vec([1, x, d, d], random_vec(&mut rng, x * d * d))?;
        let standard = ConvKernel::standard(y, x, k, random_vec(&mut rng, y * x * k * k))?;
        let depthwise = ConvKernel::depthwise(x, k, random_vec(&mut rng, x * k * k))?;
        let pointwise = ConvKernel::pointwise(y, x, random_vec(&mut rng, y * x))?;

        let mut std_count = MacCounter::default();
        conv2d_counted(&input, &standard, &mut std_count)?;
        let mut sep_count = MacCounter::default();
        let mid = conv2d_counted(&input, &depthwise, &mut sep_count)?;
        conv2d_counted(&mid, &pointwise, &mut sep_count)?;

        let time = |f: &dyn Fn() -> Result<Tensor>| -> Result<f64> {
            let start = Instant::now();
            for _ in 0..repeats.max(1) {
                f()?;
            }
            Ok(start.elapsed().as_secs_f64() / repeats.max(1) as f64)
        };
        let t_std = time(&|| conv2d(&input, &standard))?;
        let t_sep = time(&|| conv2d(&conv2d(&input, &depthwise)?, &pointwise))?;
        csv.push_str(&format!(
            "{k}x{x}x{y}x{d},{},{},{},{},{t_std:.6},{t_sep:.6},{},{:.4}\n",
            flop_cost(*s, ConvVariant::Standard).mult_adds,
            flop_cost(*s, ConvVariant::DepthwiseSeparable).mult_adds,
            std_count.report().mult_adds,
            sep_count.report().mult_adds,
            speedup_ratio(*s),
            t_std / t_sep,
        ));
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    fs::write(out, &csv).map_err(|e| Error::io(out, e))?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct LatencyReport {
    input_size: usize,
    width_multiplier: f64,
    repeats: usize,
    mean_ms: f64,
    min_ms: f64,
    reference_ms: f64,
}

pub fn bench_latency(model: &ModelConfig, repeats: usize, out: Option<&Path>, seed_value: u64) -> Result<()> {
    let params = build_model(model, seed::derive(seed_value, "model"))?;
    let mut rng = seed::rng(seed::derive(seed_value, "bench-latency"));
    let s = model.input_size;
    let image = Tensor::from_vec(
        [1, model.input_channels, s, s],
        (0..s * s * model.input_channels).map(|_| rng.random()).collect(),
    )?;
    predict_scores(&params, &image)?;
    let mut times = Vec::new();
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        predict_scores(&params, &image)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let report = LatencyReport {
        input_size: s,
        width_multiplier: model.width_multiplier,
        repeats: times.len(),
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        reference_ms: 95.0,
    };
    println!(
        "single-image eval inference at {s}x{s}: mean {:.1} ms, min {:.1} ms over {} runs (reference 95 ms)",
        report.mean_ms, report.min_ms, report.repeats
    );
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        write_json(&report, path)?;
    }
    Ok(())
}

/// Runs the gradient suite; returns whether every layer passed.
pub fn gradcheck(
    model: Option<ModelConfig>,
    tolerance: f64,
    seed_value: u64,
    fault: Option<CheckedLayer>,
) -> Result<bool> {
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::Config(format!(
            "tolerance must be non-negative, got {tolerance}"
        )));
    }
    let mut options = SuiteOptions {
        seed: seed_value,
        epsilon: DEFAULT_EPSILON,
        fault,
        ..SuiteOptions::default()
    };
    if let Some(m) = model {
        m.validate()?;
        options.end_to_end = Some((m, 2));
    }
    let mut all = true;
    for check in run_suite(&options)? {
        let ok = check.passed(tolerance);
        all &= ok;
        let worst = check
            .reports
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map(|r| r.name.as_str())
            .unwrap_or("-");
        let skipped = match check.kinks_skipped() {
            0 => String::new(),
            n => format!(", {n} kink-crossing probes skipped"),
        };
        println!(
            "{:<16} max rel err {:.3e} over {} probes (worst: {worst}{skipped})  {}",
            check.layer.name(),
            check.max_rel_error(),
            check.checked(),
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "{}",
        if all {
            "all layers pass"
        } else {
            "gradient check FAILED"
        }
    );
    Ok(all)
}

pub fn default_out(cfg: &RunConfig, flag: Option<PathBuf>, fallback: &str) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}
