use std::env;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use gunc_core::data::{
    generate_synthetic_dataset, load_image, resize_with_dots, save_png, Background, Dataset, Sample, Split,
    SplitCounts, SyntheticSceneSpec, MANIFEST_FILE,
};
use gunc_core::metrics::{
    evaluate, mean_gate_activations, DensityPredictor, EvalOptions, GameConvention, GroundTruthPredictor,
};
use gunc_core::net::Network;
use gunc_core::optim::{load_checkpoint, read_checkpoint_header, TraceRow, Trainer};
use gunc_core::tensor::Element;
use gunc_core::{data, Error};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{read_config_map, Precision, RunConfig, SigmaSetting, CONFIG_FILE};
use crate::{EvalArgs, GenDataArgs, InspectArgs, PredictArgs, TrainArgs, UsageError};

const SEED_ENV: &str = "GUNC_SEED";
const MODEL_FILE: &str = "model.json";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps core argument errors to usage errors; everything else stays a
/// runtime failure.
fn classify(e: Error) -> anyhow::Error {
    match e {
        Error::InvalidArgument(msg) => usage(msg),
        other => other.into(),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}: `{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Parses `a..b` (inclusive) or a single value.
fn parse_range<N: std::str::FromStr + Copy>(flag: &str, s: &str) -> Result<(N, N)> {
    let parse = |t: &str| {
        t.trim()
            .parse::<N>()
            .map_err(|_| usage(format!("--{flag}: `{s}` is not a range like 3..8")))
    };
    match s.split_once("..") {
        Some((lo, hi)) => Ok((parse(lo)?, parse(hi.trim_start_matches('='))?)),
        None => {
            let v = parse(s)?;
            Ok((v, v))
        }
    }
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(classify)
}

/// Loads one split, shrinking oversized images first when `max_side` is set.
fn load_split(data: &Path, split: Split, sigma: f64, max_side: Option<usize>) -> Result<Dataset> {
    let manifest = manifest_path(data);
    ensure!(manifest.is_file(), "{}: no dataset manifest found", manifest.display());
    let ds = Dataset::load(&manifest, split, sigma)?;
    let Some(max_side) = max_side else { return Ok(ds) };
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let (image, ann) = resize_with_dots(&s.image, &s.annotations, max_side)?;
            Sample::new(image, ann, sigma)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::from_samples(samples, sigma))
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let count_range = parse_range::<usize>("count", &args.count)?;
    let radius_range = parse_range::<f64>("radius", &args.radius)?;
    let background: Background = args.background.parse().map_err(classify)?;
    let spec = SyntheticSceneSpec {
        height: args.height,
        width: args.width,
        count_range,
        radius_range,
        background,
        seed,
    };
    spec.validate().map_err(classify)?;
    if args.images == 0 {
        return Err(usage("--images: must be ≥ 1"));
    }
    if args.val + args.test > args.images {
        return Err(usage(format!(
            "--val {} plus --test {} exceed --images {}",
            args.val, args.test, args.images
        )));
    }
    if is_nonempty_dir(&args.out) {
        if !args.force {
            return Err(usage(format!(
                "{} exists and is not empty; pass --force to replace it",
                args.out.display()
            )));
        }
        for name in ["images", "annotations"] {
            let dir = args.out.join(name);
            if dir.is_dir() {
                fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
            }
        }
    }
    let splits = SplitCounts {
        val: args.val,
        test: args.test,
    };
    let manifest = generate_synthetic_dataset(&spec, args.images, splits, &args.out)?;
    let dots: usize = manifest.entries.iter().map(|e| e.count).sum();
    println!(
        "wrote {} images ({} dots) to {}",
        manifest.entries.len(),
        dots,
        args.out.display()
    );
    Ok(())
}

/// Merges defaults, the run's saved config (on resume), `--config` and the
/// flags, in that order of increasing priority.
fn train_config(args: &TrainArgs, resume_dir: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(dir) = resume_dir {
        let saved = dir.join(CONFIG_FILE);
        if saved.is_file() {
            cfg = RunConfig::load(&saved)?;
        }
    }
    let mut file_sets_seed = resume_dir.is_some();
    if let Some(path) = &args.config {
        let map = read_config_map(path)?;
        file_sets_seed |= map.contains_key("train.seed");
        cfg = cfg.overlay(&map, &path.display().to_string())?;
    }
    match (args.seed, file_sets_seed) {
        (Some(seed), _) => cfg.seed = seed,
        (None, false) => {
            if let Some(seed) = env_seed()? {
                cfg.seed = seed;
            }
        }
        (None, true) => {}
    }

    let mut flags = Map::new();
    let mut set = |key: &str, v: Value| {
        flags.insert(key.to_string(), v);
    };
    if let Some(v) = &args.data {
        set("data.dir", json!(v));
    }
    if let Some(v) = &args.sigma {
        set("data.sigma", json!(SigmaSetting::parse(v)));
    }
    if let Some(v) = args.max_side {
        set("data.max_side", json!(v));
    }
    if let Some(v) = args.gated {
        set("net.gated", json!(v));
    }
    if let Some(v) = &args.fusion {
        set("net.fusion", json!(v));
    }
    if let Some(v) = &args.channels {
        set("net.encoder_channels", json!(v));
    }
    if args.narrow {
        set("net.encoder_channels", json!([8, 16, 32, 64, 128]));
    }
    if let Some(v) = &args.precision {
        set("train.precision", json!(v));
    }
    if let Some(v) = args.iters {
        set("train.iterations", json!(v));
    }
    if let Some(v) = args.batch {
        set("train.batch_size", json!(v));
    }
    if let Some(v) = &args.loss {
        set("train.loss", json!(v));
    }
    if let Some(v) = args.l2 {
        set("train.l2_scale", json!(v));
    }
    if let Some(v) = args.eval_every {
        set("train.eval_every", json!(v));
    }
    if let Some(v) = args.checkpoint_every {
        set("train.checkpoint_every", json!(v));
    }
    if let Some(v) = args.micro_batch {
        set("train.micro_batch", json!(v));
    }
    if let Some(v) = args.lr {
        set("train.lr", json!(v));
    }
    if let Some(v) = args.gamma {
        set("train.gamma", json!(v));
    }
    if let Some(v) = &args.out {
        set("run.out", json!(v));
    } else if let Some(dir) = resume_dir {
        set("run.out", json!(dir));
    }
    cfg.overlay(&flags, "flags")
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    spec: &'a gunc_core::net::NetworkSpec,
    gates: usize,
    parameters: usize,
}

fn write_model_summary<T: Element>(dir: &Path, net: &Network<T>) -> Result<()> {
    let summary = ModelSummary {
        spec: net.spec(),
        gates: net.gates().len(),
        parameters: net.count_parameters(),
    };
    let path = dir.join(MODEL_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn remove_stale_outputs(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if (name.starts_with("ckpt_") && name.ends_with(".gunc")) || name == "trace.csv" {
            fs::remove_file(&path).with_context(|| format!("removing {}", path.display()))?;
        }
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let resume = match &args.resume {
        Some(path) => Some((path.clone(), read_checkpoint_header(path)?)),
        None => None,
    };
    let resume_dir = resume.as_ref().map(|(p, _)| {
        p.parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf()
    });
    let mut cfg = train_config(args, resume_dir.as_deref())?;

    if let Some((path, header)) = &resume {
        cfg.seed = header.rng.seed;
        cfg.precision = match header.dtype.as_str() {
            "f64" => Precision::F64,
            _ => Precision::F32,
        };
        if cfg.iterations <= header.iteration {
            return Err(usage(format!(
                "train.iterations: {} must exceed the checkpoint's iteration {} ({})",
                cfg.iterations,
                header.iteration,
                path.display()
            )));
        }
        let mut saved = header.spec.clone();
        saved.seed = cfg.seed;
        if cfg.network_spec() != saved {
            return Err(usage(format!(
                "net: settings differ from the architecture stored in {}",
                path.display()
            )));
        }
    }
    let cfg = cfg.resolve()?;

    let out = cfg.out.clone();
    if resume.is_none() && is_nonempty_dir(&out) {
        if !args.force {
            return Err(usage(format!(
                "{} exists and is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        remove_stale_outputs(&out)?;
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.save(&out.join(CONFIG_FILE))?;

    let sigma = cfg.sigma_value()?;
    let train_ds = load_split(&cfg.data_dir, Split::Train, sigma, cfg.max_side)?;
    if train_ds.is_empty() {
        bail!("{}: the train split has no images", cfg.data_dir.display());
    }
    let val_ds = load_split(&cfg.data_dir, Split::Val, sigma, cfg.max_side)?;
    let val = (!val_ds.is_empty()).then_some(&val_ds);

    let resume_path = resume.as_ref().map(|(p, _)| p.as_path());
    match cfg.precision {
        Precision::F32 => run_training::<f32>(&cfg, &train_ds, val, resume_path, args.quiet),
        Precision::F64 => run_training::<f64>(&cfg, &train_ds, val, resume_path, args.quiet),
    }
}

fn run_training<T: Element>(
    cfg: &RunConfig,
    train_ds: &Dataset,
    val: Option<&Dataset>,
    resume: Option<&Path>,
    quiet: bool,
) -> Result<()> {
    let tc = cfg.train_config();
    let mut trainer = match resume {
        Some(path) => Trainer::resume(load_checkpoint::<T>(path)?, tc).map_err(classify)?,
        None => {
            let net = Network::<T>::build_with_std(&cfg.network_spec(), tc.init_std).map_err(classify)?;
            Trainer::new(net, tc).map_err(classify)?
        }
    };
    write_model_summary(&cfg.out, trainer.network())?;
    if !quiet {
        eprintln!(
            "training {} ({} parameters) for {} iterations from iteration {}",
            if cfg.gated { "GU-Net" } else { "U-Net" },
            trainer.network().count_parameters(),
            cfg.iterations,
            trainer.iteration()
        );
    }
    let report_every = cfg.eval_every.unwrap_or(1_000).max(1);
    let progress = |row: &TraceRow| {
        if quiet || (row.val_mae.is_none() && !row.iter.is_multiple_of(report_every)) {
            return;
        }
        match row.val_mae {
            Some(mae) => eprintln!("iter {:>7}  loss {:.6e}  val_mae {mae:.4}", row.iter, row.loss),
            None => eprintln!("iter {:>7}  loss {:.6e}", row.iter, row.loss),
        }
    };
    match trainer.run(train_ds, val, Some(&cfg.out), progress) {
        Ok(()) => {
            if !quiet {
                eprintln!("run written to {}", cfg.out.display());
            }
            Ok(())
        }
        Err(e @ Error::Diverged { .. }) => Err(anyhow::Error::new(e).context(format!(
            "training stopped; checkpoints written so far remain in {}",
            cfg.out.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

/// A checkpointed network of either precision.
enum AnyNetwork {
    F32(Network<f32>),
    F64(Network<f64>),
}

impl AnyNetwork {
    fn load(path: &Path) -> Result<Self> {
        let header = read_checkpoint_header(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        Ok(match header.dtype.as_str() {
            "f64" => AnyNetwork::F64(load_checkpoint::<f64>(path)?.network()?),
            _ => AnyNetwork::F32(load_checkpoint::<f32>(path)?.network()?),
        })
    }

    fn gated(&self) -> bool {
        match self {
            AnyNetwork::F32(n) => n.spec().gated,
            AnyNetwork::F64(n) => n.spec().gated,
        }
    }

    fn in_channels(&self) -> usize {
        match self {
            AnyNetwork::F32(n) => n.spec().in_channels,
            AnyNetwork::F64(n) => n.spec().in_channels,
        }
    }

    fn predict_image(&mut self, image: &data::Image) -> Result<data::DensityMap> {
        Ok(match self {
            AnyNetwork::F32(n) => data::tensor_to_density(&n.forward_any_size(&data::image_tensor(image))?, 0),
            AnyNetwork::F64(n) => data::tensor_to_density(&n.forward_any_size(&data::image_tensor(image))?, 0),
        })
    }

    fn gate_means(&mut self, ds: &Dataset) -> gunc_core::Result<Vec<(usize, f64)>> {
        match self {
            AnyNetwork::F32(n) => mean_gate_activations(n, ds),
            AnyNetwork::F64(n) => mean_gate_activations(n, ds),
        }
    }
}

impl DensityPredictor for AnyNetwork {
    fn predict(&mut self, sample: &Sample) -> gunc_core::Result<data::DensityMap> {
        match self {
            AnyNetwork::F32(n) => n.predict(sample),
            AnyNetwork::F64(n) => n.predict(sample),
        }
    }

    fn gate_activations(&self) -> Option<Vec<f64>> {
        match self {
            AnyNetwork::F32(n) => n.gate_activations(),
            AnyNetwork::F64(n) => n.gate_activations(),
        }
    }
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf()
}

/// The config saved beside a checkpoint, or defaults when there is none.
fn run_config_near(checkpoint: Option<&Path>) -> Result<RunConfig> {
    match checkpoint.map(|c| checkpoint_dir(c).join(CONFIG_FILE)) {
        Some(path) if path.is_file() => RunConfig::load(&path),
        _ => Ok(RunConfig::default()),
    }
}

fn resolve_data(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir.clone())
}

fn resolve_sigma(flag: Option<&str>, cfg: &RunConfig) -> Result<f64> {
    match flag {
        Some(s) => SigmaSetting::parse(s).resolve(),
        None => cfg.sigma_value(),
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let convention = match args.convention.as_str() {
        "sum" => GameConvention::Sum,
        "averaged" => GameConvention::Averaged,
        other => {
            return Err(usage(format!(
                "--convention: unknown `{other}` (expected sum or averaged)"
            )))
        }
    };
    let split = parse_split(&args.split)?;
    let cfg = run_config_near(args.checkpoint.as_deref())?;
    let data_dir = resolve_data(args.data.as_deref(), &cfg);
    let sigma = resolve_sigma(args.sigma.as_deref(), &cfg)?;
    let opts = EvalOptions {
        game_max: args.game_max,
        convention,
        keep_grids: args.grids,
    };
    let ds = load_split(&data_dir, split, sigma, cfg.max_side)?;
    let report = match (&args.checkpoint, args.oracle_gt) {
        (_, true) => evaluate(&mut GroundTruthPredictor, &ds, &opts)?,
        (Some(path), false) => evaluate(&mut AnyNetwork::load(path)?, &ds, &opts)?,
        (None, false) => return Err(usage("--checkpoint is required unless --oracle-gt is given")),
    };
    if convention == GameConvention::Sum && report.game[0].to_bits() != report.mae.to_bits() {
        bail!(
            "internal check failed: GAME(0) {} differs from MAE {}",
            report.game[0],
            report.mae
        );
    }

    let out = match (&args.out, &args.checkpoint) {
        (Some(out), _) => out.clone(),
        (None, Some(ckpt)) if !args.oracle_gt => checkpoint_dir(ckpt),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let json_path = out.join(format!("eval_{split}.json"));
    let csv_path = out.join(format!("eval_{split}.csv"));
    report.save(&json_path, &csv_path)?;

    let mut line = format!(
        "{split}: {} images  MAE {:.4}  MSE {:.4}",
        report.images.len(),
        report.mae,
        report.mse
    );
    for (s, g) in report.game.iter().enumerate() {
        let _ = write!(line, "  GAME({s}) {g:.4}");
    }
    println!("{line}");
    println!("reports: {} {}", json_path.display(), csv_path.display());
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let mut net = AnyNetwork::load(&args.checkpoint)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut failures = 0usize;
    for path in &args.images {
        let result = (|| -> Result<f64> {
            let image = load_image(path)?;
            if image.channels() != net.in_channels() {
                bail!(
                    "{}: image has {} channels, the model expects {}",
                    path.display(),
                    image.channels(),
                    net.in_channels()
                );
            }
            let map = net.predict_image(&image)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            map.save(&args.out.join(format!("{stem}.density")))?;
            save_png(&map.preview(), &args.out.join(format!("{stem}.png")))?;
            Ok(map.sum())
        })();
        match result {
            Ok(count) => println!("{}\t{count:.4}", path.display()),
            Err(e) => {
                failures += 1;
                eprintln!("error: {}", crate::error_chain(&e));
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} images failed", args.images.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct GateEntry {
    skip: usize,
    mean_activation: f64,
}

#[derive(Serialize)]
struct GateReport {
    checkpoint: PathBuf,
    split: Split,
    images: usize,
    gates: Vec<GateEntry>,
}

pub fn inspect_gates(args: &InspectArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let mut net = AnyNetwork::load(&args.checkpoint)?;
    if !net.gated() {
        return Err(anyhow::Error::new(Error::Ungated).context(format!("{}", args.checkpoint.display())));
    }
    let cfg = run_config_near(Some(&args.checkpoint))?;
    let data_dir = resolve_data(args.data.as_deref(), &cfg);
    let ds = load_split(&data_dir, split, cfg.sigma_value()?, cfg.max_side)?;
    let means = net.gate_means(&ds)?;
    let report = GateReport {
        checkpoint: args.checkpoint.clone(),
        split,
        images: ds.len(),
        gates: means
            .iter()
            .map(|&(skip, mean_activation)| GateEntry { skip, mean_activation })
            .collect(),
    };

    let out = args.out.clone().unwrap_or_else(|| checkpoint_dir(&args.checkpoint));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let json_path = out.join("gates.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", json_path.display()))?;
    let mut csv = String::from("skip,mean_activation\n");
    for g in &report.gates {
        let _ = writeln!(csv, "{},{}", g.skip, g.mean_activation);
    }
    let csv_path = out.join("gates.csv");
    fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    for g in &report.gates {
        println!("skip {}: {:.6}", g.skip, g.mean_activation);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_parse() {
        assert_eq!(parse_range::<usize>("count", "3..8").unwrap(), (3, 8));
        assert_eq!(parse_range::<usize>("count", "3..=8").unwrap(), (3, 8));
        assert_eq!(parse_range::<usize>("count", "4").unwrap(), (4, 4));
        assert_eq!(parse_range::<f64>("radius", "2.5..4").unwrap(), (2.5, 4.0));
        let err = parse_range::<usize>("count", "three").unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn argument_errors_are_usage_errors() {
        let e = classify(Error::InvalidArgument("x".into()));
        assert!(e.downcast_ref::<UsageError>().is_some());
        let e = classify(Error::Ungated);
        assert!(e.downcast_ref::<UsageError>().is_none());
    }
}
