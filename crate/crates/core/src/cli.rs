//! The `addmark` command line. Each subcommand echoes its resolved config
//! and the crate version on stderr, writes machine-readable results to
//! stdout, and returns 0 on success, 1 on a failed check, 2 on bad input.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::codec::{calibrate_threshold, detect, embed, inner_products, score, Dictionary, DetectionMode};
use crate::distortions::{default_pool, identity_pool, Distortion};
use crate::error::{Error, Result};
use crate::eval::{
    benchmark, evaluate_images, run_theory_check, smooth_field_images, sweep, sweep_medians,
    write_sweep_csv, SweepGrid, TheoryConfig,
};
use crate::io::{list_images, read_image, write_image, ImageFormat};
use crate::loss::MarginLoss;
use crate::tensor::{psnr, sample_uniform_message, ImageTensor, Message, SeededRng, ValueRange};
use crate::trainer::{train, write_log_csv, TrainConfig, WatermarkSet};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "addmark", version, about = "Additive multi-bit image watermarking")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "ADDMARK_THREADS")]
    threads: Option<usize>,
    /// Primary output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a watermark from a directory of images.
    Train(TrainArgs),
    /// Embed a message into one image.
    Embed(EmbedArgs),
    /// Detect a watermark and decode its message.
    Detect(DetectArgs),
    /// Decode a message; also detects when a threshold is available.
    Decode(DetectArgs),
    /// Calibrate a detection threshold on unwatermarked images.
    Calibrate(CalibrateArgs),
    /// PSNR, per-distortion bit accuracy and AUROC on a test directory.
    Eval(EvalArgs),
    /// Train (or build) a watermark on the Gaussian model and check it.
    TheoryCheck(TheoryArgs),
    /// Retrain over a beta or n grid and report PSNR and bit accuracy.
    Sweep(SweepArgs),
    /// Time embedding and decoding per image.
    Bench(BenchArgs),
    /// Write synthetic smooth-field images.
    GenData(GenArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Pool {
    Identity,
    Default,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Range {
    Unit,
    Byte,
}

impl From<Range> for ValueRange {
    fn from(r: Range) -> Self {
        match r {
            Range::Unit => ValueRange::Unit,
            Range::Byte => ValueRange::Byte,
        }
    }
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long, short = 'k')]
    bits: Option<usize>,
    #[arg(long)]
    beta_alg: Option<f64>,
    /// Penalty in theory units; multiplied by D to get `beta_alg`.
    #[arg(long, conflicts_with = "beta_alg")]
    beta_theory: Option<f64>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<MarginLoss>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    tail_average: Option<f64>,
    #[arg(long)]
    precondition_rank: Option<usize>,
    #[arg(long, value_enum)]
    pool: Option<Pool>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of training images.
    #[arg(long)]
    data: PathBuf,
    /// Training log CSV; defaults to the watermark path with `.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Value range the images are converted to before training.
    #[arg(long, value_enum, default_value = "unit")]
    range: Range,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    watermark: PathBuf,
    /// Message as a string of `+` and `-`, one per bit.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    message: Option<String>,
    /// Draw a uniform random message from `--seed`.
    #[arg(long)]
    random: bool,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    watermark: PathBuf,
    /// Message dictionary, one `+-` string per line.
    #[arg(long)]
    dictionary: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["alpha", "calibration_dir"])]
    threshold: Option<f64>,
    /// Target false-positive rate; requires `--calibration-dir`.
    #[arg(long, requires = "calibration_dir")]
    alpha: Option<f64>,
    /// Unwatermarked images used to calibrate the threshold.
    #[arg(long, requires = "alpha")]
    calibration_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    watermark: PathBuf,
    /// Unwatermarked images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    dictionary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    watermark: PathBuf,
    /// Test images.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct TheoryArgs {
    /// Use the ideal watermark instead of training.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    beta_theory: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, short = 'k')]
    bits: Option<usize>,
    #[arg(long)]
    sigma_eps: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum GridKind {
    Beta,
    N,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Training images.
    #[arg(long)]
    data: PathBuf,
    /// Test images.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum)]
    grid: GridKind,
    /// Grid values: beta multipliers or training-set sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "unit")]
    range: Range,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    watermark: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FileKind {
    Png,
    Addt,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// `CxHxW`.
    #[arg(long, default_value = "3x64x64", value_parser = parse_shape)]
    shape: (usize, usize, usize),
    /// Blur width of the underlying noise, in pixels.
    #[arg(long, default_value_t = 3.0)]
    smoothness: f64,
    /// Pixel standard deviation around mid-gray.
    #[arg(long, default_value_t = 0.15)]
    contrast: f64,
    #[arg(long, value_enum, default_value = "png")]
    format: FileKind,
}

fn parse_loss(s: &str) -> std::result::Result<MarginLoss, String> {
    s.parse::<MarginLoss>().map_err(|e| e.to_string())
}

fn parse_shape(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("bad shape `{s}`: {e}"))?;
    match parts.as_slice() {
        [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok((*c, *h, *w)),
        _ => Err(format!("shape must be CxHxW with positive sizes, got `{s}`")),
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        // Fails harmlessly when a pool already exists in this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } => 1,
        _ => 2,
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Embed(a) => cmd_embed(cli, a),
        Command::Detect(a) => cmd_detect(cli, a, true),
        Command::Decode(a) => cmd_detect(cli, a, false),
        Command::Calibrate(a) => cmd_calibrate(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::TheoryCheck(a) => cmd_theory(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
        Command::GenData(a) => cmd_gen(cli, a),
    }
}

fn echo(command: &str, config: &impl Serialize) {
    let text = serde_json::to_string(config).unwrap_or_default();
    eprintln!("addmark {VERSION} {command} {text}");
}

/// Writes one line to stdout. A closed pipe (`addmark ... | head`) is not an error.
fn say(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}").and_then(|_| out.flush());
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    say(&text);
    if let Some(p) = out {
        fs::write(p, format!("{text}\n")).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// PSNR as JSON: a number, or `"inf"` for identical images.
fn psnr_value(db: f64) -> Value {
    if db.is_infinite() {
        json!("inf")
    } else {
        json!(db)
    }
}

fn read_config(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(p) = path else {
        return Ok(Map::new());
    };
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    match serde_json::from_str::<Value>(&text)? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Format {
            what: "config file",
            reason: "top level must be a JSON object".into(),
        }),
    }
}

fn set(map: &mut Map<String, Value>, key: &str, value: Option<impl Serialize>) -> Result<()> {
    if let Some(v) = value {
        map.insert(key.to_string(), serde_json::to_value(v)?);
    }
    Ok(())
}

fn train_config(cli: &Cli, o: &TrainOverrides, dim: usize) -> Result<TrainConfig> {
    let mut map = read_config(cli.config.as_deref())?;
    if o.bits.is_some() {
        map.remove("K");
    }
    set(&mut map, "bits", o.bits)?;
    set(&mut map, "beta_alg", o.beta_alg)?;
    set(&mut map, "beta_alg", o.beta_theory.map(|b| b * dim as f64))?;
    set(&mut map, "loss", o.loss)?;
    set(&mut map, "epochs", o.epochs)?;
    set(&mut map, "batch_size", o.batch_size)?;
    set(&mut map, "learning_rate", o.learning_rate)?;
    set(&mut map, "tail_average", o.tail_average)?;
    set(&mut map, "precondition_rank", o.precondition_rank)?;
    set(
        &mut map,
        "distortion_pool",
        o.pool.map(|p| match p {
            Pool::Identity => identity_pool(),
            Pool::Default => default_pool(),
        }),
    )?;
    set(&mut map, "seed", cli.seed)?;
    if !map.contains_key("bits") && !map.contains_key("K") {
        return Err(Error::param("bits", "give --bits or set it in --config"));
    }
    if !map.contains_key("beta_alg") {
        return Err(Error::param(
            "beta_alg",
            "give --beta-alg, --beta-theory, or set beta_alg in --config",
        ));
    }
    let cfg: TrainConfig = serde_json::from_value(Value::Object(map))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads every image in `dir`, converted to `range`; all must share a shape.
fn load_dir(dir: &Path, range: ValueRange) -> Result<Vec<ImageTensor>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Empty("readable images in directory"));
    }
    let images = paths
        .iter()
        .map(|p| read_image(p).map(|x| x.converted(range)))
        .collect::<Result<Vec<_>>>()?;
    for img in &images[1..] {
        images[0].same_shape(img)?;
    }
    Ok(images)
}

fn load_dictionary(path: Option<&Path>, w: &WatermarkSet) -> Result<Option<Dictionary>> {
    let Some(p) = path else {
        return Ok(None);
    };
    let dict = Dictionary::load(p)?;
    if dict.bits() != w.bits() {
        return Err(Error::BitCountMismatch {
            expected: w.bits(),
            actual: dict.bits(),
        });
    }
    Ok(Some(dict))
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<i32> {
    let data = load_dir(&a.data, a.range.into())?;
    let cfg = train_config(cli, &a.overrides, data[0].dim())?;
    echo("train", &cfg);
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("watermark.addwm"));
    let log_path = a.log.clone().unwrap_or_else(|| out.with_extension("csv"));
    let outcome = train(&data, &cfg)?;
    outcome.watermark.save(&out)?;
    write_log_csv(&log_path, &outcome.log)?;
    let last = outcome.log.last();
    emit(
        &json!({
            "watermark": out,
            "log": log_path,
            "images": data.len(),
            "bits": outcome.watermark.bits(),
            "dim": outcome.watermark.dim(),
            "steps": outcome.steps,
            "final_mean_loss": last.map(|l| l.mean_loss),
            "norms_sq": outcome.watermark.norms_sq(),
        }),
        None,
    )?;
    Ok(0)
}

fn cmd_embed(cli: &Cli, a: &EmbedArgs) -> Result<i32> {
    let out = cli.out.as_deref().ok_or(Error::param("out", "embed needs --out"))?;
    let format = ImageFormat::from_path(out).ok_or_else(|| Error::Format {
        what: "image path",
        reason: format!("unsupported extension: {}", out.display()),
    })?;
    let w = WatermarkSet::load(&a.watermark)?;
    let message = match &a.message {
        Some(s) => Message::parse(s)?,
        None => sample_uniform_message(w.bits(), &mut SeededRng::new(cli.seed.unwrap_or(0), 0))?,
    };
    echo(
        "embed",
        &json!({
            "image": a.image,
            "watermark": a.watermark,
            "message": message,
            "out": out,
            "seed": cli.seed,
        }),
    );
    let x = read_image(&a.image)?.converted(w.value_range());
    let clip = format.is_displayable();
    let marked = embed(&x, &message, &w, clip)?;
    write_image(out, &marked)?;
    let db = psnr(&x, &marked, w.value_range().max_value())?;
    emit(
        &json!({ "message": message, "psnr_db": psnr_value(db), "clipped": clip }),
        None,
    )?;
    Ok(0)
}

fn calibration_scores(dir: &Path, w: &WatermarkSet, dict: Option<&Dictionary>) -> Result<Vec<f64>> {
    load_dir(dir, w.value_range())?
        .iter()
        .map(|x| score(&inner_products(x, w)?, dict))
        .collect()
}

fn cmd_detect(cli: &Cli, a: &DetectArgs, need_threshold: bool) -> Result<i32> {
    let w = WatermarkSet::load(&a.watermark)?;
    let dict = load_dictionary(a.dictionary.as_deref(), &w)?;
    let name = if need_threshold { "detect" } else { "decode" };
    echo(
        name,
        &json!({
            "image": a.image,
            "watermark": a.watermark,
            "dictionary": a.dictionary,
            "threshold": a.threshold,
            "alpha": a.alpha,
            "calibration_dir": a.calibration_dir,
        }),
    );
    let threshold = match (a.threshold, a.alpha, &a.calibration_dir) {
        (Some(t), _, _) => Some(t),
        (None, Some(alpha), Some(dir)) => {
            Some(calibrate_threshold(&calibration_scores(dir, &w, dict.as_ref())?, alpha)?)
        }
        _ => None,
    };
    let x = read_image(&a.image)?.converted(w.value_range());
    let gamma = inner_products(&x, &w)?;
    match threshold {
        Some(t) => emit(&detect(&gamma, dict.as_ref(), t)?, cli.out.as_deref())?,
        None if need_threshold => {
            return Err(Error::param(
                "threshold",
                "give --threshold or --alpha with --calibration-dir",
            ))
        }
        None => {
            // No threshold: report the decoded message and the score only.
            let report = detect(&gamma, dict.as_ref(), f64::INFINITY)?;
            let s = report.s_dict.unwrap_or(report.s);
            emit(
                &json!({
                    "gamma": report.gamma,
                    "score": s,
                    "decoded": report.decoded,
                    "mode": report.mode,
                }),
                cli.out.as_deref(),
            )?;
        }
    }
    Ok(0)
}

fn cmd_calibrate(cli: &Cli, a: &CalibrateArgs) -> Result<i32> {
    let w = WatermarkSet::load(&a.watermark)?;
    let dict = load_dictionary(a.dictionary.as_deref(), &w)?;
    echo(
        "calibrate",
        &json!({ "watermark": a.watermark, "data": a.data, "alpha": a.alpha, "dictionary": a.dictionary }),
    );
    let scores = calibration_scores(&a.data, &w, dict.as_ref())?;
    let t = calibrate_threshold(&scores, a.alpha)?;
    let mode = if dict.is_some() {
        DetectionMode::Dictionary
    } else {
        DetectionMode::NoDictionary
    };
    emit(
        &json!({ "alpha": a.alpha, "threshold": t, "scores": scores.len(), "mode": mode }),
        cli.out.as_deref(),
    )?;
    Ok(0)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    let w = WatermarkSet::load(&a.watermark)?;
    let config = read_config(cli.config.as_deref())?;
    let distortions: Vec<Distortion> = match config.get("distortions") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => Distortion::defaults(),
    };
    for d in &distortions {
        d.validate()?;
    }
    let seed = cli.seed.unwrap_or(0);
    echo(
        "eval",
        &json!({ "watermark": a.watermark, "data": a.data, "distortions": distortions, "seed": seed }),
    );
    let images = load_dir(&a.data, w.value_range())?;
    let ev = evaluate_images(&w, &images, &distortions, &mut SeededRng::new(seed, 0))?;
    let mut value = serde_json::to_value(&ev)?;
    value["mean_psnr"] = psnr_value(ev.mean_psnr);
    emit(&value, cli.out.as_deref())?;
    Ok(0)
}

fn cmd_theory(cli: &Cli, a: &TheoryArgs) -> Result<i32> {
    let mut map = read_config(cli.config.as_deref())?;
    if a.oracle {
        map.insert("oracle".into(), json!(true));
    }
    set(&mut map, "beta_theory", a.beta_theory)?;
    set(&mut map, "n", a.n)?;
    set(&mut map, "trials", a.trials)?;
    set(&mut map, "bits", a.bits)?;
    set(&mut map, "sigma_eps", a.sigma_eps)?;
    set(&mut map, "epochs", a.epochs)?;
    set(&mut map, "seed", cli.seed)?;
    let cfg: TheoryConfig = serde_json::from_value(Value::Object(map))?;
    echo("theory-check", &cfg);
    let (report, _) = run_theory_check(&cfg)?;
    emit(&report, cli.out.as_deref())?;
    let failures = report.failures();
    if failures.is_empty() {
        Ok(0)
    } else {
        for c in failures {
            eprintln!("FAILED {}: value {} limit {}", c.name, c.value, c.limit);
        }
        Ok(1)
    }
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<i32> {
    let train_images = load_dir(&a.data, a.range.into())?;
    let test = load_dir(&a.test, a.range.into())?;
    let base = train_config(cli, &a.overrides, train_images[0].dim())?;
    let grid = match a.grid {
        GridKind::Beta => SweepGrid::Beta(a.values.clone()),
        GridKind::N => SweepGrid::N(
            a.values
                .iter()
                .map(|&v| {
                    if v >= 1.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::param("values", format!("n grid needs positive integers, got {v}")))
                    }
                })
                .collect::<Result<_>>()?,
        ),
    };
    echo("sweep", &json!({ "grid": grid, "seeds": a.seeds, "base": base }));
    let rows = sweep(&grid, &base, &train_images, &test, &Distortion::defaults(), &a.seeds)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("sweep.csv"));
    write_sweep_csv(&out, &rows)?;
    let medians: Vec<Value> = sweep_medians(&rows)
        .into_iter()
        .map(|(v, p, b)| json!({ "value": v, "median_psnr": psnr_value(p), "median_avg_bit_accuracy": b }))
        .collect();
    emit(&json!({ "csv": out, "medians": medians }), None)?;
    Ok(0)
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<i32> {
    let w = WatermarkSet::load(&a.watermark)?;
    let seed = cli.seed.unwrap_or(0);
    echo(
        "bench",
        &json!({ "data": a.data, "watermark": a.watermark, "batch_size": a.batch_size, "seed": seed }),
    );
    let images = load_dir(&a.data, w.value_range())?;
    let report = benchmark(&w, &images, a.batch_size, &mut SeededRng::new(seed, 0))?;
    say(&format!("{:<8} {:>14} {:>12} {:>8}", "op", "mean_ms/image", "std_err_ms", "batches"));
    for (name, t) in [("embed", report.embed), ("decode", report.decode)] {
        say(&format!("{:<8} {:>14.6} {:>12.6} {:>8}", name, t.mean_ms, t.std_err_ms, t.batches));
    }
    if let Some(p) = cli.out.as_deref() {
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(p, format!("{text}\n")).map_err(|e| Error::io(p, e))?;
    }
    Ok(0)
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> Result<i32> {
    let out = cli.out.as_deref().ok_or(Error::param("out", "gen-data needs --out DIR"))?;
    let seed = cli.seed.unwrap_or(0);
    let ext = match a.format {
        FileKind::Png => "png",
        FileKind::Addt => "addt",
    };
    echo(
        "gen-data",
        &json!({
            "out": out, "count": a.count, "shape": [a.shape.0, a.shape.1, a.shape.2],
            "smoothness": a.smoothness, "contrast": a.contrast, "format": ext, "seed": seed,
        }),
    );
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let images = smooth_field_images(a.count, a.shape, a.smoothness, a.contrast, &mut SeededRng::new(seed, 0))?;
    for (i, img) in images.iter().enumerate() {
        write_image(&out.join(format!("img_{i:05}.{ext}")), img)?;
    }
    emit(&json!({ "out": out, "count": images.len() }), None)?;
    Ok(0)
}
