//! `dbcc` command line: train, encode, decode, eval, ablate and oracles.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dbcc::checkpoint;
use dbcc::config::lambda_presets;
use dbcc::experiment::{self, AblationOptions};
use dbcc::oracles::{self, OracleOptions, Suite};
use dbcc::train::{self, TrainConfig, TrainOutputs, Trainer};
use dbcc::{imageio, metrics, pipeline, synth, CodecNet32, Error, Metric, ModelConfig};

/// Marks failures caused by how the command was invoked.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// 2 for usage and configuration problems, 3 for bad data or bitstreams,
/// 1 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Contract(_) | Error::InvalidShape(_) => 2,
                Error::Format(_) | Error::Decode(_) | Error::Data(_) | Error::Image(_) | Error::Json(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

#[derive(Parser)]
#[command(name = "dbcc", version, about = "Dual-branch learned image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a folder of images.
    Train(TrainArgs),
    /// Compress an image into a .dbcc file.
    Encode(EncodeArgs),
    /// Decompress a .dbcc file into an image.
    Decode(DecodeArgs),
    /// Rate and quality of a model over a folder of images.
    Eval(EvalArgs),
    /// Train and compare the ablation variants at desk scale.
    Ablate(AblateArgs),
    /// Run the reference checks.
    Oracles(OracleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Mse,
    MsSsim,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Mse => Metric::Mse,
            MetricArg::MsSsim => Metric::MsSsim,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    /// N=128, M=320, 384x384 patches.
    Full,
    /// N=32, M=40, 64x64 patches.
    Desk,
}

#[derive(Args)]
struct TrainArgs {
    /// Folder of PNG/PPM training images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long, value_enum, default_value = "mse")]
    metric: MetricArg,
    /// Total iterations (defaults to the schedule of --scale).
    #[arg(long)]
    iters: Option<u64>,
    /// Checkpoint path; the CSV log goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    scale: Scale,
    /// JSON object overriding model fields, e.g. '{"n":64,"m":80}'.
    #[arg(long)]
    config: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Accept a lambda outside the presets.
    #[arg(long)]
    allow_custom: bool,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Patches cut from the images before training.
    #[arg(long)]
    patches: Option<usize>,
    /// Continue from the training state stored in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Print progress every this many iterations.
    #[arg(long, default_value_t = 50)]
    print_every: u64,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma list from ci, tb, groups; the full model is always included.
    #[arg(long, default_value = "ci,tb,groups")]
    variants: String,
    #[arg(long)]
    out: PathBuf,
    /// Training images; procedural scenes when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation images; procedural scenes when omitted.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    iters: u64,
    #[arg(long, default_value_t = 0.015)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Jsonl,
    Csv,
    Text,
}

#[derive(Args)]
struct OracleArgs {
    /// all, tensor, nn, codec, entropy, coder, grad, metrics, causality,
    /// pipeline or train.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
    /// Iterations of the training check.
    #[arg(long, default_value_t = 2000)]
    train_iters: u64,
    /// Training images for the training check.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Oracles(a) => cmd_oracles(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return Err(usage(format!("{what} {} is not a directory", p.display())));
    }
    Ok(())
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(usage(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<CodecNet32> {
    require_file(path, "model")?;
    let (net, _) = checkpoint::load::<f32>(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(net)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let metric = Metric::from(a.metric);
    if !(a.lambda > 0.0 && a.lambda.is_finite()) {
        return Err(usage(format!("--lambda must be positive, got {}", a.lambda)));
    }
    if dbcc::config::lambda_index(metric, a.lambda).is_none() && !a.allow_custom {
        return Err(usage(format!(
            "--lambda {} is not a {} preset ({:?}); pass --allow-custom to use it anyway",
            a.lambda,
            metric.as_str(),
            lambda_presets(metric)
        )));
    }
    require_dir(&a.data, "--data")?;
    let (mut model, mut cfg) = match a.scale {
        Scale::Full => (ModelConfig::full(a.lambda, metric), TrainConfig::full(a.lambda, metric)),
        Scale::Desk => {
            let mut m = ModelConfig::desk(a.lambda);
            m.metric = metric;
            let mut t = TrainConfig::desk(a.lambda, 2000);
            t.metric = metric;
            (m, t)
        }
    };
    if let Some(json) = &a.config {
        model = model.with_overrides(json).context("--config")?;
    }
    model.lambda = a.lambda;
    model.metric = metric;
    cfg.seed = a.seed;
    if let Some(v) = a.iters {
        cfg.total_iters = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.patch {
        cfg.patch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    cfg.validate()?;
    model.validate()?;

    let pool = a.patches.unwrap_or(match a.scale {
        Scale::Full => 512,
        Scale::Desk => 4096,
    });
    let data = train::make_patches::<f32>(&a.data, cfg.patch, pool, cfg.seed, true)?;
    let mut trainer = if a.resume {
        require_file(&a.out, "--out checkpoint to resume")?;
        let (net, state) = checkpoint::load::<f32>(&a.out)?;
        if net.config != model {
            return Err(usage("checkpoint model differs from the requested configuration"));
        }
        Trainer::resume(net, state, cfg)?
    } else {
        let net = CodecNet32::new(model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        Trainer::new(net, cfg)?
    };
    let log = a.out.with_extension("csv");
    let outputs = TrainOutputs {
        checkpoint: Some(a.out.clone()),
        log: Some(log.clone()),
        checkpoint_every: a.checkpoint_every,
    };
    let every = a.print_every.max(1);
    let start = std::time::Instant::now();
    train::train_loop(&mut trainer, &data, &outputs, |r| {
        if r.iter % every == 0 {
            eprintln!(
                "iter {:>7}  loss {:.4}  bpp {:.4}  psnr {:.2}  {:.0}s",
                r.iter,
                r.loss,
                r.bpp,
                r.psnr,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!("wrote {} and {}", a.out.display(), log.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_encode(a: EncodeArgs) -> Result<ExitCode> {
    let net = load_model(&a.model)?;
    require_file(&a.input, "--in image")?;
    let img = imageio::load_rgb::<f32>(&a.input)
        .map_err(|e| usage(format!("cannot read image {}: {e}", a.input.display())))?;
    let c = pipeline::compress(&net, &img)?;
    std::fs::write(&a.out, &c.bytes).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{:.6} bpp ({} bytes)", c.bpp(), c.bytes.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_decode(a: DecodeArgs) -> Result<ExitCode> {
    let net = load_model(&a.model)?;
    require_file(&a.input, "--in bitstream")?;
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let d = pipeline::decompress(&net, &bytes)?;
    imageio::save_rgb(&a.out, &d.image)?;
    println!("{}x{} -> {}", d.header.width, d.header.height, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let net = load_model(&a.model)?;
    require_dir(&a.data, "--data")?;
    let rows = experiment::evaluate_dir(&net, &a.data)?;
    metrics::write_rd_csv(&a.out, &rows)?;
    if let Some(avg) = rows.last() {
        println!("{} images: {:.4} bpp, {:.3} dB", rows.len() - 1, avg.bpp, avg.psnr);
    }
    Ok(ExitCode::SUCCESS)
}

/// Images of a folder as tensors, or `count` procedural scenes.
fn eval_images(dir: Option<&Path>, count: usize, seed: u64) -> Result<Vec<dbcc::Tensor32>> {
    match dir {
        Some(d) => {
            require_dir(d, "--eval-data")?;
            let set = train::load_images(d, 1)?;
            if set.images.is_empty() {
                bail!(Error::Data(format!("no usable images in {}", d.display())));
            }
            Ok(set.images.iter().map(|(_, im)| imageio::rgb_to_tensor(im)).collect())
        }
        None => Ok((0..count as u64)
            .map(|i| imageio::rgb_to_tensor(&synth::scene(192, 192, 1_000_000 + seed + i)))
            .collect()),
    }
}

fn cmd_ablate(a: AblateArgs) -> Result<ExitCode> {
    let variants = experiment::parse_variants(&a.variants).map_err(|e| usage(e.to_string()))?;
    let opts = AblationOptions::desk(a.lambda, a.iters, a.seed);
    opts.train.validate()?;
    let oracle_opts = OracleOptions {
        train_iters: a.iters,
        data_dir: a.data.clone(),
        seed: a.seed,
    };
    if let Some(d) = &a.data {
        require_dir(d, "--data")?;
    }
    let (patches, _) = oracles::smoke_data(&oracle_opts)?;
    let eval = eval_images(a.eval_data.as_deref(), 2, a.seed)?;
    let report = experiment::run_ablation(&variants, &opts, &patches, &eval, |v, r| {
        if r.iter % 50 == 0 {
            eprintln!("{v}: iter {} loss {:.4}", r.iter, r.loss);
        }
    })?;
    std::fs::write(&a.out, experiment::ablation_csv(&report.rows))?;
    print!("{}", experiment::ablation_csv(&report.rows));
    if let (Some(same), Some((copied, total))) = (report.y1_path_identical, report.shared_params) {
        println!("w/o CI with shared weights ({copied}/{total} tensors): y1-path bitstreams identical: {same}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracles(a: OracleArgs) -> Result<ExitCode> {
    let suite: Suite = a.suite.parse().map_err(|e: Error| usage(e.to_string()))?;
    let opts = OracleOptions {
        train_iters: a.train_iters,
        data_dir: a.data,
        seed: 0,
    };
    let reports = oracles::run_oracles_with(suite, &opts);
    let text = match a.format {
        ReportFormat::Jsonl => oracles::to_json_lines(&reports)?,
        ReportFormat::Csv => oracles::to_csv(&reports),
        ReportFormat::Text => reports.iter().map(|r| format!("{r}\n")).collect(),
    };
    match &a.out {
        Some(p) => std::fs::write(p, &text)?,
        None => print!("{text}"),
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    eprintln!("{} cases, {} failed", reports.len(), failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
