//! `deblurnet` — dataset synthesis, training, inference, evaluation, and
//! analysis behind one binary, so the manifest/checkpoint/CSV schemas have a
//! single owner.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, bad
//! config, empty input). Every run starts by echoing its resolved
//! configuration in `key = value` form; the train echo is itself a valid
//! config file, so any run can be reproduced from its log header alone.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deblurnet_core::checkpoint;
use deblurnet_core::config::TrainConfig;
use deblurnet_core::dataset::{self, WildOptions};
use deblurnet_core::train::{train, Pair};
use deblurnet_core::{eval, Error, ImageBuf, Result};

/// Environment override for the workspace root (`--root` wins over it).
const ROOT_ENV: &str = "DEBLURNET_ROOT";

#[derive(Parser)]
#[command(
    name = "deblurnet",
    version,
    about = "Single-image motion deblurring: data synthesis, training, inference, evaluation",
    long_about = None,
    propagate_version = true
)]
struct Cli {
    /// Workspace root that relative paths resolve against
    /// (default: $DEBLURNET_ROOT, else the current directory).
    #[arg(long, global = true, value_name = "DIR")]
    root: Option<PathBuf>,

    /// Upper bound on worker count. The numeric kernels run single-threaded
    /// so results are bit-reproducible; larger values are accepted and
    /// clamped to one worker.
    #[arg(long, global = true, default_value_t = 1,
          value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Average sharp video frames into blurry/sharp training pairs,
    /// gating clips by optical flow and frame-matching error.
    SynthWild(SynthWildArgs),
    /// Blur sharp images with random motion PSFs (shift-invariant pairs).
    SynthSi(SynthSiArgs),
    /// Train the pyramid network over a pair manifest.
    Train(TrainArgs),
    /// Restore a single image with a trained checkpoint.
    Deblur(DeblurArgs),
    /// Score every manifest pair against its sharp reference (PSNR CSV).
    Eval(EvalArgs),
    /// Correlate per-pair residual magnitude with estimated blur size.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SynthWildArgs {
    /// Directory of frame directories (or a single directory of frames).
    #[arg(long, value_name = "DIR")]
    frames: PathBuf,
    /// Output directory for pairs and the manifest.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Reject a clip when its high-percentile inter-frame flow magnitude
    /// exceeds this many pixels.
    #[arg(long, default_value_t = dataset::DEFAULT_FLOW_THRESHOLD)]
    threshold: f64,
    /// Percentile of the flow-magnitude distribution the threshold applies to.
    #[arg(long, default_value_t = dataset::DEFAULT_GATE_PERCENTILE)]
    gate_percentile: f64,
    /// Reject a clip when adjacent frames' RMS grayscale difference exceeds
    /// this (scene cuts, exposure jumps).
    #[arg(long, default_value_t = dataset::DEFAULT_MATCH_BOUND)]
    match_bound: f64,
    /// Area-average downsampling factor applied to the frames first.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    downsample: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthSiArgs {
    /// Directory of sharp images.
    #[arg(long, value_name = "DIR")]
    sharp: PathBuf,
    /// Output directory for pairs and the manifest.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of random blur kernels to draw; the default keeps desk-scale
    /// runs quick — full-scale datasets use orders of magnitude more.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    num_kernels: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Force the identity (delta) kernel — debugging aid; every blurry
    /// output then equals its sharp input.
    #[arg(long)]
    delta: bool,
    /// Also write each kernel, peak-normalized, as a grayscale PNG.
    #[arg(long)]
    dump_kernels: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Pair manifest (TSV) produced by synth-wild or synth-si.
    #[arg(long, value_name = "TSV")]
    manifest: PathBuf,
    /// Output directory for checkpoints and loss.csv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Config file (`key = value`); defaults apply for absent keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Individual overrides applied after the config file, e.g.
    /// `--set iterations=2000 --set seed=7`.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Checkpoint to resume from.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DeblurArgs {
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Blurry input image (PNG or PPM).
    #[arg(long, value_name = "IMAGE")]
    input: PathBuf,
    /// Restored output image; written at the input's exact size.
    #[arg(long, value_name = "IMAGE")]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "TSV")]
    manifest: PathBuf,
    /// Per-pair report CSV.
    #[arg(long, value_name = "CSV")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "TSV")]
    manifest: PathBuf,
    /// Standardized blur-size / residual series CSV (plot-ready).
    #[arg(long, value_name = "CSV")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 2 for errors the user can fix at the command line (bad config, empty
/// input); 1 for failures of the run itself.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::EmptyDataset(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

/// Resolves a path against the workspace root unless it is already absolute.
fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli
        .root
        .or_else(|| std::env::var_os(ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let r = root.as_path();

    match cli.command {
        Command::SynthWild(a) => cmd_synth_wild(r, cli.jobs, a),
        Command::SynthSi(a) => cmd_synth_si(r, cli.jobs, a),
        Command::Train(a) => cmd_train(r, cli.jobs, a),
        Command::Deblur(a) => cmd_deblur(r, cli.jobs, a),
        Command::Eval(a) => cmd_eval(r, cli.jobs, a),
        Command::Analyze(a) => cmd_analyze(r, cli.jobs, a),
    }
}

/// Echoes the resolved configuration. Lines are `key = value` so a run's log
/// header doubles as a config file; non-config wiring goes in `#` comments,
/// which the config parser skips.
fn echo_header(command: &str, root: &Path, jobs: u64, wiring: &[(&str, String)]) {
    println!("# deblurnet {command}");
    println!("# root = {}", root.display());
    println!("# jobs = {jobs}");
    for (key, value) in wiring {
        println!("# {key} = {value}");
    }
}

fn cmd_synth_wild(root: &Path, jobs: u64, a: SynthWildArgs) -> Result<()> {
    let frames = resolve(root, &a.frames);
    let out = resolve(root, &a.out);
    echo_header(
        "synth-wild",
        root,
        jobs,
        &[
            ("frames", frames.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );
    println!("threshold = {}", a.threshold);
    println!("gate_percentile = {}", a.gate_percentile);
    println!("match_bound = {}", a.match_bound);
    println!("downsample = {}", a.downsample);
    println!("seed = {}", a.seed);
    println!();

    let opts = WildOptions {
        threshold: a.threshold,
        gate_percentile: a.gate_percentile,
        match_bound: a.match_bound,
        downsample: a.downsample as usize,
        seed: a.seed,
    };
    let summary = dataset::synth_wild(&frames, &out, &opts)?;
    println!(
        "{} sequences: accepted {} clips, rejected {} (flow too large) + {} (matching error)",
        summary.sequences, summary.accepted, summary.rejected_flow, summary.rejected_match
    );
    println!("manifest: {}", summary.manifest_path.display());
    Ok(())
}

fn cmd_synth_si(root: &Path, jobs: u64, a: SynthSiArgs) -> Result<()> {
    let sharp = resolve(root, &a.sharp);
    let out = resolve(root, &a.out);
    echo_header(
        "synth-si",
        root,
        jobs,
        &[
            ("sharp", sharp.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );
    println!("num_kernels = {}", a.num_kernels);
    println!("seed = {}", a.seed);
    println!("delta = {}", a.delta);
    println!("dump_kernels = {}", a.dump_kernels);
    println!();

    let summary = dataset::synth_si(
        &sharp,
        &out,
        a.num_kernels as usize,
        a.seed,
        a.delta,
        a.dump_kernels,
    )?;
    println!("wrote {} pairs from {} kernels", summary.pairs, summary.kernels);
    println!("manifest: {}", summary.manifest_path.display());
    Ok(())
}

fn cmd_train(root: &Path, jobs: u64, a: TrainArgs) -> Result<()> {
    let manifest = resolve(root, &a.manifest);
    let out = resolve(root, &a.out);
    let resume = a.resume.as_ref().map(|p| resolve(root, p));

    let mut cfg = match &a.config {
        Some(path) => TrainConfig::from_file(&resolve(root, path))?,
        None => TrainConfig::default(),
    };
    for pair in &a.set {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(Error::Config(format!(
                "--set expects KEY=VALUE, got `{pair}`"
            )));
        };
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;

    let mut wiring = vec![
        ("manifest", manifest.display().to_string()),
        ("out", out.display().to_string()),
    ];
    if let Some(ckpt) = &resume {
        wiring.push(("resume", ckpt.display().to_string()));
    }
    echo_header("train", root, jobs, &wiring);
    print!("{}", cfg.echo());
    println!();

    let pairs: Vec<Pair> = dataset::load_pairs(&manifest)?
        .into_iter()
        .map(|(blur, sharp, _)| (blur, sharp))
        .collect();
    println!("loaded {} pairs", pairs.len());

    let report = train::<f32>(&pairs, &cfg, &out, resume.as_deref())?;
    if let Some(loss) = &report.final_loss {
        println!(
            "iteration {}: l1 {} l2 {} l3 {} total {}",
            report.iterations_run, loss.l1, loss.l2, loss.l3, loss.total
        );
    }
    println!("loss log: {}", report.log_path.display());
    if let Some(last) = report.checkpoints.last() {
        println!("checkpoint: {}", last.display());
    }
    Ok(())
}

fn load_net(path: &Path) -> Result<deblurnet_core::DeblurNet<f32>> {
    Ok(checkpoint::load::<f32>(path, false)?.net)
}

fn cmd_deblur(root: &Path, jobs: u64, a: DeblurArgs) -> Result<()> {
    let ckpt = resolve(root, &a.checkpoint);
    let input = resolve(root, &a.input);
    let output = resolve(root, &a.output);
    echo_header(
        "deblur",
        root,
        jobs,
        &[
            ("checkpoint", ckpt.display().to_string()),
            ("input", input.display().to_string()),
            ("output", output.display().to_string()),
        ],
    );
    println!();

    let net = load_net(&ckpt)?;
    let img = ImageBuf::load(&input)?;
    let restored = eval::deblur(&net, &img)?;
    restored.save(&output)?;
    println!(
        "wrote {} ({}x{})",
        output.display(),
        restored.width(),
        restored.height()
    );
    Ok(())
}

fn cmd_eval(root: &Path, jobs: u64, a: EvalArgs) -> Result<()> {
    let ckpt = resolve(root, &a.checkpoint);
    let manifest = resolve(root, &a.manifest);
    let out = resolve(root, &a.out);
    echo_header(
        "eval",
        root,
        jobs,
        &[
            ("checkpoint", ckpt.display().to_string()),
            ("manifest", manifest.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );
    println!();

    let net = load_net(&ckpt)?;
    let summary = eval::evaluate(&net, &manifest, &out)?;
    println!(
        "{} pairs: mean PSNR output {} dB, input {} dB",
        summary.records.len(),
        summary.mean_psnr_output,
        summary.mean_psnr_input
    );
    println!("report: {}", summary.csv_path.display());
    Ok(())
}

fn cmd_analyze(root: &Path, jobs: u64, a: AnalyzeArgs) -> Result<()> {
    let ckpt = resolve(root, &a.checkpoint);
    let manifest = resolve(root, &a.manifest);
    let out = resolve(root, &a.out);
    echo_header(
        "analyze",
        root,
        jobs,
        &[
            ("checkpoint", ckpt.display().to_string()),
            ("manifest", manifest.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );
    println!();

    let net = load_net(&ckpt)?;
    let summary = eval::residual_analysis(&net, &manifest, &out)?;
    match summary.pearson_r {
        Some(r) => println!("{} pairs: Pearson r = {r}", summary.pairs),
        None => println!(
            "{} pairs: correlation undefined (a series is constant)",
            summary.pairs
        ),
    }
    println!("series: {}", summary.csv_path.display());
    Ok(())
}
