use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use depthrefine::eval::{self, EvalOptions, ErrorSamples};
use depthrefine::imaging::shading_image;
use depthrefine::io::{self, Manifest};
use depthrefine::refine::HeadMode;
use depthrefine::scenegen::{generate_dataset, SceneSpec};
use depthrefine::stereo::{compute_dataset_baselines, MatchParams};
use depthrefine::trainer::{self, TrainConfig};
use depthrefine::CameraRig;

/// Depth refinement for stereo reconstruction: data generation, block
/// matching baseline, network training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "depthrefine", version)]
struct Cli {
    /// Seed for scene generation and network training.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic stereo dataset with ground truth.
    Gen(GenArgs),
    /// Compute census block-matching disparity for every sample.
    Baseline(BaselineArgs),
    /// Register an external disparity map as a sample's baseline.
    Ingest(IngestArgs),
    /// Train the refinement network.
    Train(TrainArgs),
    /// Score baseline and refined depth.
    Eval(EvalArgs),
    /// Re-bin evaluation errors and fit the quadratic trend.
    Analyze(AnalyzeArgs),
    /// Write shading images of ground-truth, baseline and refined depth.
    Shade(ShadeArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 192)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long = "baseline-m", default_value_t = 0.54)]
    baseline_m: f64,
    #[arg(long = "focal-px", default_value_t = 480.0)]
    focal_px: f64,
    #[arg(long, default_value_t = 6)]
    objects: usize,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 128)]
    dmax: usize,
    #[arg(long, default_value_t = 5)]
    census: usize,
    #[arg(long, default_value_t = 7)]
    agg: usize,
    #[arg(long = "lr-threshold", default_value_t = 1.0)]
    lr_threshold: f64,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    data: PathBuf,
    /// Sample directory name as listed in the manifest.
    #[arg(long)]
    sample: String,
    #[arg(long)]
    pfm: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value = "mul", value_parser = ["mul", "add"])]
    head: String,
    #[arg(long = "ckpt-out")]
    ckpt_out: PathBuf,
    #[arg(long, default_value_t = 128.0)]
    dmax: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Without a checkpoint only the baseline is scored.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 128.0)]
    dmax: f64,
    #[arg(long = "report-dir")]
    report_dir: PathBuf,
    #[arg(long = "bin-width", default_value_t = 1.0)]
    bin_width: f64,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long = "report-dir")]
    report_dir: PathBuf,
    #[arg(long = "bin-width", default_value_t = 1.0)]
    bin_width: f64,
}

#[derive(Debug, Args)]
struct ShadeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128.0)]
    dmax: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // usage errors exit 2, --help and --version exit 0
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    println!("# seed={} threads={}", cli.seed, rayon::current_num_threads());
    match &cli.command {
        Command::Gen(a) => gen(cli.seed, a),
        Command::Baseline(a) => baseline(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(cli.seed, a),
        Command::Eval(a) => evaluate(a),
        Command::Analyze(a) => analyze(a),
        Command::Shade(a) => shade(a),
    }
}

fn gen(seed: u64, a: &GenArgs) -> Result<()> {
    let spec = SceneSpec {
        seed,
        width: a.width,
        height: a.height,
        rig: CameraRig::new(a.baseline_m, a.focal_px)?,
        object_count: a.objects,
        ..SceneSpec::default()
    };
    println!("# gen {spec:?} count={} out={}", a.count, a.out.display());
    let manifest = generate_dataset(&spec, a.count, &a.out)?;
    println!("wrote {} samples to {}", manifest.len(), a.out.display());
    Ok(())
}

fn baseline(a: &BaselineArgs) -> Result<()> {
    let p = MatchParams {
        d_max: a.dmax,
        census_window: a.census,
        agg_window: a.agg,
        lr_threshold: a.lr_threshold,
    };
    println!("# baseline {p:?} data={}", a.data.display());
    let n = compute_dataset_baselines(&a.data, &p)?;
    println!("computed baseline disparity for {n} samples");
    Ok(())
}

fn ingest(a: &IngestArgs) -> Result<()> {
    println!("# ingest data={} sample={} pfm={}", a.data.display(), a.sample, a.pfm.display());
    let manifest = Manifest::read(&a.data)?;
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.sample_dir() == Path::new(&a.sample))
        .with_context(|| format!("no sample {} in the manifest", a.sample))?;
    io::ingest_external_disparity(&a.data, entry, &a.pfm)?;
    println!("registered {} as baseline of {}", a.pfm.display(), a.sample);
    Ok(())
}

fn train(seed: u64, a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        head: a.head.parse::<HeadMode>()?,
        seed,
        d_max: a.dmax,
        ..TrainConfig::default()
    };
    println!("# train {cfg:?} data={} ckpt_out={}", a.data.display(), a.ckpt_out.display());
    let outcome = trainer::train(&a.data, &cfg, &a.ckpt_out)?;
    let last = outcome.log.last().expect("at least one epoch");
    let (best, log) = trainer::companion_paths(&a.ckpt_out);
    println!(
        "final train_loss {:.6}; wrote {}, {}, {}",
        last.train_loss,
        a.ckpt_out.display(),
        best.display(),
        log.display()
    );
    Ok(())
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        d_max: a.dmax,
        bin_width_m: a.bin_width,
        ..EvalOptions::default()
    };
    println!(
        "# eval {opts:?} data={} ckpt={:?} report_dir={}",
        a.data.display(),
        a.ckpt,
        a.report_dir.display()
    );
    let net = a.ckpt.as_deref().map(io::load_checkpoint).transpose()?;
    let report = eval::evaluate(&a.data, net.as_ref(), &opts)?;
    eval::write_report(&report, &a.report_dir)?;
    print!("{}", eval::report_csv(&report));
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    println!("# analyze report_dir={} bin_width={}", a.report_dir.display(), a.bin_width);
    let report_path = a.report_dir.join("report.csv");
    let text = std::fs::read_to_string(&report_path).with_context(|| format!("reading {}", report_path.display()))?;
    let variants: Vec<&str> = text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').next())
        .filter(|v| !v.is_empty())
        .collect();
    if variants.is_empty() {
        bail!("{} lists no variants", report_path.display());
    }
    let mut fits = String::from("variant,a2,a1,a0,bins\n");
    for v in variants {
        let path = a.report_dir.join(format!("errors_{v}.tsv"));
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let errors: ErrorSamples = eval::parse_errors_tsv(&text, &path)?;
        let bins = errors.bin_medians(a.bin_width)?;
        io::write_atomic(
            &a.report_dir.join(format!("analysis_bins_{v}.csv")),
            eval::bins_csv(&bins).as_bytes(),
        )?;
        let series: Vec<(f64, f64)> = bins.iter().map(|b| (b.center_m, b.median_error_mm)).collect();
        let (a2, a1, a0) = eval::quadfit(&series).with_context(|| format!("fitting {v}"))?;
        fits.push_str(&format!("{v},{a2:.9e},{a1:.9e},{a0:.9e},{}\n", bins.len()));
    }
    io::write_atomic(&a.report_dir.join("quadfit.csv"), fits.as_bytes())?;
    print!("{fits}");
    Ok(())
}

fn shade(a: &ShadeArgs) -> Result<()> {
    println!(
        "# shade data={} ckpt={:?} eps={} out={}",
        a.data.display(),
        a.ckpt,
        a.eps,
        a.out.display()
    );
    let net = a.ckpt.as_deref().map(io::load_checkpoint).transpose()?;
    let manifest = Manifest::read(&a.data)?;
    for entry in &manifest.entries {
        let rec = io::read_sample(&a.data, &manifest.rig, entry)?;
        let dir = a.out.join(entry.sample_dir());
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        io::write_pnm(&shading_image(&rec.z_gt, a.eps)?, &dir.join("shade_gt.pgm"))?;
        if rec.d_baseline.is_none() {
            continue;
        }
        let prepared = depthrefine::refine::PreparedSample::from_record(&rec, a.dmax, 100.0)?;
        io::write_pnm(&shading_image(&prepared.z_a, a.eps)?, &dir.join("shade_baseline.pgm"))?;
        if let Some(net) = &net {
            let z = net.refine(&prepared)?;
            io::write_pnm(&shading_image(&z, a.eps)?, &dir.join("shade_refined.pgm"))?;
        }
    }
    println!("wrote shading images for {} samples to {}", manifest.len(), a.out.display());
    Ok(())
}
