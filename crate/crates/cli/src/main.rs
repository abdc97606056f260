use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pdlf_core::dataset::Perturbation;
use pdlf_core::pipeline::{
    init_threads_from_env, run_stage, ExtractorKind, PipelineConfig, Stage, StageIo, StageReport,
};
use pdlf_core::Error;

/// Pairwise deep-learning-feature segmentation pipeline.
#[derive(Parser, Debug)]
#[command(name = "pdlf", version)]
struct Cli {
    /// TOML config; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for the stage's artifacts.
    #[arg(long, global = true, default_value = "pdlf-out")]
    out: PathBuf,

    /// Dataset directory read by the stage.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Seed for every seeded component.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    max_points: Option<usize>,

    #[arg(long, global = true)]
    concat_block: Option<usize>,

    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Foreground probability threshold for masks.
    #[arg(long, global = true)]
    threshold: Option<f32>,

    /// Validate the config and exit.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Shi-Tomasi interest points per image, as JSON.
    Detect,
    /// Patch feature files per image.
    Features(FeaturesArgs),
    /// Delaunay triangulation JSON and SVG overlay per image.
    Triangulate,
    /// Joint pairwise feature maps.
    Pair,
    /// Train the network; writes a checkpoint and loss history.
    Train,
    /// Masks for every image from the trained network.
    Segment,
    /// Per-image CSV and aggregate JSON metrics on the test part.
    Eval,
    /// Six-fold rotation and flip augmentation into a new dataset.
    Augment(SplitArgs),
    /// Generate a synthetic low-contrast dataset.
    Synth(SynthArgs),
    /// Copy a dataset with noise or brightness applied.
    Perturb(PerturbArgs),
    /// Run detect through eval in order.
    Run,
    /// Print the effective config as TOML.
    Config,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long, value_enum)]
    extractor: Option<ExtractorArg>,

    /// Directory of externally computed `<id>.pdlf` files.
    #[arg(long)]
    import_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExtractorArg {
    Builtin,
    Import,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Split augmented variants independently instead of per original.
    #[arg(long)]
    paper_split: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    contrast: Option<f32>,
    #[arg(long)]
    noise: Option<f32>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    #[arg(long, value_enum)]
    kind: PerturbKind,
    /// Percent: noise sigma, affected pixel share, or brightness change.
    #[arg(long, allow_hyphen_values = true)]
    percent: f32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PerturbKind {
    Gauss,
    SaltPepper,
    Brightness,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = cli.max_points {
        cfg.detector.max_points = n;
    }
    if let Some(k) = cli.concat_block {
        cfg.net.concat_block = k;
    }
    if let Some(e) = cli.epochs {
        cfg.train.epochs = e;
    }
    if let Some(t) = cli.threshold {
        cfg.threshold = t;
    }
    match &cli.command {
        Command::Features(a) => {
            if let Some(e) = a.extractor {
                cfg.features.extractor = match e {
                    ExtractorArg::Builtin => ExtractorKind::Builtin,
                    ExtractorArg::Import => ExtractorKind::Import,
                };
            }
            if a.import_dir.is_some() {
                cfg.features.import_dir.clone_from(&a.import_dir);
            }
        }
        Command::Synth(a) => {
            let s = &mut cfg.synth;
            s.count = a.count.unwrap_or(s.count);
            s.height = a.height.unwrap_or(s.height);
            s.width = a.width.unwrap_or(s.width);
            s.contrast = a.contrast.unwrap_or(s.contrast);
            s.noise_sigma = a.noise.unwrap_or(s.noise_sigma);
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stages(cmd: &Command) -> Vec<Stage> {
    match cmd {
        Command::Detect => vec![Stage::Detect],
        Command::Features(_) => vec![Stage::Features],
        Command::Triangulate => vec![Stage::Triangulate],
        Command::Pair => vec![Stage::Pair],
        Command::Train => vec![Stage::Train],
        Command::Segment => vec![Stage::Segment],
        Command::Eval => vec![Stage::Eval],
        Command::Augment(_) => vec![Stage::Augment],
        Command::Synth(_) => vec![Stage::Synth],
        Command::Perturb(_) => vec![Stage::Perturb],
        Command::Run => Stage::CHAIN.to_vec(),
        Command::Config => Vec::new(),
    }
}

fn stage_io(cli: &Cli) -> StageIo {
    let paper_split = match &cli.command {
        Command::Augment(a) => a.paper_split,
        Command::Synth(a) => a.split.paper_split,
        _ => false,
    };
    let perturbation = match &cli.command {
        Command::Perturb(a) => Some(match a.kind {
            PerturbKind::Gauss => Perturbation::Gauss(a.percent),
            PerturbKind::SaltPepper => Perturbation::SaltPepper(a.percent),
            PerturbKind::Brightness => Perturbation::Brightness(a.percent),
        }),
        _ => None,
    };
    StageIo {
        data: cli.data.clone(),
        out: cli.out.clone(),
        paper_split,
        perturbation,
    }
}

fn fail(stage: &str, err: &Error) -> ExitCode {
    let msg = serde_json::json!({
        "stage": stage,
        "kind": err.kind(),
        "message": err.to_string(),
    });
    eprintln!("{msg}");
    ExitCode::from(if err.kind() == "config" { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => return fail("config", &e),
    };
    if let Err(e) = init_threads_from_env() {
        return fail("config", &e);
    }
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return ExitCode::SUCCESS;
    }
    if cli.dry_run {
        println!("{}", serde_json::json!({ "config": "valid" }));
        return ExitCode::SUCCESS;
    }
    let io = stage_io(&cli);
    for stage in stages(&cli.command) {
        match run_stage(stage, &cfg, &io) {
            Ok(report) => print_report(&report),
            Err(e) => return fail(stage.name(), &e),
        }
    }
    ExitCode::SUCCESS
}

fn print_report(report: &StageReport) {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{}",
        serde_json::json!({ "stage": report.stage, "artifacts": report.artifacts.len() })
    );
}
