//! `sona` — generate semantic outliers with a guided diffusion model and
//! train energy-based detectors against them.
//!
//! Every subcommand is one pipeline stage; stages communicate through
//! stamped artifacts in the working directory, so a full run can also be
//! driven stage by stage or resumed after editing the configuration.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sona_cli::config::{parse_tilde_t, PipelineConfig};
use sona_cli::pipeline::{Pipeline, SweepKind};
use sona_core::detector::LossTier;
use sona_core::eval::EvalReport;
use sona_core::guidance::GuidanceKind;

#[derive(Parser)]
#[command(
    name = "sona",
    about = "Semantic-outlier generation and outlier-aware detector training",
    version
)]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory holding artifacts, reports, and the run log.
    #[arg(long, global = true, default_value = "runs")]
    workdir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DetectorArgs {
    /// Detector loss tier: `ce`, `ce+oe`, or `full`.
    #[arg(long, default_value = "full")]
    loss: String,

    /// Which outlier archive to train against: `sona`, `global`, or
    /// `global-diff`. Ignored by the `ce` tier.
    #[arg(long, default_value = "sona")]
    guidance: String,

    /// Independent repetition index; decorrelates generation and training
    /// draws without touching the dataset or the diffusion checkpoint.
    #[arg(long, default_value_t = 0)]
    stream: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Print the built-in configuration as canonical TOML.
    DefaultConfig,

    /// Render the benchmark dataset archive.
    GenData,

    /// Train the conditional denoiser on ID and prompt-class images.
    TrainDiffusion,

    /// Generate an outlier archive from the trained denoiser.
    GenOutliers {
        /// Guidance kind: `sona`, `global`, or `global-diff`.
        #[arg(long, default_value = "sona")]
        guidance: String,

        /// Noising-step policy override: `uniform` or `fixed:<t>`.
        #[arg(long)]
        tilde_t: Option<String>,

        /// Independent repetition index.
        #[arg(long, default_value_t = 0)]
        stream: u64,
    },

    /// Train an energy detector, optionally against generated outliers.
    TrainDetector(DetectorArgs),

    /// Score a trained detector and write report, scores, and image grid.
    Eval {
        #[command(flatten)]
        detector: DetectorArgs,

        /// Proceed even when artifact lineage stamps disagree with the
        /// current configuration.
        #[arg(long)]
        force: bool,
    },

    /// Run the whole pipeline: data, diffusion, outliers, detector, eval.
    Run(DetectorArgs),

    /// Re-run generation + detector + eval for each value of one
    /// parameter, reusing the shared dataset and diffusion checkpoint.
    Ablate {
        /// Parameter to sweep: `lambda`, `s`, or `tilde_t`.
        #[arg(long)]
        sweep: String,

        /// Values to sweep over.
        #[arg(required = true)]
        values: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::DefaultConfig = cli.command {
        // Purely informational: no working directory, no manifest entry.
        print!("{}", PipelineConfig::default().to_canonical_toml());
        return Ok(());
    }

    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    let pipeline = Pipeline::new(cfg, &cli.workdir)?;
    let started = Instant::now();
    let logged: String;

    match cli.command {
        Command::DefaultConfig => unreachable!("handled above"),
        Command::GenData => {
            logged = "gen-data".into();
            let path = pipeline.gen_data()?;
            println!("dataset written to {}", path.display());
        }
        Command::TrainDiffusion => {
            logged = "train-diffusion".into();
            let path = pipeline.train_diffusion()?;
            println!("diffusion checkpoint written to {}", path.display());
        }
        Command::GenOutliers {
            guidance,
            tilde_t,
            stream,
        } => {
            let kind = GuidanceKind::from_name(&guidance)?;
            let policy = tilde_t.as_deref().map(parse_tilde_t).transpose()?;
            logged = format!("gen-outliers --guidance {guidance} --stream {stream}");
            let path = pipeline.gen_outliers(kind, policy, stream)?;
            println!("outlier archive written to {}", path.display());
        }
        Command::TrainDetector(args) => {
            let (tier, kind) = args.parse()?;
            logged = format!(
                "train-detector --loss {} --guidance {} --stream {}",
                args.loss, args.guidance, args.stream
            );
            let path = pipeline.train_detector(tier, kind, args.stream)?;
            println!("detector written to {}", path.display());
        }
        Command::Eval { detector, force } => {
            let (tier, kind) = detector.parse()?;
            logged = format!(
                "eval --loss {} --guidance {} --stream {}",
                detector.loss, detector.guidance, detector.stream
            );
            let (report, files) = pipeline.eval(tier, kind, detector.stream, force)?;
            print_report(&report);
            println!("report written to {}", files.report_csv.display());
        }
        Command::Run(args) => {
            let (tier, kind) = args.parse()?;
            logged = format!("run --loss {} --guidance {}", args.loss, args.guidance);
            let (report, files) = pipeline.run_all(tier, kind)?;
            print_report(&report);
            println!("report written to {}", files.report_csv.display());
        }
        Command::Ablate { sweep, values } => {
            let kind = SweepKind::from_name(&sweep)?;
            logged = format!("ablate --sweep {sweep} {}", values.join(" "));
            let path = pipeline.ablate(kind, &values)?;
            println!("sweep results written to {}", path.display());
        }
    }

    pipeline.append_manifest(&logged, started.elapsed())?;
    Ok(())
}

impl DetectorArgs {
    fn parse(&self) -> sona_core::Result<(LossTier, GuidanceKind)> {
        Ok((
            LossTier::from_name(&self.loss)?,
            GuidanceKind::from_name(&self.guidance)?,
        ))
    }
}

fn print_report(report: &EvalReport) {
    for row in &report.rows {
        println!(
            "{:<10} {:<20} {:<16} {:.6}",
            row.section, row.metric, row.split, row.value
        );
    }
}
