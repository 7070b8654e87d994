use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use bandsel::pipeline::{self, run_pipeline, score_masks, text_table, Context, RunConfig, Stage};
use bandsel::synth::write_corpus;
use bandsel::Exec;
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(
    name = "bandsel",
    version,
    about = "Band selection for forest / non-forest texture classification"
)]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Synthetic seed for `synthesize`, single UMDA seed elsewhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root for stage artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus root (region_<id>/ directories).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus under the corpus root.
    Synthesize {
        #[arg(long)]
        regions: Option<u32>,
        /// Square image side in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Comma-separated signal bands, e.g. B1,B3,B4.
        #[arg(long, value_delimiter = ',')]
        signal: Option<Vec<String>>,
        #[arg(long)]
        contrast: Option<f64>,
        #[arg(long)]
        blobs: Option<usize>,
    },
    /// PCA false-color composite per region.
    Composite,
    /// SLIC superpixels on the composites.
    Superpixels,
    /// Filter superpixels by homogeneity and area.
    BuildSegments,
    /// Haralick features per segment and channel.
    ExtractFeatures,
    /// UMDA band selection for each configured seed.
    SelectBands,
    /// Frequency ranking over the pooled final populations.
    RankBands,
    /// Compare the best individual with the baselines, or score one composition.
    EvaluateComposition {
        /// Comma-separated channels (B1..B7, PC1..PC3, NDVI).
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<String>>,
        #[arg(long, default_value = "custom")]
        name: String,
    },
    /// Pixel metrics and error maps for predicted masks.
    ScoreMasks {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Assemble report.json / report.txt from stage artifacts.
    Report,
    /// Run all stages, reusing current artifacts.
    Pipeline,
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(c) = &cli.corpus {
        cfg.corpus = c.clone();
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Synthesize { .. } => cfg.synthetic.seed = seed,
            _ => cfg.umda.seeds = vec![seed],
        }
    }
    if let Command::Synthesize {
        regions,
        size,
        signal,
        contrast,
        blobs,
    } = &cli.command
    {
        let s = &mut cfg.synthetic;
        if let Some(r) = regions {
            s.regions = *r;
        }
        if let Some(n) = size {
            s.width = *n;
            s.height = *n;
        }
        if let Some(b) = signal {
            s.signal_bands = b.clone();
        }
        if let Some(c) = contrast {
            s.contrast = *c;
        }
        if let Some(b) = blobs {
            s.blob_count = *b;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exec_for(threads: Option<usize>) -> Result<Exec> {
    match threads {
        Some(0) => bail!("--threads must be >= 1"),
        Some(1) => Ok(Exec::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring thread pool")?;
            Ok(Exec::Parallel)
        }
        None => Ok(Exec::default()),
    }
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(s: &str) -> Result<()> {
    match io::stdout().lock().write_all(s.as_bytes()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let exec = exec_for(cli.threads)?;
    let ctx = Context::new(cfg, exec)?;
    let cfg = &ctx.cfg;
    match &cli.command {
        Command::Synthesize { .. } => {
            let ids = write_corpus(&cfg.synthetic, &cfg.corpus)?;
            emit(&format!(
                "wrote {} regions ({}x{}) to {}\n",
                ids.len(),
                cfg.synthetic.width,
                cfg.synthetic.height,
                cfg.corpus.display()
            ))?;
        }
        Command::Composite => ctx.run_stage(Stage::Composite)?,
        Command::Superpixels => ctx.run_stage(Stage::Superpixels)?,
        Command::BuildSegments => ctx.run_stage(Stage::Segments)?,
        Command::ExtractFeatures => ctx.run_stage(Stage::Features)?,
        Command::SelectBands => ctx.run_stage(Stage::SelectBands)?,
        Command::RankBands => {
            ctx.run_stage(Stage::RankBands)?;
            emit(&fs::read_to_string(cfg.out.join("ranking/ranking.txt"))?)?;
        }
        Command::EvaluateComposition { channels, name } => match channels {
            None => {
                ctx.run_stage(Stage::Evaluate)?;
                emit(&fs::read_to_string(
                    cfg.out.join("evaluation/compositions.txt"),
                )?)?;
            }
            Some(ch) => {
                let tables = ctx.load_split_features(Stage::Evaluate)?;
                let r = ctx.evaluate_composition(&tables, name, ch)?;
                let path = cfg.out.join(format!("evaluation/{name}.json"));
                fs::create_dir_all(path.parent().expect("has parent"))?;
                fs::write(&path, serde_json::to_string_pretty(&r)? + "\n")?;
                emit(&text_table(&[
                    vec!["Composition".into(), "Val BA".into(), "Test BA".into()],
                    vec![
                        format!("{} ({})", r.name, r.channels.join(",")),
                        format!("{:.4}", r.validation.balanced_accuracy),
                        format!("{:.4}", r.test.balanced_accuracy),
                    ],
                ]))?;
            }
        },
        Command::ScoreMasks { pred, truth } => {
            let s = score_masks(pred, truth, &cfg.out)?;
            emit(&s.to_text())?;
        }
        Command::Report => {
            ctx.run_stage(Stage::Report)?;
            emit(&fs::read_to_string(cfg.out.join("report.txt"))?)?;
        }
        Command::Pipeline => {
            let report = run_pipeline(&ctx)?;
            emit(&report.to_text())?;
        }
        Command::ShowConfig => emit(&(serde_json::to_string_pretty(cfg)? + "\n"))?,
    }
    info!("done");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(pipeline::PipelineError::MissingInput { .. }) = e.downcast_ref() {
                return ExitCode::from(3);
            }
            ExitCode::FAILURE
        }
    }
}
