//! `emo`: one subcommand per pipeline stage over an input and an output
//! directory. Exit status 0 on success, 1 on invalid or missing input, 2 on
//! failures while processing valid input.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emo_core::pipeline::{self, Inputs, Layout, PipelineConfig};
use emo_core::predict::{format_response, parse_request};
use emo_core::synth::{self, FixtureConfig};
use emo_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "emo", version, about = "Expression-morphology pipeline over whole-slide images")]
struct Cli {
    /// JSON pipeline configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Input directory (slides/, expression.tsv, samples.tsv, rois.tsv, ...).
    #[arg(long, global = true)]
    input: Option<PathBuf>,

    /// Output directory for all stage artifacts.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Seed for every sampling stream; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads inside a stage.
    #[arg(long, global = true, env = "EMO_THREADS")]
    threads: Option<usize>,

    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tissue masks for every slide (masks/<slide>.png).
    Segment,
    /// Tile grid, quality control and accepted JPEG tiles (manifest.tsv, tiles/).
    Tile(TileArgs),
    /// Luminosity references and per-slide and global stain profiles (stain/).
    StainEstimate,
    /// Luminosity-corrected, stain-normalised tiles (norm/).
    StainApply,
    /// Variance filter and cohort median normalisation (expression/).
    Expression,
    /// Tile-level predictions (predict/tiles.tsv).
    Predict(PredictArgs),
    /// Slide-level and ROI-level means (aggregate/).
    Aggregate,
    /// Per-gene Spearman, BH/Bonferroni and R² on the evaluation split (stats/genes.tsv).
    Stats,
    /// Genes passing the R² and adjusted-p thresholds (stats/selected.tsv).
    Select(SelectArgs),
    /// Mixed-model validation against spatial measurements (lme/).
    Lme,
    /// Prediction heatmaps with a JSON range sidecar (heatmaps/).
    Heatmap(HeatmapArgs),
    /// Every stage from segment to stats.
    Run,
    /// Writes a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Writes the effective configuration as JSON.
    Config,
    /// Baseline models as an external predictor: tile requests on stdin,
    /// predictions on stdout.
    #[command(hide = true)]
    PredictWorker {
        #[arg(long)]
        models: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TileArgs {
    /// Fixed level-0 read size in pixels instead of physical_size / mpp.
    #[arg(long)]
    src_px_exact: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// External predictor command run through `sh -c`; `{genes}` expands to
    /// a comma-separated gene list. Without it the baseline is fitted.
    #[arg(long)]
    command: Option<String>,
    /// Ridge penalty of the baseline.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    r2_min: Option<f64>,
    #[arg(long)]
    padj_max: Option<f64>,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    slide: Option<String>,
    #[arg(long)]
    gene: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 15)]
    slides: usize,
    /// Leading slides in the training split; the rest are validation.
    #[arg(long, default_value_t = 10)]
    train: usize,
    #[arg(long, default_value_t = 20)]
    genes: usize,
    #[arg(long, default_value_t = 5)]
    linked: usize,
    #[arg(long, default_value_t = 0.452)]
    mpp: f64,
    /// Slide edge in micrometres.
    #[arg(long, default_value_t = 678.0)]
    size_um: f64,
    /// Spatial ROIs per slide, laid out on a square grid.
    #[arg(long, default_value_t = 4)]
    rois: usize,
    #[arg(long, default_value_t = 300.0)]
    roi_size_um: f64,
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.input.is_some() {
        cfg.input_dir = cli.input.clone();
    }
    if cli.output.is_some() {
        cfg.output_dir = cli.output.clone();
    }
    match &cli.command {
        Command::Tile(a) if a.src_px_exact.is_some() => cfg.tile.src_px_exact = a.src_px_exact,
        Command::Predict(a) if a.lambda.is_some() => cfg.predict.ridge_lambda = a.lambda.unwrap_or_default(),
        Command::Select(a) => {
            if let Some(v) = a.r2_min {
                cfg.stats.r2_min = v;
            }
            if let Some(v) = a.padj_max {
                cfg.stats.padj_max = v;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dir(d: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    d.clone()
        .ok_or_else(|| Error::invalid(format!("no {what} directory: pass --{what} or set {what}_dir in the config")))
}

fn predict_worker(models: &Path) -> Result<()> {
    let stdin = std::io::stdin();
    let mut out = BufWriter::new(std::io::stdout().lock());
    let mut tiles = Vec::new();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t = parse_request(&line).ok_or_else(|| Error::invalid(format!("malformed request: {line}")))?;
        tiles.push(t);
    }
    for p in pipeline::predict_with_models(models, &tiles)? {
        writeln!(out, "{}", format_response(&p)).map_err(|e| Error::io("<stdout>", e))?;
    }
    out.flush().map_err(|e| Error::io("<stdout>", e))
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::PredictWorker { models } = &cli.command {
        return predict_worker(models);
    }
    let cfg = config(cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_json()?);
        return Ok(());
    }
    if let Command::Synth(a) = &cli.command {
        let fx = FixtureConfig {
            seed: cfg.seed,
            n_slides: a.slides,
            n_train: a.train.min(a.slides),
            n_genes: a.genes,
            n_linked: a.linked.min(a.genes),
            mpp: a.mpp,
            size_um: a.size_um,
            rois_per_slide: a.rois,
            roi_size_um: a.roi_size_um,
            ..FixtureConfig::default()
        };
        let out = dir(&cfg.output_dir, "output")?;
        synth::generate(&fx)?.write(&out)?;
        log::info!("fixture written to {}", out.display());
        return Ok(());
    }
    let inputs = Inputs::new(dir(&cfg.input_dir, "input")?);
    let out = Layout::new(dir(&cfg.output_dir, "output")?);
    match &cli.command {
        Command::Segment => {
            let n = pipeline::stage_segment(&cfg, &inputs, &out)?;
            log::info!("segmented {n} slides");
        }
        Command::Tile(_) => {
            let rows = pipeline::stage_tile(&cfg, &inputs, &out)?;
            log::info!("{} tiles, {} accepted", rows.len(), rows.iter().filter(|r| r.accepted).count());
        }
        Command::StainEstimate => {
            let s = pipeline::stage_stain_estimate(&cfg, &out)?;
            log::info!("stain profiles for {} slides", s.slides.len());
        }
        Command::StainApply => {
            let n = pipeline::stage_stain_apply(&out)?;
            log::info!("normalised {n} tiles");
        }
        Command::Expression => {
            pipeline::stage_expression(&cfg, &inputs, &out)?;
        }
        Command::Predict(a) => {
            let p = pipeline::stage_predict(&cfg, &inputs, &out, a.command.as_deref())?;
            log::info!("{} tile predictions", p.len());
        }
        Command::Aggregate => {
            pipeline::stage_aggregate(&inputs, &out)?;
        }
        Command::Stats => {
            let s = pipeline::stage_stats(&cfg, &inputs, &out)?;
            let (n, frac) = emo_core::stats::significance_count(&s, cfg.stats.alpha);
            log::info!("{n} of {} genes significant ({:.1}%)", s.len(), 100.0 * frac);
        }
        Command::Select(_) => {
            let s = pipeline::stage_select(&cfg, &out)?;
            log::info!("{} genes selected", s.len());
        }
        Command::Lme => {
            let f = pipeline::stage_lme(&cfg, &inputs, &out)?;
            let sig = f.iter().filter(|r| r.significant(cfg.lme.alpha)).count();
            log::info!("{} genes fitted, {sig} significant", f.len());
        }
        Command::Heatmap(a) => {
            let n = pipeline::stage_heatmap(&cfg, &inputs, &out, a.slide.as_deref(), a.gene.as_deref())?;
            log::info!("{n} heatmaps");
        }
        Command::Run => {
            pipeline::run_all(&cfg, &inputs, &out)?;
        }
        Command::Synth(_) | Command::Config | Command::PredictWorker { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
