//! `nucleiseg` command-line entry point.
//!
//! Exit status: 0 success, 1 input or configuration error, 2 runtime fault.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use nucleiseg::data::{extract_dir, lab_stats, ExtractConfig, ScaleSet, TissueRule};
use nucleiseg::infer::infer_dir;
use nucleiseg::metrics::evaluate_dataset;
use nucleiseg::plot::plot_run;
use nucleiseg::postprocess::{postprocess_dir, PostprocessConfig};
use nucleiseg::synth::{generate_dataset, SynthConfig};
use nucleiseg::trainer::{run_variant, Checkpoint, TrainRunConfig, Variant};
use nucleiseg::{pngio, Error};

/// Environment variable naming the default directory for generated tiles.
const CACHE_ENV: &str = "NUCLEI_CACHE_DIR";

#[derive(Parser, Debug)]
#[command(name = "nucleiseg", version, about = "Self-supervised nuclei segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut slides into tissue tiles at each magnification.
    ExtractTiles {
        /// Directory with one subdirectory per slide holding `{level}.png`.
        #[arg(long)]
        slides: PathBuf,
        /// Output directory; defaults to `$NUCLEI_CACHE_DIR/tiles`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "10,20,40")]
        levels: String,
        #[arg(long, default_value_t = 224)]
        tile_size: usize,
        #[arg(long, default_value_t = 0.7)]
        tissue_threshold: f64,
        /// Tile whose colour statistics every tile is normalized to.
        #[arg(long)]
        reference_tile: Option<PathBuf>,
    },
    /// Generate the synthetic multi-magnification blob dataset.
    SynthGen {
        /// Output directory; defaults to `$NUCLEI_CACHE_DIR/synth`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 700)]
        per_level: usize,
        #[arg(long, default_value_t = 160)]
        tile_size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "10,20,40")]
        levels: String,
    },
    /// Train one variant and keep the best checkpoint by validation Dice.
    Train {
        /// TOML run configuration; omitted keys take their defaults.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the variant named in the config.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write 16-bit attention maps for every image in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn attention maps into instance label maps.
    Postprocess {
        #[arg(long)]
        attention: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Disk radius of the first opening and closing pass.
        #[arg(long, default_value_t = 2)]
        open_r: usize,
        /// Disk radius of the second opening and closing pass.
        #[arg(long, default_value_t = 1)]
        close_r: usize,
        #[arg(long, default_value_t = 1.0)]
        blur_sigma: f64,
        #[arg(long, default_value_t = 7)]
        maxima_r: usize,
    },
    /// Score predicted instance maps against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-image panels and training curves for a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
        /// Input images; defaults to `RUN/images`.
        #[arg(long)]
        images: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(inner) if !inner.is_usage_error() => 2,
        Some(_) => 1,
        // argument problems detected here rather than by the library
        None => 1,
    }
}

fn cache_default(out: Option<PathBuf>, sub: &str) -> anyhow::Result<PathBuf> {
    if let Some(out) = out {
        return Ok(out);
    }
    match std::env::var_os(CACHE_ENV) {
        Some(dir) => Ok(PathBuf::from(dir).join(sub)),
        None => Err(Error::Config(format!("--out not given and {CACHE_ENV} is not set")).into()),
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::ExtractTiles {
            slides,
            out,
            levels,
            tile_size,
            tissue_threshold,
            reference_tile,
        } => {
            let out = cache_default(out, "tiles")?;
            let normalization_target = match reference_tile {
                Some(path) => Some(lab_stats(&pngio::read_rgb(&path)?)?),
                None => None,
            };
            let config = ExtractConfig {
                scale_set: ScaleSet::parse(&levels)?,
                tile_size,
                tissue_threshold,
                tissue_rule: TissueRule::default(),
                normalization_target,
            };
            let manifest = extract_dir(&slides, &out, &config)?;
            for (level, count) in manifest.per_level_counts() {
                log::info!("{level}x: {count} tiles");
            }
            println!("{}", out.display());
        }
        Command::SynthGen {
            out,
            per_level,
            tile_size,
            seed,
            levels,
        } => {
            let out = cache_default(out, "synth")?;
            let config = SynthConfig {
                scale_set: ScaleSet::parse(&levels)?,
                tile_size,
                ..SynthConfig::default()
            };
            let manifest = generate_dataset(&config, per_level, &out, seed)?;
            log::info!("{} tiles written", manifest.entries.len());
            println!("{}", out.display());
        }
        Command::Train { config, variant, out } => {
            let mut cfg = TrainRunConfig::load(&config)?;
            if let Some(v) = variant {
                cfg.variant = Variant::parse(&v)?;
            }
            resolve_relative(&mut cfg, config.parent().unwrap_or(Path::new(".")));
            let summary = run_variant(&cfg, &out)?;
            let best = summary.best_report();
            log::info!(
                "best epoch {} (validation Dice {:.4}), config hash {}",
                best.epoch,
                best.val_dice,
                summary.config_hash
            );
            println!("{}", summary.best_checkpoint.display());
        }
        Command::Infer { checkpoint, images, out } => {
            let ck = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let written = infer_dir(&ck, &images, &out)?;
            log::info!("{} attention maps written", written.len());
        }
        Command::Postprocess {
            attention,
            out,
            threshold,
            open_r,
            close_r,
            blur_sigma,
            maxima_r,
        } => {
            let config = PostprocessConfig {
                threshold,
                coarse_radius: open_r,
                fine_radius: close_r,
                blur_sigma,
                maxima_radius: maxima_r,
            };
            let stems = postprocess_dir(&attention, &out, &config)?;
            log::info!("{} instance maps written", stems.len());
        }
        Command::Evaluate { pred, gt, out } => {
            let report = evaluate_dataset(&pred, &gt)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
            }
            std::fs::write(&out, serde_json::to_string_pretty(&report)?).map_err(Error::io(&out))?;
            let a = &report.aggregate;
            println!(
                "AJI {} AHD {} ADC {:.4}",
                a.aji.map_or("n/a".into(), |v| format!("{v:.4}")),
                a.ahd.map_or("n/a".into(), |v| format!("{v:.4}")),
                a.adc
            );
            if !report.unmatched.is_empty() {
                return Err(Error::Input(format!(
                    "stems without a counterpart were skipped: {}",
                    report.unmatched.join(", ")
                ))
                .into());
            }
        }
        Command::Plot { run, images } => {
            let out = plot_run(&run, images.as_deref(), &PostprocessConfig::default())?;
            log::info!("{} figures, curves at {}", out.figures.len(), out.curves.display());
        }
    }
    Ok(())
}

/// Relative data paths in a config file are taken relative to that file.
fn resolve_relative(config: &mut TrainRunConfig, base: &Path) {
    for p in [&mut config.data_dir, &mut config.patch_dir, &mut config.validation_dir]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}
