use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use stylegraph_core::data::{generate_toy_dataset, load_dataset, resize, save_toy_dataset, Domain, Image, ToyDatasetSpec};
use stylegraph_core::metrics::NdbConfig;
use stylegraph_core::segmentation::PluginRegistry;
use stylegraph_core::training::{self, Model, TranslateMode, CHECKPOINT_FILE};
use stylegraph_core::{config::TrainConfig, Error, Result};

/// Unpaired two-domain image translation guided by style references.
///
/// Exit codes: 0 success, 2 usage or configuration error, 3 data error,
/// 4 numeric failure, 1 anything else.
#[derive(Parser, Debug)]
#[command(name = "stylegraph", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic two-domain scenery dataset.
    MakeToyData {
        /// Destination directory (refused when non-empty unless --force).
        #[arg(long)]
        out_dir: PathBuf,
        /// Images per domain.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Number of object classes in the masks.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace the contents of a non-empty --out-dir.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a dataset directory.
    Train {
        /// Flat `key = value` config file; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        /// Receives checkpoint.sgc, metrics.jsonl and config.txt.
        #[arg(long)]
        out_dir: PathBuf,
        /// Config assignments applied after the file, e.g. `lambda_spatio=0`.
        #[arg(long = "override", value_name = "KEY=VALUE", num_args = 1..)]
        overrides: Vec<String>,
        /// Continue from a checkpoint file, or a directory holding checkpoint.sgc.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train into a non-empty --out-dir without resuming.
        #[arg(long)]
        force: bool,
    },
    /// Translate one image with a trained checkpoint and write a PNG.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Domain to translate into.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
        domain: u8,
        #[arg(long, value_enum, default_value_t = Mode::Latent)]
        mode: Mode,
        /// Style reference image, required with --mode reference.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Seed for the latent code and noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute FID, diversity, NDB and JSD of reference-guided translations.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Number of translations to generate (at least 2).
        #[arg(long, default_value_t = 200)]
        n_samples: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out_json: Option<PathBuf>,
        /// NDB bin count; defaults to the checkpoint's ndb_k.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score the real target images against themselves (sanity check).
        #[arg(long)]
        debug_real: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Latent,
    Reference,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Format(_) | Error::Json(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn is_non_empty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).is_ok_and(|mut it| it.next().is_some())
}

fn make_toy_data(out_dir: &Path, n: usize, resolution: usize, classes: usize, seed: u64, force: bool) -> Result<()> {
    let spec = ToyDatasetSpec {
        n_images_per_domain: n,
        resolution,
        n_object_classes: classes,
        seed,
    };
    let toy = generate_toy_dataset(&spec).map_err(|e| match e {
        Error::Config(m) => Error::Usage(m),
        other => other,
    })?;
    save_toy_dataset(&toy, out_dir, force)?;
    info!("wrote {} images per domain to {}", n, out_dir.display());
    Ok(())
}

fn train(
    config: Option<&Path>,
    data_dir: &Path,
    out_dir: &Path,
    overrides: &[String],
    resume: Option<&Path>,
    force: bool,
) -> Result<()> {
    let base = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Usage(format!("cannot read config {}: {e}", p.display())))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    if resume.is_none() && !force && is_non_empty_dir(out_dir) {
        return Err(Error::Usage(format!(
            "{} exists and is not empty (use --force or --resume)",
            out_dir.display()
        )));
    }
    let resume = resume.map(|p| if p.is_dir() { p.join(CHECKPOINT_FILE) } else { p.to_path_buf() });
    let dataset = load_dataset(data_dir, Some(cfg.resolution))?;
    let (trainer, history) = training::train(&cfg, &dataset, out_dir, resume.as_deref(), &PluginRegistry::default())?;
    if let Some(last) = history.last() {
        info!(
            "finished at step {}: d_objective {:.4}, g_objective {:.4}",
            trainer.step, last.d_objective, last.g_objective
        );
    }
    Ok(())
}

/// Brings a square image to the model resolution.
fn fit(image: Image, resolution: usize, what: &str) -> Result<Image> {
    if image.height() != image.width() {
        return Err(Error::Data(format!("{what} must be square, got {}x{}", image.height(), image.width())));
    }
    Ok(if image.height() == resolution {
        image
    } else {
        resize(&image, resolution)
    })
}

fn translate(
    checkpoint: &Path,
    input: &Path,
    domain: u8,
    mode: Mode,
    reference: Option<&Path>,
    output: &Path,
    seed: u64,
) -> Result<()> {
    let model = Model::load(checkpoint, &PluginRegistry::default())?;
    let res = model.config.resolution;
    let x = Image::load(input)?;
    let size = x.height();
    let x = fit(x, res, "input")?;
    let reference = reference.map(|p| Image::load(p).and_then(|r| fit(r, res, "reference"))).transpose()?;
    let mode = match mode {
        Mode::Latent => TranslateMode::Latent,
        Mode::Reference => TranslateMode::Reference,
    };
    let domain = Domain::from_index(domain as usize).map_err(|e| Error::Usage(e.to_string()))?;
    let mut y = model.translate(&x, domain, mode, reference.as_ref(), seed)?;
    if size != res {
        y = resize(&y, size);
    }
    y.save_png(output)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    checkpoint: &Path,
    data_dir: &Path,
    n_samples: usize,
    out_json: Option<&Path>,
    k: Option<usize>,
    seed: u64,
    debug_real: bool,
) -> Result<()> {
    if n_samples < 2 {
        return Err(Error::Usage("--n-samples must be at least 2".into()));
    }
    let model = Model::load(checkpoint, &PluginRegistry::default())?;
    let dataset = load_dataset(data_dir, Some(model.config.resolution))?;
    let (train_set, held_out) = dataset.split(model.config.held_out_fraction)?;
    let ndb = NdbConfig {
        k: k.unwrap_or(model.config.ndb_k),
        seed,
        ..Default::default()
    };
    let report = if debug_real {
        let real: Vec<Image> = train_set.domain(Domain::Target).iter().map(|s| s.image.clone()).collect();
        model.evaluate_images(&real, &real, &ndb)?
    } else {
        model.evaluate(&train_set, &held_out, n_samples, &ndb)?
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match out_json {
        Some(p) => fs::write(p, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeToyData {
            out_dir,
            n,
            resolution,
            classes,
            seed,
            force,
        } => make_toy_data(&out_dir, n, resolution, classes, seed, force),
        Command::Train {
            config,
            data_dir,
            out_dir,
            overrides,
            resume,
            force,
        } => train(config.as_deref(), &data_dir, &out_dir, &overrides, resume.as_deref(), force),
        Command::Translate {
            checkpoint,
            input,
            domain,
            mode,
            reference,
            output,
            seed,
        } => {
            if matches!(mode, Mode::Reference) && reference.is_none() {
                Cli::command()
                    .error(ErrorKind::MissingRequiredArgument, "--mode reference requires --reference <PATH>")
                    .exit();
            }
            translate(&checkpoint, &input, domain, mode, reference.as_deref(), &output, seed)
        }
        Command::Evaluate {
            checkpoint,
            data_dir,
            n_samples,
            out_json,
            k,
            seed,
            debug_real,
        } => evaluate(&checkpoint, &data_dir, n_samples, out_json.as_deref(), k, seed, debug_real),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
