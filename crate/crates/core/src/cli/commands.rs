use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::{ConfigError, RunConfig, CONFIG_KEYS};
use crate::data::{generate_phantoms, load_dataset, quantize_image, write_dataset, DataError, Dataset, PhantomStyle};
use crate::diffusion::{reverse_sample, DiffusionError};
use crate::metrics::{evaluate_translation, EvalInputs, HandcraftedExtractor, MetricsError};
use crate::models::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::training::{init_checkpoint, train, EpochSummary, StepReport, TrainError, TrainObserver};

/// Written into an output directory when a command fails.
pub const FAILURE_MARKER: &str = "FAILED";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOG_FILE: &str = "train.log";
const RESOLVED_CONFIG: &str = "config.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Data(DataError::InvalidStyle { .. }) => 1,
            CliError::Train(TrainError::NonFinite { .. }) | CliError::Diffusion(DiffusionError::NonFinite { .. }) => 3,
            CliError::Train(TrainError::Config(_)) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "echodiff", version, about = "Mask-guided adversarial diffusion for echocardiography domain translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (`key = value` lines); omitted keys take their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set epochs=10`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Option<RunConfig>, CliError> {
        if self.config.is_none() && self.overrides.is_empty() {
            return Ok(None);
        }
        let mut cfg = match &self.config {
            Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(io_err(p))?)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(Some(cfg))
    }
}

/// Table of configuration keys with their defaults, appended to `--help`.
fn config_help() -> String {
    let cfg = RunConfig::default();
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys [default]:\n");
    for (key, about) in CONFIG_KEYS {
        let value = cfg.get(key).unwrap_or_default();
        out.push_str(&format!("  {key:<width$}  {about} [default: {value}]\n"));
    }
    out
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset
    Phantom {
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Number of samples
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Rendering style (a, b)
        #[arg(long, default_value = "a")]
        style: String,
        /// Generation seed
        #[arg(long, default_value_t = RunConfig::default().train.seed)]
        seed: u64,
        /// Image side length
        #[arg(long, default_value_t = RunConfig::default().train.model.image_side)]
        side: usize,
        /// Write into a non-empty directory
        #[arg(long)]
        force: bool,
    },
    /// Train the generator and discriminator on a dataset
    #[command(after_help = config_help())]
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint, step log and resolved config
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory
        #[arg(long)]
        force: bool,
    },
    /// Translate every sample of a dataset using its mask as guide
    #[command(after_help = config_help())]
    Translate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trained checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose masks guide generation
        #[arg(long)]
        data: PathBuf,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Sampling seed; each sample uses a seed derived from it and its id
        #[arg(long, default_value_t = RunConfig::default().train.seed)]
        seed: u64,
        /// Accept a checkpoint whose configuration fingerprint differs from --config
        #[arg(long)]
        allow_config_mismatch: bool,
        /// Write into a non-empty directory
        #[arg(long)]
        force: bool,
    },
    /// Compute image-quality metrics and Fréchet distances
    #[command(after_help = config_help())]
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset under evaluation
        #[arg(long)]
        generated: PathBuf,
        /// Target-domain dataset for the Fréchet distance
        #[arg(long)]
        reference: PathBuf,
        /// Paired ground truth; enables per-image MSE, PSNR and SSIM rows
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Untranslated source; adds the before-translation distance
        #[arg(long)]
        source: Option<PathBuf>,
        /// Output directory for report.csv and report.json
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory
        #[arg(long)]
        force: bool,
    },
}

impl Command {
    fn out_dir(&self) -> &Path {
        match self {
            Command::Phantom { out, .. } | Command::Train { out, .. } | Command::Translate { out, .. } | Command::Evaluate { out, .. } => out,
        }
    }

    fn force(&self) -> bool {
        match self {
            Command::Phantom { force, .. } | Command::Train { force, .. } | Command::Translate { force, .. } | Command::Evaluate { force, .. } => *force,
        }
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Usage(format!("output directory {} is not empty (use --force)", dir.display())));
        }
        let marker = dir.join(FAILURE_MARKER);
        if marker.exists() {
            fs::remove_file(&marker).map_err(io_err(&marker))?;
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Runs one command; on failure after the output directory exists, leaves
/// a [`FAILURE_MARKER`] file holding the error message.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let dir = cli.command.out_dir().to_path_buf();
    prepare_out(&dir, cli.command.force())?;
    let result = dispatch(cli.command, stdout);
    if let Err(e) = &result {
        let _ = fs::write(dir.join(FAILURE_MARKER), format!("{e}\n"));
    }
    result
}

fn dispatch(cmd: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    let say = |out: &mut dyn Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cmd {
        Command::Phantom { out, n, style, seed, side, .. } => {
            let style: PhantomStyle = style.parse()?;
            let ds = generate_phantoms(n, side, style, seed)?;
            let manifest = write_dataset(&ds, &out)?;
            say(stdout, manifest.display().to_string());
        }
        Command::Train { config, data, out, .. } => {
            let cfg = config.load()?.unwrap_or_default();
            let path = cmd_train(&cfg, &data, &out)?;
            say(stdout, path.display().to_string());
        }
        Command::Translate {
            config,
            checkpoint,
            data,
            out,
            seed,
            allow_config_mismatch,
            ..
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            if let Some(cfg) = config.load()? {
                ckpt.ensure_fingerprint(&cfg.fingerprint(), allow_config_mismatch)?;
            }
            let ds = load_dataset(&data)?;
            let translated = translate_dataset(&ckpt, &ds, seed)?;
            let manifest = write_dataset(&translated, &out)?;
            say(stdout, manifest.display().to_string());
        }
        Command::Evaluate {
            config,
            generated,
            reference,
            ground_truth,
            source,
            out,
            ..
        } => {
            let cfg = config.load()?.unwrap_or_default();
            let load_opt = |p: &Option<PathBuf>| p.as_ref().map(load_dataset).transpose();
            let (generated, reference) = (load_dataset(&generated)?, load_dataset(&reference)?);
            let (gt, src) = (load_opt(&ground_truth)?, load_opt(&source)?);
            let report = evaluate_translation(&EvalInputs {
                generated: &generated,
                reference: &reference,
                ground_truth: gt.as_ref(),
                source: src.as_ref(),
                extractor: &HandcraftedExtractor,
                max_value: cfg.max_value,
                config_fingerprint: Some(cfg.fingerprint()),
            })?;
            for (name, text) in [("report.csv", report.to_csv()), ("report.json", report.to_json())] {
                let p = out.join(name);
                fs::write(&p, text).map_err(io_err(&p))?;
            }
            for e in &report.fid {
                say(stdout, format!("fid {} {}", e.label, e.value));
            }
        }
    }
    Ok(())
}

/// Writes one line per step and per epoch, and the rolling checkpoint.
struct FileObserver {
    log: fs::File,
    log_path: PathBuf,
    ckpt_path: PathBuf,
    error: Option<CliError>,
}

impl FileObserver {
    fn write_line(&mut self, line: &str) -> Result<(), std::io::Error> {
        writeln!(self.log, "{line}")
    }
}

impl TrainObserver for FileObserver {
    fn on_step(&mut self, r: &StepReport) {
        if let Err(e) = self.write_line(&r.log_line()) {
            self.error.get_or_insert(CliError::Io {
                path: self.log_path.clone(),
                source: e,
            });
        }
    }

    fn on_epoch(&mut self, s: &EpochSummary, ckpt: &Checkpoint) -> Result<(), String> {
        if let Some(e) = &self.error {
            return Err(e.to_string());
        }
        eprintln!("{}", s.log_line());
        self.write_line(&s.log_line()).map_err(|e| e.to_string())?;
        save_checkpoint(&self.ckpt_path, ckpt).map_err(|e| e.to_string())
    }
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let resolved = out.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.canonical_text()).map_err(io_err(&resolved))?;
    let ds = load_dataset(data)?;
    let init = init_checkpoint(&cfg.train, cfg.fingerprint(), cfg.canonical_text())?;
    let log_path = out.join(LOG_FILE);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut obs = FileObserver {
        log: fs::File::create(&log_path).map_err(io_err(&log_path))?,
        log_path,
        ckpt_path: ckpt_path.clone(),
        error: None,
    };
    let ckpt = train(&ds, &cfg.train, init, &mut obs)?;
    if let Some(e) = obs.error {
        return Err(e);
    }
    save_checkpoint(&ckpt_path, &ckpt)?;
    Ok(ckpt_path)
}

/// Per-sample sampling seed: the first 8 bytes of SHA-256(seed LE || id).
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Runs the reverse chain for every sample, guided by its mask. Output
/// keeps ids and masks; images are quantized to 8 bits and the domain tag
/// gains a `-translated` suffix.
pub fn translate_dataset(ckpt: &Checkpoint, ds: &Dataset, seed: u64) -> Result<Dataset, CliError> {
    let gen = &ckpt.generator;
    let side = gen.config().image_side;
    if ds.size() != Some((side, side)) {
        return Err(CliError::Usage(format!(
            "dataset images are {:?}, checkpoint expects {side}x{side}",
            ds.size().unwrap_or_default()
        )));
    }
    let mode = gen.config().guide_mode;
    let before = gen.evaluations();
    let tag = format!("{}-translated", ds.domain_tag);
    let samples = ds
        .samples
        .par_iter()
        .map(|s| {
            let x = reverse_sample(gen, &s.guide_tensor::<f32>(mode), sample_seed(seed, &s.id), &ckpt.schedule)?;
            let mut out = s.clone();
            out.image = x.into_data();
            quantize_image(&mut out.image);
            out.domain_tag = tag.clone();
            Ok(out)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let used = gen.evaluations() - before;
    let expected = ds.len() * ckpt.schedule.reverse_steps();
    assert_eq!(used, expected, "each sample must take exactly one generator call per reverse step");
    Ok(Dataset::new(samples, tag, format!("translated from {} seed={seed}", ds.domain_tag))?)
}
