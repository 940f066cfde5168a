//! The `camscope` command line: training, CAM generation, gradient checks
//! and an end-to-end demo on synthetic shapes.
//!
//! Exit codes: 0 success, 1 failure (including a failed gradient check),
//! 2 bad configuration or usage, 3 file I/O or unreadable input.

macro_rules! report {
    ($out:expr, $($arg:tt)*) => {
        $crate::write_report($out, format_args!($($arg)*))
    };
}

pub mod cam;
pub mod config;
pub mod demo;
pub mod gradcheck;
pub mod train;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use camscope::cam::{PixelSetSpec, ReluOrder, TargetKind};
use camscope::render::NormalizeMode;
use camscope::trainer::SyntheticSpec;

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }

    /// An input file that could not be read or decoded.
    pub fn input(path: &Path, err: camscope::Error) -> Self {
        CliError {
            code: EXIT_IO,
            message: match err {
                camscope::Error::Io { .. } => err.to_string(),
                other => format!("{}: {other}", path.display()),
            },
        }
    }
}

impl From<camscope::Error> for CliError {
    fn from(err: camscope::Error) -> Self {
        use camscope::Error as E;
        let code = match err {
            E::Io { .. } => EXIT_IO,
            E::Config { .. }
            | E::InvalidArgument(_)
            | E::UnknownLayer { .. }
            | E::ClassOutOfRange { .. }
            | E::PixelSet(_)
            | E::Parse { .. }
            | E::Resolution { .. } => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "camscope", version, about = "Class activation maps for segmentation U-Nets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a U-Net and write its weights and per-epoch metrics.
    Train(TrainArgs),
    /// Explain a prediction with one or more CAM methods.
    Cam(CamArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Synthetic data, training and Seg-Grad vs Seg-HiRes-Grad overlays.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// key = value settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic shapes, e.g. n=64,classes=3,size=64.
    #[arg(long, conflicts_with = "data_dir")]
    synthetic: Option<SyntheticSpec>,
    /// Directory of NAME.pgm (or .ppm) images with NAME.label.pgm masks.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Class count for --data-dir (default: largest label + 1).
    #[arg(long)]
    classes: Option<usize>,
    /// Channel widths per level, deepest first (default 64,32,16,8).
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics CSV (default: the weight file with a .csv extension).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CamArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Binary PGM or PPM input.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Comma list of methods, or `all`.
    #[arg(long)]
    method: Option<String>,
    /// Comma list of capture points, or `all` (default: bottleneck).
    #[arg(long, visible_alias = "layers")]
    layer: Option<String>,
    /// whole | class:<c> | rect:x0,y0,x1,y1 | point:i,j[;i,j...]
    #[arg(long)]
    pixel_set: Option<PixelSetSpec>,
    /// Class to explain (default: the class of a class:<c> pixel set).
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    relu_order: Option<ReluOrder>,
    #[arg(long)]
    xres_window: Option<usize>,
    /// logits | probabilities
    #[arg(long)]
    target: Option<TargetKind>,
    /// minmax | none
    #[arg(long)]
    normalize: Option<NormalizeMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the backward pass of one primitive.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Training images.
    #[arg(long)]
    samples: Option<usize>,
    /// Held-out images used for metrics and overlays.
    #[arg(long)]
    test_samples: Option<usize>,
    /// Reuse the weights given by --model instead of training.
    #[arg(long, requires = "model")]
    skip_train: bool,
    #[arg(long)]
    model: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(path, camscope::Error::Io { path: path.into(), source: e }))?;
    RunConfig::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

impl TrainArgs {
    fn resolve(self) -> CliResult<RunConfig> {
        let flags = RunConfig {
            synthetic: self.synthetic,
            data_dir: self.data_dir,
            classes: self.classes,
            channels: self.channels,
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            out: self.out,
            metrics: self.metrics,
            ..Default::default()
        };
        let cfg = load_config(self.config.as_deref())?.overlay(flags);
        cfg.check_keys("train", &train::KEYS)?;
        Ok(cfg)
    }
}

impl CamArgs {
    fn resolve(self) -> CliResult<RunConfig> {
        let flags = RunConfig {
            model: self.model,
            image: self.image,
            method: self.method,
            layer: self.layer,
            pixel_set: self.pixel_set,
            class: self.class,
            relu_order: self.relu_order,
            xres_window: self.xres_window,
            target: self.target,
            normalize: self.normalize,
            alpha: self.alpha,
            out_dir: self.out_dir,
            ..Default::default()
        };
        let cfg = load_config(self.config.as_deref())?.overlay(flags);
        cfg.check_keys("cam", &cam::KEYS)?;
        Ok(cfg)
    }
}

impl DemoArgs {
    fn resolve(self) -> CliResult<RunConfig> {
        let flags = RunConfig {
            out_dir: self.out_dir,
            seed: self.seed,
            epochs: self.epochs,
            lr: self.lr,
            samples: self.samples,
            test_samples: self.test_samples,
            skip_train: self.skip_train.then_some(true),
            model: self.model,
            ..Default::default()
        };
        let cfg = load_config(self.config.as_deref())?.overlay(flags);
        cfg.check_keys("demo", &demo::KEYS)?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Reports go to `out`; errors to standard error.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => a.resolve().and_then(|c| train::run(&c, out)),
        Command::Cam(a) => a.resolve().and_then(|c| cam::run(&c, out)),
        Command::Gradcheck(a) => gradcheck::run(a.seed, a.inject_fault.as_deref(), out),
        Command::Demo(a) => a
            .resolve()
            .and_then(|c| demo::run(&c, out).map(|_| ())),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

/// Creates `dir` (and parents) for output.
pub(crate) fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", dir.display()),
    })
}

pub(crate) fn write_report(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> CliResult<()> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| CliError {
            code: EXIT_IO,
            message: format!("writing report: {e}"),
        })
}
