//! `helioprop`: generate data, train, roll out, evaluate and plot.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "helioprop", version, about = "Solar-wind velocity surrogate: data, training, rollout, metrics")]
#[command(args_override_self = true)]
struct Cli {
    /// JSON file whose `<command>` section supplies default flag values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic HUX-f dataset with a manifest.
    Gen(GenArgs),
    /// Train an operator on the manifest's training cubes.
    Train(TrainArgs),
    /// Autoregressive prediction from a cube's boundary slice.
    Rollout(RolloutArgs),
    /// Score a prediction (or the HUX-f baseline) against a truth cube.
    Eval(EvalArgs),
    /// Write PGM heatmaps, histogram and error-vs-radius CSV files.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GenArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// km/s
    #[arg(long, default_value_t = 350.0)]
    pub v_slow: f64,
    /// km/s
    #[arg(long, default_value_t = 750.0)]
    pub v_fast: f64,
    /// Boundary acceleration amplitude.
    #[arg(long, default_value_t = 0.15)]
    pub alpha: f64,
    #[arg(long, default_value_t = 111)]
    pub nlat: usize,
    #[arg(long, default_value_t = 128)]
    pub nlon: usize,
    #[arg(long, default_value_t = 140)]
    pub nr: usize,
    /// Highest degree of the random boundary pattern.
    #[arg(long, default_value_t = 12)]
    pub stream_lmax: usize,
    /// Leading fraction of cubes labelled train; the rest are test.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Windows {
    Aligned,
    EveryIndex,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Radii predicted per forward call.
    #[arg(long, default_value_t = 5)]
    pub horizon: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Defaults to min(110, nlat - 1).
    #[arg(long)]
    pub lmax: Option<usize>,
    /// Defaults to min(64, nlon / 2, lmax).
    #[arg(long)]
    pub mmax: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trailing fraction of training cubes used to pick the best epoch.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, value_enum, default_value_t = Windows::Aligned)]
    pub windows: Windows,
    #[arg(long, default_value = "model.sfnp")]
    pub out: PathBuf,
    /// Defaults to `<out stem>_loss.csv` next to the checkpoint.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cube file; only slice 0 and the grids are used.
    #[arg(long)]
    pub boundary: PathBuf,
    /// Must match the checkpoint; defaults to it.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value = "prediction.hwc")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, conflicts_with = "hux", required_unless_present = "hux")]
    pub pred: Option<PathBuf>,
    /// Score HUX-f propagated from the truth's boundary slice.
    #[arg(long)]
    pub hux: bool,
    /// Boost the truth's boundary before HUX-f (off: it is assumed boosted already).
    #[arg(long, requires = "hux")]
    pub hux_accelerate: bool,
    #[arg(long, default_value_t = 0.15)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    pub edge_threshold: f64,
    /// Windowed UIQI with this window size; global when absent.
    #[arg(long)]
    pub uiqi_window: Option<usize>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, default_value = "report.json")]
    pub out_json: PathBuf,
    #[arg(long, default_value = "report.csv")]
    pub out_csv: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct PlotArgs {
    #[arg(long, required_unless_present = "report")]
    pub cube: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Radius indices for heatmaps and histograms.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub radii: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Lower end of the colour and histogram range; slice minimum when absent.
    #[arg(long)]
    pub vmin: Option<f64>,
    /// Upper end of the colour and histogram range; slice maximum when absent.
    #[arg(long)]
    pub vmax: Option<f64>,
    #[arg(long, default_value = "plots")]
    pub out_dir: PathBuf,
}

/// An input path that does not exist. Exits with status 2.
#[derive(Debug)]
pub struct MissingInput(pub PathBuf);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "no such file: {}", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("HELIOPROP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("HELIOPROP_THREADS must be a positive integer, got {raw:?}"))?;
    anyhow::ensure!(n > 0, "HELIOPROP_THREADS must be a positive integer, got {raw:?}");
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run() -> anyhow::Result<()> {
    let argv = config::expand_args(std::env::args_os().collect())?;
    let cli = Cli::try_parse_from(argv).unwrap_or_else(|e| e.exit());
    init_threads()?;
    match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Rollout(a) => commands::rollout(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Plot(a) => plot::plot(&a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingInput>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
