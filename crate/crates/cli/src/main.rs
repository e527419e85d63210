//! `lesionscope` command-line front end.

mod check;
mod compare;
mod error;
mod explain;
mod inputs;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lesionscope::attribution::{Baseline, Method, MethodParams};
use lesionscope::evalkit::{Colormap, NormMode};

use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "lesionscope",
    version,
    about = "Train, explain and evaluate small CNN lesion classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded three-class synthetic leaf dataset with a manifest.
    Generate(pipeline::GenerateArgs),
    /// Train the reference network on a manifest.
    Train(pipeline::TrainArgs),
    /// Predict every manifest row and write a confusion matrix.
    Predict(pipeline::PredictArgs),
    /// Write explanation maps, heatmaps, panels and metrics per image.
    Explain(explain::ExplainArgs),
    /// Compare methods by agreement and lesion localization over a manifest.
    Compare(compare::CompareArgs),
    /// Run the built-in oracle suites on seeded random networks.
    Validate(check::ValidateArgs),
    /// Run only the finite-difference gradient check.
    Gradcheck(check::GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "LESIONSCOPE_OUT", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model document (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Weights blob matching the document.
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MethodArgs {
    /// Comma-separated explanation methods.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "saliency,gi,gbp,smoothgrad,ig,dtd,lrp-z,lrp-eps"
    )]
    pub methods: Vec<String>,
    /// Integrated-gradients steps.
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    /// Integrated-gradients baseline: zeros, black, white or a number.
    #[arg(long, default_value = "zeros")]
    pub baseline: String,
    /// SmoothGrad sample count.
    #[arg(long, default_value_t = 50)]
    pub sg_samples: usize,
    /// SmoothGrad noise level; defaults to 0.15 of the input range.
    #[arg(long)]
    pub sg_sigma: Option<f64>,
    /// LRP-ε stabilizer.
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    /// Seed for SmoothGrad noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl MethodArgs {
    /// Requested methods in the order given, duplicates kept.
    pub fn methods(&self) -> Result<Vec<Method>> {
        if self.methods.is_empty() {
            return Err(CliError::Usage("no methods requested".into()));
        }
        Ok(self
            .methods
            .iter()
            .map(|m| m.trim().parse())
            .collect::<std::result::Result<_, _>>()?)
    }

    pub fn params(&self) -> Result<MethodParams> {
        let mut p = MethodParams::default();
        p.integrated_gradients.steps = self.steps;
        p.integrated_gradients.baseline = self.baseline.parse::<Baseline>()?;
        p.smoothgrad.n_samples = self.sg_samples;
        p.smoothgrad.sigma = self.sg_sigma;
        p.smoothgrad.seed = self.seed;
        p.lrp.epsilon = self.epsilon;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Args)]
pub struct MapArgs {
    /// Map normalization: abs_minmax or signed_minmax.
    #[arg(long, default_value = "abs_minmax")]
    pub norm_mode: String,
    /// Pixels counted by top-k metrics; defaults to the mask area.
    #[arg(long)]
    pub topk: Option<usize>,
    /// Heatmap colormap: red_blue or grayscale.
    #[arg(long, default_value = "red_blue")]
    pub colormap: String,
}

impl MapArgs {
    pub fn norm_mode(&self) -> Result<NormMode> {
        Ok(self.norm_mode.parse()?)
    }

    pub fn colormap(&self) -> Result<Colormap> {
        Ok(self.colormap.parse()?)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => pipeline::generate(&a),
        Command::Train(a) => pipeline::train(&a),
        Command::Predict(a) => pipeline::predict(&a),
        Command::Explain(a) => explain::run(&a),
        Command::Compare(a) => compare::run(&a),
        Command::Validate(a) => check::validate(&a),
        Command::Gradcheck(a) => check::gradcheck(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
