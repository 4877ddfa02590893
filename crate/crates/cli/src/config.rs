//! Command-line arguments and the optional TOML config file. Every option
//! can be given in either place; flags win.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "addgp",
    version,
    about = "Additive Gaussian-process models with coupled sparse variational inference"
)]
pub struct Cli {
    /// Seed for data generation and initialization (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with default options; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads for the numerical kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset from the six-input Friedman function.
    Synth(SynthArgs),
    /// Fit an additive model to a CSV dataset.
    Fit(FitArgs),
    /// Predictive mean and variance at query inputs.
    Predict(PredictArgs),
    /// Per-component effects on regular grids.
    Decompose(DecomposeArgs),
    /// Time the KL and ELBO evaluations across problem sizes.
    Bench(BenchArgs),
}

/// Fill every unset field of `self` from `other`.
macro_rules! merge_fields {
    ($ty:ident { $($f:ident),* $(,)? }) => {
        impl $ty {
            pub fn merge(mut self, other: $ty) -> $ty {
                $( if self.$f.is_none() { self.$f = other.$f; } )*
                self
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    /// Number of rows.
    #[arg(long)]
    pub n: Option<usize>,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}
merge_fields!(SynthArgs {
    n,
    noise_sd,
    output
});

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitArgs {
    /// Training CSV; the target is the column named `y`, else the last.
    #[arg(long, short)]
    pub data: Option<PathBuf>,
    /// Model file to write.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Also write the fit report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// coupled, meanfield or full.
    #[arg(long)]
    pub structure: Option<String>,
    /// anova (needs at least two inputs) or se (one component per input).
    #[arg(long)]
    pub kernel: Option<String>,
    /// Inducing points per component (M); a perfect square for the
    /// bivariate ANOVA term.
    #[arg(long)]
    pub inducing: Option<usize>,
    /// Rank R of the coupling factor (default M).
    #[arg(long)]
    pub rank: Option<usize>,
    /// gaussian or poisson.
    #[arg(long)]
    pub likelihood: Option<String>,
    /// Initial Gaussian noise variance (default a tenth of the target variance).
    #[arg(long)]
    pub noise_variance: Option<f64>,
    /// Learn kernel and likelihood hyperparameters.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub optimize_hypers: Option<bool>,
    /// Also move the inducing inputs.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub optimize_inducing: Option<bool>,
    /// Learn the intercept variance of the constant kernel.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub learn_intercept: Option<bool>,
    /// L-BFGS iteration cap per phase (default 1000).
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative ELBO change regarded as converged (default 1e-7).
    #[arg(long)]
    pub rel_tol: Option<f64>,
    /// Gradient infinity-norm regarded as converged (default 1e-6).
    #[arg(long)]
    pub grad_tol: Option<f64>,
    /// Extra random restarts of the coupling factor.
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Minibatch size; switches the optimizer to Adam.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam steps (minibatch mode).
    #[arg(long)]
    pub adam_iterations: Option<usize>,
    /// Adam step size (minibatch mode).
    #[arg(long)]
    pub learning_rate: Option<f64>,
}
merge_fields!(FitArgs {
    data,
    output,
    report,
    structure,
    kernel,
    inducing,
    rank,
    likelihood,
    noise_variance,
    optimize_hypers,
    optimize_inducing,
    learn_intercept,
    max_iter,
    rel_tol,
    grad_tol,
    restarts,
    batch_size,
    adam_iterations,
    learning_rate,
});

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictArgs {
    #[arg(long, short)]
    pub model: Option<PathBuf>,
    /// Query CSV with the model's input columns (a trailing `y` is ignored).
    #[arg(long, short)]
    pub query: Option<PathBuf>,
    /// Output CSV; standard output when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}
merge_fields!(PredictArgs {
    model,
    query,
    output
});

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeArgs {
    #[arg(long, short)]
    pub model: Option<PathBuf>,
    /// Directory for the per-component CSV files.
    #[arg(long, short)]
    pub output_dir: Option<PathBuf>,
    /// Grid size for univariate components.
    #[arg(long)]
    pub points: Option<usize>,
    /// Grid size per axis for bivariate components.
    #[arg(long)]
    pub points_2d: Option<usize>,
}
merge_fields!(DecomposeArgs {
    model,
    output_dir,
    points,
    points_2d
});

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchArgs {
    /// Component counts for the KL sweep, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub c_grid: Option<Vec<usize>>,
    /// Dataset sizes for the ELBO sweep, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    /// Inducing points per component.
    #[arg(long)]
    pub m: Option<usize>,
    /// Dataset size used by the component sweep.
    #[arg(long)]
    pub sweep_n: Option<usize>,
    /// Component count used by the dataset-size sweep.
    #[arg(long)]
    pub sweep_c: Option<usize>,
    /// Timed batches per cell; the median is reported.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// CSV file for the raw timings.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}
merge_fields!(BenchArgs {
    c_grid,
    n_grid,
    m,
    sweep_n,
    sweep_c,
    repeats,
    output,
});

/// Contents of the `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub synth: SynthArgs,
    pub fit: FitArgs,
    pub predict: PredictArgs,
    pub decompose: DecomposeArgs,
    pub bench: BenchArgs,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

pub fn require<T>(v: Option<T>, name: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing required option --{name}")))
}
