use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use addgp::{
    build_anova_kernel, init_state, regular_grid, train_full_with, train_sparse, validate_model,
    AdamConfig, ComponentSpec, Dataset, FullModel, InputScaling, Kernel, KernelParams, Likelihood,
    OptimizerConfig, SavedModel, SparseModel, Status, Structure, TrainConfig, TrainReport,
};

use crate::config::{require, FitArgs};
use crate::csvio::{read_table, write_atomic, Table};
use crate::error::{CliError, CliResult};
use crate::RNG_NAME;

/// Initial lengthscale of every component, in unit-box coordinates.
const INITIAL_LENGTHSCALE: f64 = 0.3;
/// Dataset size above which the full model is slow enough to warn about.
const FULL_MODEL_WARN: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fitted {
    Sparse(Structure),
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KernelChoice {
    Anova,
    SquaredExp,
}

fn parse_structure(s: &str) -> CliResult<Fitted> {
    match s {
        "coupled" => Ok(Fitted::Sparse(Structure::Coupled)),
        "meanfield" | "mean-field" => Ok(Fitted::Sparse(Structure::MeanField)),
        "full" => Ok(Fitted::Full),
        _ => Err(CliError::Usage(format!(
            "unknown structure '{s}' (expected coupled, meanfield or full)"
        ))),
    }
}

fn parse_kernel(s: &str) -> CliResult<KernelChoice> {
    match s {
        "anova" => Ok(KernelChoice::Anova),
        "se" => Ok(KernelChoice::SquaredExp),
        _ => Err(CliError::Usage(format!(
            "unknown kernel '{s}' (expected anova or se)"
        ))),
    }
}

fn parse_likelihood(s: &str, noise_variance: f64) -> CliResult<Likelihood> {
    match s {
        "gaussian" => Ok(Likelihood::gaussian(noise_variance)),
        "poisson" => Ok(Likelihood::Poisson),
        _ => Err(CliError::Usage(format!(
            "unknown likelihood '{s}' (expected gaussian or poisson)"
        ))),
    }
}

/// Split the table into inputs and the target column.
fn split_target(t: &Table) -> CliResult<(Array2<f64>, Array1<f64>, Vec<String>)> {
    if t.header.len() < 2 {
        return Err(CliError::Data(
            "need at least one input column and a target column".into(),
        ));
    }
    if t.rows.nrows() == 0 {
        return Err(CliError::Data("training data has no rows".into()));
    }
    let target = t.column_index("y").unwrap_or(t.header.len() - 1);
    let inputs: Vec<usize> = (0..t.header.len()).filter(|&j| j != target).collect();
    let x = t.rows.select(Axis(1), &inputs);
    let y = t.rows.column(target).to_owned();
    let names = inputs.iter().map(|&j| t.header[j].clone()).collect();
    Ok((x, y, names))
}

fn mean_and_variance(y: &Array1<f64>) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

fn outside_unit_box(x: &ArrayView2<f64>) -> bool {
    x.iter().any(|&v| !(0.0..=1.0).contains(&v))
}

/// Location and scale of the latent function implied by the targets.
fn latent_moments(lik: &Likelihood, y: &Array1<f64>) -> (f64, f64) {
    let (mean, var) = mean_and_variance(y);
    match lik {
        Likelihood::Gaussian { .. } => (mean, var.max(1e-6)),
        Likelihood::Poisson => ((mean + 0.5).ln(), 1.0),
    }
}

fn anova_specs(d: usize, m: usize, var: f64, sigma0: f64) -> CliResult<Vec<ComponentSpec>> {
    let side = (m as f64).sqrt().round() as usize;
    if side * side != m {
        return Err(CliError::Usage(format!(
            "the bivariate ANOVA term needs a square number of inducing points, got {m}"
        )));
    }
    let mut params = vec![KernelParams::univariate(var, INITIAL_LENGTHSCALE); d + 1];
    params.push(KernelParams::univariate(1.0, INITIAL_LENGTHSCALE));
    let comps = build_anova_kernel(d, &params, sigma0)?;
    Ok(comps
        .into_iter()
        .map(|(k, dims)| {
            let z = if dims.len() == 1 {
                regular_grid(m, 1)
            } else {
                regular_grid(side, 2)
            };
            ComponentSpec::new(k, dims, z)
        })
        .collect())
}

/// One squared-exponential component per input, with the intercept folded
/// into the first.
fn se_specs(x: &ArrayView2<f64>, m: usize, var: f64, sigma0: f64) -> Vec<ComponentSpec> {
    (0..x.ncols())
        .map(|d| {
            let col = x.column(d);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let se = Kernel::squared_exp(var, &[INITIAL_LENGTHSCALE * span], vec![0]);
            let k = if d == 0 {
                Kernel::Sum(vec![Kernel::constant(sigma0), se])
            } else {
                se
            };
            let z = regular_grid(m, 1).mapv(|t| lo + t * span);
            ComponentSpec::new(k, vec![d], z)
        })
        .collect()
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Converged => "converged",
        Status::MaxIterReached => "max_iter_reached",
        Status::LineSearchFailed => "line_search_stalled",
    }
}

pub fn run(args: FitArgs, seed: u64) -> CliResult<String> {
    let data_path = require(args.data, "data")?;
    let output = require(args.output, "output")?;
    let fitted = parse_structure(args.structure.as_deref().unwrap_or("coupled"))?;
    let m = args.inducing.unwrap_or(16);
    if m == 0 {
        return Err(CliError::Usage("--inducing must be at least 1".into()));
    }
    let rank = args.rank.unwrap_or(m);
    let lik_name = args.likelihood.as_deref().unwrap_or("gaussian").to_string();

    let table = read_table(&data_path)?;
    let (x_raw, y, names) = split_target(&table)?;
    let d = x_raw.ncols();
    let kernel =
        parse_kernel(
            args.kernel
                .as_deref()
                .unwrap_or(if d >= 2 { "anova" } else { "se" }),
        )?;

    let (_, y_var) = mean_and_variance(&y);
    let noise = args.noise_variance.unwrap_or((y_var / 10.0).max(1e-6));
    let lik = parse_likelihood(&lik_name, noise)?;
    if lik == Likelihood::Poisson && y.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        return Err(CliError::Data(
            "Poisson targets must be non-negative integers".into(),
        ));
    }
    let (latent_mean, latent_var) = latent_moments(&lik, &y);
    let sigma0 = latent_mean.powi(2).max(1.0);

    let scaling = (kernel == KernelChoice::Anova && outside_unit_box(&x_raw.view()))
        .then(|| InputScaling::fit(&x_raw.view()));
    let x = match &scaling {
        Some(s) => s.apply(&x_raw.view())?,
        None => x_raw.clone(),
    };
    let specs = match kernel {
        KernelChoice::Anova => {
            if d < 2 {
                return Err(CliError::Usage(
                    "the ANOVA kernel needs at least two inputs; use --kernel se".into(),
                ));
            }
            anova_specs(d, m, latent_var / (d + 1) as f64, sigma0)?
        }
        KernelChoice::SquaredExp => se_specs(&x.view(), m, latent_var / d as f64, sigma0),
    };
    let n = x.nrows();
    let data = Dataset::new(x, y)?.with_names(names)?;
    validate_model(&specs, &data).into_result()?;

    let optimizer = OptimizerConfig {
        max_iter: args.max_iter.unwrap_or(1000),
        rel_tol: args.rel_tol.unwrap_or(1e-7),
        grad_tol: args.grad_tol.unwrap_or(1e-6),
        ..Default::default()
    };
    let optimize_hypers = args.optimize_hypers.unwrap_or(true);
    let fix_constant = !args.learn_intercept.unwrap_or(true);
    let num_components = specs.len();

    let start = Instant::now();
    let (saved, report, rank_used) = match fitted {
        Fitted::Sparse(structure) => {
            let state = init_state(&specs, structure, rank)?;
            let rank_used = state.rank();
            let mut model = SparseModel::new(specs, lik, state, data)?;
            let cfg = TrainConfig {
                optimizer,
                optimize_hypers,
                optimize_inducing: args.optimize_inducing.unwrap_or(false),
                restarts: args.restarts.unwrap_or(0),
                seed,
                batch_size: args.batch_size,
                adam: AdamConfig {
                    iterations: args.adam_iterations.unwrap_or(2000),
                    learning_rate: args.learning_rate.unwrap_or(1e-2),
                    ..Default::default()
                },
                fix_constant,
            };
            let report = train_sparse(&mut model, &cfg)?;
            (
                SavedModel::from_sparse(&model, scaling),
                report,
                Some(rank_used),
            )
        }
        Fitted::Full => {
            if n > FULL_MODEL_WARN {
                eprintln!("warning: the full model on {n} points is cubic in N and may be slow");
            }
            let mut model = FullModel::at_prior(specs, lik, data)?;
            let report = train_full_with(&mut model, &optimizer, optimize_hypers, fix_constant)?;
            (SavedModel::from_full(&model, scaling), report, None)
        }
    };
    let wall = start.elapsed().as_secs_f64();
    if !report.elbo.is_finite() {
        return Err(CliError::Numerical(format!(
            "final ELBO is {}",
            report.elbo
        )));
    }
    write_atomic(&output, &saved.to_text())?;

    let text = render_report(&ReportInputs {
        saved: &saved,
        report: &report,
        n,
        m,
        rank: rank_used,
        num_components,
        likelihood: &lik_name,
        kernel,
        wall,
        seed,
        model_path: &output.display().to_string(),
    });
    if let Some(path) = args.report {
        write_atomic(&path, &text)?;
    }
    Ok(text)
}

struct ReportInputs<'a> {
    saved: &'a SavedModel,
    report: &'a TrainReport,
    n: usize,
    m: usize,
    rank: Option<usize>,
    num_components: usize,
    likelihood: &'a str,
    kernel: KernelChoice,
    wall: f64,
    seed: u64,
    model_path: &'a str,
}

fn render_report(r: &ReportInputs) -> String {
    let mut s = String::new();
    let kernel = match r.kernel {
        KernelChoice::Anova => "anova",
        KernelChoice::SquaredExp => "se",
    };
    let _ = writeln!(s, "model: {}", r.model_path);
    let _ = writeln!(s, "structure: {}", r.saved.structure_name());
    let _ = writeln!(s, "kernel: {kernel}");
    let _ = writeln!(s, "likelihood: {}", r.likelihood);
    let _ = writeln!(s, "observations: {}", r.n);
    let _ = writeln!(s, "inputs: {}", r.saved.input_dim);
    let _ = writeln!(s, "components: {}", r.num_components);
    let _ = writeln!(s, "inducing_per_component: {}", r.m);
    if let Some(rank) = r.rank {
        let _ = writeln!(s, "rank: {rank}");
    }
    let _ = writeln!(
        s,
        "input_scaling: {}",
        if r.saved.scaling.is_some() {
            "min-max"
        } else {
            "none"
        }
    );
    let _ = writeln!(s, "elbo: {:.16e}", r.report.elbo);
    let _ = writeln!(s, "iterations: {}", r.report.iterations);
    let _ = writeln!(s, "evaluations: {}", r.report.evaluations);
    let _ = writeln!(s, "status: {}", status_name(r.report.status));
    let _ = writeln!(s, "clamped_variances: {}", r.report.clamped);
    let _ = writeln!(s, "wall_seconds: {:.3}", r.wall);
    let _ = writeln!(s, "rng: {RNG_NAME}");
    let _ = writeln!(s, "seed: {}", r.seed);
    for (c, spec) in r.saved.specs.iter().enumerate() {
        for (name, v) in spec.kernel.param_names().iter().zip(spec.kernel.params()) {
            let _ = writeln!(s, "hyper.c{c}.{name}: {:.6e}", v);
        }
    }
    if let Some(noise) = r.saved.lik.noise_variance() {
        let _ = writeln!(s, "hyper.noise_variance: {noise:.6e}");
    }
    s
}
