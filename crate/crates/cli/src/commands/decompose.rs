use std::fmt::Write as _;
use std::path::PathBuf;

use ndarray::{Array1, Array2};

use addgp::{regular_grid, FittedState, SavedModel};

use crate::commands::predict::load_model;
use crate::config::{require, DecomposeArgs};
use crate::csvio::{format_float, write_table};
use crate::error::{CliError, CliResult};

/// Effect of one component on a grid, in raw input units.
#[derive(Debug, Clone, PartialEq)]
pub struct Effect {
    pub component: usize,
    pub active_dims: Vec<usize>,
    /// Grid in raw input units, one column per active input.
    pub grid: Array2<f64>,
    /// Component mean without its constant (intercept) part.
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
    pub intercept: f64,
}

/// Constant-kernel contribution to component `c`'s mean.
pub fn intercept(model: &SavedModel, c: usize) -> f64 {
    let k = model.specs[c].kernel.constant_part();
    let alpha_sum = match &model.state {
        FittedState::Sparse(st) => st.alpha_block(c).sum(),
        FittedState::Full(st) => st.alpha_block(c).sum(),
    };
    k * alpha_sum
}

/// Evaluate every component on a regular grid over its active inputs.
/// A component ignores the other inputs, so they are held at mid-box.
pub fn effects(model: &SavedModel, points: usize, points_2d: usize) -> CliResult<Vec<Effect>> {
    let d = model.input_dim;
    model
        .specs
        .iter()
        .enumerate()
        .map(|(c, spec)| {
            let dims = spec.active_dims.clone();
            let unit = match dims.len() {
                1 => regular_grid(points, 1),
                2 => regular_grid(points_2d, 2),
                k => {
                    return Err(CliError::Usage(format!(
                        "component {c} has {k} active inputs; only 1 or 2 can be tabulated"
                    )))
                }
            };
            let model_coords = match &model.scaling {
                Some(_) => unit.clone(),
                None => unit_to_training_range(model, c, &unit),
            };
            let mut xq = Array2::from_elem((unit.nrows(), d), 0.5);
            for (j, &dim) in dims.iter().enumerate() {
                xq.column_mut(dim).assign(&model_coords.column(j));
            }
            let p = model.predict_scaled(&xq.view(), true)?;
            let comp = &p.per_component.expect("components requested")[c];
            let offset = intercept(model, c);
            let grid = match &model.scaling {
                Some(s) => Array2::from_shape_fn(unit.dim(), |(i, j)| {
                    let dim = dims[j];
                    s.min[dim] + unit[[i, j]] * (s.max[dim] - s.min[dim])
                }),
                None => model_coords,
            };
            Ok(Effect {
                component: c,
                active_dims: dims,
                grid,
                mean: comp.mean.mapv(|v| v - offset),
                variance: comp.variance.clone(),
                intercept: offset,
            })
        })
        .collect()
}

/// Without stored scaling the grid spans the component's inducing inputs,
/// which cover the training range for the kernels the CLI builds.
fn unit_to_training_range(model: &SavedModel, c: usize, unit: &Array2<f64>) -> Array2<f64> {
    let z = &model.specs[c].inducing;
    if model.specs[c].kernel.requires_unit_box() {
        return unit.clone();
    }
    Array2::from_shape_fn(unit.dim(), |(i, j)| {
        let col = z.column(j);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lo + unit[[i, j]] * (hi - lo)
    })
}

fn file_name(e: &Effect) -> String {
    let dims: Vec<String> = e
        .active_dims
        .iter()
        .map(|d| format!("x{}", d + 1))
        .collect();
    format!("component_{}_{}.csv", e.component, dims.join("_"))
}

pub fn run(args: DecomposeArgs) -> CliResult<String> {
    let model = load_model(&require(args.model, "model")?)?;
    let dir: PathBuf = require(args.output_dir, "output-dir")?;
    let points = args.points.unwrap_or(200);
    let points_2d = args.points_2d.unwrap_or(50);
    if points < 2 || points_2d < 2 {
        return Err(CliError::Usage(
            "grids need at least two points per axis".into(),
        ));
    }
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut summary = String::new();
    for e in effects(&model, points, points_2d)? {
        let mut header: Vec<String> = e
            .active_dims
            .iter()
            .map(|d| format!("x{}", d + 1))
            .collect();
        header.push("mean".into());
        header.push("variance".into());
        let k = e.active_dims.len();
        let mut rows = Array2::zeros((e.grid.nrows(), k + 2));
        rows.slice_mut(ndarray::s![.., ..k]).assign(&e.grid);
        rows.column_mut(k).assign(&e.mean);
        rows.column_mut(k + 1).assign(&e.variance);
        let path = dir.join(file_name(&e));
        write_table(&path, &header, &rows.view())?;
        let _ = writeln!(
            summary,
            "{} ({} rows, intercept {})",
            path.display(),
            rows.nrows(),
            format_float(e.intercept)
        );
    }
    Ok(summary)
}
