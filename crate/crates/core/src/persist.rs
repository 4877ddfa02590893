//! Versioned plain-text model files (`addgp-v1`).
//!
//! ```text
//! format addgp-v1
//! structure coupled
//! likelihood gaussian -1.0000000000000000e0
//! input_dim 6
//! scaling_min ...          (optional, with scaling_max)
//! components 2
//! component 0
//! kernel se(dims=[0];log_var=...;log_ls=[...])
//! active_dims 0
//! inducing 16 1
//! <one row per line>
//! alpha 32
//! <one value per line>
//! b 32 4                   (λ: `lambda N` for full models)
//! <one row per line>
//! end
//! ```
//!
//! Floats are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::full::{full_marginals, FullModel};
use crate::kernels::Kernel;
use crate::likelihood::Likelihood;
use crate::model::{
    ComponentSpec, FullVariationalState, PredictorMarginals, Structure, VariationalState,
};
use crate::sparse::SparseModel;

pub const FORMAT_VERSION: &str = "addgp-v1";

/// Fitted variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedState {
    Sparse(VariationalState),
    Full(FullVariationalState),
}

/// Per-column min-max rescaling applied to raw inputs before the model.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl InputScaling {
    /// Column ranges of `x`; constant columns map to 0.
    pub fn fit(x: &ArrayView2<f64>) -> Self {
        let mut min = vec![f64::INFINITY; x.ncols()];
        let mut max = vec![f64::NEG_INFINITY; x.ncols()];
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        InputScaling { min, max }
    }

    pub fn apply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.min.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} input columns, scaling has {}",
                x.ncols(),
                self.min.len()
            )));
        }
        let mut out = x.to_owned();
        for ((_, j), v) in out.indexed_iter_mut() {
            let span = self.max[j] - self.min[j];
            *v = if span > 0.0 {
                (*v - self.min[j]) / span
            } else {
                0.0
            };
        }
        Ok(out)
    }
}

/// Everything needed to predict from a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub specs: Vec<ComponentSpec>,
    pub lik: Likelihood,
    pub state: FittedState,
    pub input_dim: usize,
    pub scaling: Option<InputScaling>,
}

impl SavedModel {
    pub fn from_sparse(m: &SparseModel, scaling: Option<InputScaling>) -> Self {
        SavedModel {
            specs: m.specs.clone(),
            lik: m.lik.clone(),
            state: FittedState::Sparse(m.state.clone()),
            input_dim: m.data.dim(),
            scaling,
        }
    }

    pub fn from_full(m: &FullModel, scaling: Option<InputScaling>) -> Self {
        SavedModel {
            specs: m.specs.clone(),
            lik: m.lik.clone(),
            state: FittedState::Full(m.state.clone()),
            input_dim: m.data.dim(),
            scaling,
        }
    }

    pub fn structure_name(&self) -> &'static str {
        match &self.state {
            FittedState::Sparse(s) => match s.structure {
                Structure::Coupled => "coupled",
                Structure::MeanField => "meanfield",
            },
            FittedState::Full(_) => "full",
        }
    }

    /// Apply the stored input scaling (if any) to raw inputs.
    pub fn prepare_inputs(&self, xq: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if xq.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "query has {} columns, model expects {}",
                xq.ncols(),
                self.input_dim
            )));
        }
        match &self.scaling {
            Some(s) => s.apply(xq),
            None => Ok(xq.to_owned()),
        }
    }

    /// Predictive marginals at raw (unscaled) inputs.
    pub fn predict(
        &self,
        xq: &ArrayView2<f64>,
        include_components: bool,
    ) -> Result<PredictorMarginals> {
        let x = self.prepare_inputs(xq)?;
        self.predict_scaled(&x.view(), include_components)
    }

    /// Predictive marginals at inputs already in model coordinates.
    pub fn predict_scaled(
        &self,
        x: &ArrayView2<f64>,
        include_components: bool,
    ) -> Result<PredictorMarginals> {
        match &self.state {
            FittedState::Sparse(st) => {
                crate::sparse::marginals_from_parts(&self.specs, st, x, include_components)
            }
            FittedState::Full(st) => full_marginals(&self.specs, st, x, include_components),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "format {FORMAT_VERSION}");
        let _ = writeln!(w, "structure {}", self.structure_name());
        match &self.lik {
            Likelihood::Gaussian { log_noise_variance } => {
                let _ = writeln!(w, "likelihood gaussian {}", fmt_f(*log_noise_variance));
            }
            Likelihood::Poisson => {
                let _ = writeln!(w, "likelihood poisson");
            }
        }
        let _ = writeln!(w, "input_dim {}", self.input_dim);
        if let Some(s) = &self.scaling {
            let _ = writeln!(w, "scaling_min {}", join(&s.min));
            let _ = writeln!(w, "scaling_max {}", join(&s.max));
        }
        let _ = writeln!(w, "components {}", self.specs.len());
        for (c, s) in self.specs.iter().enumerate() {
            let _ = writeln!(w, "component {c}");
            let _ = writeln!(w, "kernel {}", s.kernel);
            let dims: Vec<String> = s.active_dims.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(w, "active_dims {}", dims.join(" "));
            write_matrix(w, "inducing", &s.inducing);
        }
        match &self.state {
            FittedState::Sparse(st) => {
                write_vector(w, "alpha", &st.alpha);
                write_matrix(w, "b", &st.b);
            }
            FittedState::Full(st) => {
                write_vector(w, "alpha", &st.alpha);
                write_vector(w, "lambda", &st.lambda);
            }
        }
        let _ = writeln!(w, "end");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut p = Parser {
            lines: text.lines().enumerate().peekable(),
        };
        let version = p.keyed("format")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format '{version}', expected {FORMAT_VERSION}"
            )));
        }
        let structure = p.keyed("structure")?;
        let lik_line = p.keyed("likelihood")?;
        let mut lik_parts = lik_line.split_whitespace();
        let lik = match lik_parts.next() {
            Some("gaussian") => Likelihood::Gaussian {
                log_noise_variance: parse_f(lik_parts.next().unwrap_or(""))?,
            },
            Some("poisson") => Likelihood::Poisson,
            other => return Err(Error::Format(format!("unknown likelihood {other:?}"))),
        };
        let input_dim: usize = parse_num(&p.keyed("input_dim")?)?;
        let scaling = if p.peek_key() == Some("scaling_min") {
            let min = parse_floats(&p.keyed("scaling_min")?)?;
            let max = parse_floats(&p.keyed("scaling_max")?)?;
            if min.len() != input_dim || max.len() != input_dim {
                return Err(Error::Format(
                    "scaling length differs from input_dim".into(),
                ));
            }
            Some(InputScaling { min, max })
        } else {
            None
        };
        let n_comp: usize = parse_num(&p.keyed("components")?)?;
        let mut specs = Vec::with_capacity(n_comp);
        for c in 0..n_comp {
            let idx: usize = parse_num(&p.keyed("component")?)?;
            if idx != c {
                return Err(Error::Format(format!(
                    "expected component {c}, found {idx}"
                )));
            }
            let kernel = Kernel::from_str(&p.keyed("kernel")?)?;
            let dims = p
                .keyed("active_dims")?
                .split_whitespace()
                .map(parse_num)
                .collect::<Result<Vec<usize>>>()?;
            let inducing = p.matrix("inducing")?;
            specs.push(ComponentSpec::new(kernel, dims, inducing));
        }
        let alpha = p.vector("alpha")?;
        let state = match structure.as_str() {
            "coupled" | "meanfield" => {
                let b = p.matrix("b")?;
                let st = if structure == "coupled" {
                    Structure::Coupled
                } else {
                    Structure::MeanField
                };
                let m = specs.first().map(|s| s.num_inducing()).unwrap_or(0);
                FittedState::Sparse(VariationalState::new(alpha, b, st, m, n_comp)?)
            }
            "full" => {
                let lambda = p.vector("lambda")?;
                if alpha.len() != lambda.len() * n_comp {
                    return Err(Error::Format("alpha length differs from N·C".into()));
                }
                FittedState::Full(FullVariationalState { alpha, lambda })
            }
            other => return Err(Error::Format(format!("unknown structure '{other}'"))),
        };
        if p.keyed("end").is_err() {
            return Err(Error::Format("missing end marker".into()));
        }
        Ok(SavedModel {
            specs,
            lik,
            state,
            input_dim,
            scaling,
        })
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(" ")
}

fn write_vector(w: &mut String, key: &str, v: &Array1<f64>) {
    let _ = writeln!(w, "{key} {}", v.len());
    for x in v {
        let _ = writeln!(w, "{}", fmt_f(*x));
    }
}

fn write_matrix(w: &mut String, key: &str, m: &Array2<f64>) {
    let _ = writeln!(w, "{key} {} {}", m.nrows(), m.ncols());
    for row in m.rows() {
        let _ = writeln!(w, "{}", join(&row.to_vec()));
    }
}

fn parse_f(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Format(format!("invalid number '{s}'")))
}

fn parse_num(s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("invalid count '{s}'")))
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace().map(parse_f).collect()
}

struct Parser<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Parser<'a> {
    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.lines.by_ref() {
            if !l.trim().is_empty() {
                return Some((i + 1, l.trim()));
            }
        }
        None
    }

    fn peek_key(&mut self) -> Option<&'a str> {
        while let Some((_, l)) = self.lines.peek() {
            if l.trim().is_empty() {
                self.lines.next();
            } else {
                return l.split_whitespace().next();
            }
        }
        None
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let (no, line) = self
            .next_line()
            .ok_or_else(|| Error::Format(format!("unexpected end of file, expected '{key}'")))?;
        let (k, rest) = line.split_once(' ').unwrap_or((line, ""));
        if k != key {
            return Err(Error::Format(format!(
                "line {no}: expected '{key}', found '{k}'"
            )));
        }
        Ok(rest.trim().to_string())
    }

    fn vector(&mut self, key: &str) -> Result<Array1<f64>> {
        let n = parse_num(&self.keyed(key)?)?;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let (no, l) = self
                .next_line()
                .ok_or_else(|| Error::Format(format!("truncated '{key}' block")))?;
            v.push(parse_f(l).map_err(|e| Error::Format(format!("line {no}: {e}")))?);
        }
        Ok(Array1::from(v))
    }

    fn matrix(&mut self, key: &str) -> Result<Array2<f64>> {
        let head = self.keyed(key)?;
        let dims: Vec<usize> = head
            .split_whitespace()
            .map(parse_num)
            .collect::<Result<_>>()?;
        let [rows, cols] = dims[..] else {
            return Err(Error::Format(format!("'{key}' needs rows and columns")));
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (no, l) = self
                .next_line()
                .ok_or_else(|| Error::Format(format!("truncated '{key}' block")))?;
            let row = parse_floats(l).map_err(|e| Error::Format(format!("line {no}: {e}")))?;
            if row.len() != cols {
                return Err(Error::Format(format!(
                    "line {no}: {} values, expected {cols}",
                    row.len()
                )));
            }
            data.extend(row);
        }
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_state, regular_grid, Dataset};
    use ndarray::array;

    fn sparse() -> SavedModel {
        let x = Array2::from_shape_fn((8, 2), |(i, j)| ((i * 3 + j) % 8) as f64 / 7.0);
        let y = x.column(0).to_owned();
        let data = Dataset::new(x, y).unwrap();
        let specs = vec![
            ComponentSpec::new(
                Kernel::squared_exp(1.3, &[0.3], vec![0]),
                vec![0],
                regular_grid(3, 1),
            ),
            ComponentSpec::new(
                Kernel::squared_exp(0.7, &[0.4], vec![0]),
                vec![1],
                regular_grid(3, 1),
            ),
        ];
        let mut st = init_state(&specs, Structure::Coupled, 2).unwrap();
        st.alpha = Array1::from_shape_fn(6, |i| (i as f64 * 0.37).sin() / 3.0);
        st.b = Array2::from_shape_fn((6, 2), |(i, j)| 0.1 + 0.01 * (i * 2 + j) as f64 / 7.0);
        let m = SparseModel::new(specs, Likelihood::gaussian(0.1), st, data).unwrap();
        SavedModel::from_sparse(
            &m,
            Some(InputScaling {
                min: vec![0.0, -1.0],
                max: vec![1.0, 1.0 / 3.0],
            }),
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sparse();
        let back = SavedModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let q = array![[0.2, -0.5], [0.9, 0.1]];
        let p0 = m.predict(&q.view(), false).unwrap();
        let p1 = back.predict(&q.view(), false).unwrap();
        assert_eq!(p0.mu_sum, p1.mu_sum);
        assert_eq!(p0.var_sum, p1.var_sum);
    }

    #[test]
    fn version_is_checked() {
        let text = sparse().to_text().replace("addgp-v1", "addgp-v0");
        assert!(matches!(
            SavedModel::from_text(&text),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let text = sparse().to_text();
        let cut = &text[..text.len() / 2];
        assert!(SavedModel::from_text(cut).is_err());
    }

    #[test]
    fn query_dims_are_checked() {
        assert!(sparse().predict(&array![[0.1]].view(), false).is_err());
    }

    #[test]
    fn scaling_maps_to_unit_box() {
        let s = InputScaling::fit(&array![[1.0, 5.0], [3.0, 5.0], [2.0, 5.0]].view());
        let x = s.apply(&array![[1.0, 5.0], [3.0, 5.0]].view()).unwrap();
        assert_eq!(x, array![[0.0, 0.0], [1.0, 0.0]]);
    }
}
