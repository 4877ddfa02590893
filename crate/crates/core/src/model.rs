//! Data model shared by the full and sparse inference code.

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::kernels::{Kernel, DOMAIN_SLACK};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let d = Dataset { x, y, names: None };
        d.check()?;
        Ok(d)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} column names for {} columns",
                names.len(),
                self.dim()
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        if self.x.nrows() != self.y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows but {} targets",
                self.x.nrows(),
                self.y.len()
            )));
        }
        if self.x.nrows() == 0 || self.x.ncols() == 0 {
            return Err(Error::InvalidParameter(
                "dataset needs N >= 1 and D >= 1".into(),
            ));
        }
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "dataset contains NaN or Inf".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by `idx`.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let x = Array2::from_shape_fn((idx.len(), self.dim()), |(i, j)| self.x[[idx[i], j]]);
        let y = idx.iter().map(|&i| self.y[i]).collect();
        Dataset {
            x,
            y,
            names: self.names.clone(),
        }
    }
}

/// Project the columns `dims` of `x`.
pub fn project(x: &ArrayView2<f64>, dims: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), dims.len()), |(i, j)| x[[i, dims[j]]])
}

/// Relative diagonal jitter of every latent prior: a component's prior
/// covariance is `K + ε I` with `ε = PRIOR_JITTER · s` and `s` the kernel's
/// [`Kernel::variance_scale`]. Scaling by the magnitude before cancellation
/// keeps `ε` above the rounding error of zero-mean kernels, whose entries
/// are small differences of large terms; without it a numerically
/// indefinite prior lets the optimizer drive variances below zero.
pub const PRIOR_JITTER: f64 = 1e-8;

/// `ε` for `kernel`.
pub fn prior_jitter(kernel: &Kernel) -> f64 {
    PRIOR_JITTER * kernel.variance_scale()
}

/// Add `ε` and its log-hyperparameter derivatives to a kernel matrix and
/// its gradient matrices.
pub fn add_prior_jitter(kernel: &Kernel, k: &mut Array2<f64>, dk: &mut [Array2<f64>]) {
    let eps = prior_jitter(kernel);
    k.diag_mut().mapv_inplace(|v| v + eps);
    for (d, g) in dk.iter_mut().zip(kernel.variance_scale_grads()) {
        d.diag_mut().mapv_inplace(|v| v + PRIOR_JITTER * g);
    }
}

/// One additive component: a kernel on a subset of the inputs plus its
/// inducing inputs. The kernel indexes into the projected inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpec {
    pub kernel: Kernel,
    pub active_dims: Vec<usize>,
    pub inducing: Array2<f64>,
}

impl ComponentSpec {
    pub fn new(kernel: Kernel, active_dims: Vec<usize>, inducing: Array2<f64>) -> Self {
        ComponentSpec {
            kernel,
            active_dims,
            inducing,
        }
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn project(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        project(x, &self.active_dims)
    }

    /// Prior covariance of the inducing values, jitter included.
    pub fn inducing_prior(&self) -> Result<Array2<f64>> {
        let z = self.inducing.view();
        let mut k = self.kernel.matrix(&z, &z)?;
        add_prior_jitter(&self.kernel, &mut k, &mut []);
        Ok(k)
    }
}

/// Regular grid of `per_dim^d` points on `[0, 1]^d`, last dimension fastest.
pub fn regular_grid(per_dim: usize, d: usize) -> Array2<f64> {
    let pts: Vec<f64> = if per_dim == 1 {
        vec![0.5]
    } else {
        (0..per_dim)
            .map(|i| i as f64 / (per_dim - 1) as f64)
            .collect()
    };
    let total = per_dim.pow(d as u32);
    Array2::from_shape_fn((total, d), |(r, c)| {
        let stride = per_dim.pow((d - 1 - c) as u32);
        pts[(r / stride) % per_dim]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    Coupled,
    MeanField,
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Coupled => "coupled",
            Structure::MeanField => "meanfield",
        })
    }
}

/// Parameters of `q(U) = N(K_UU α, (K_UU⁻¹ + B Bᵀ)⁻¹)`.
///
/// For [`Structure::MeanField`] the coupling factor has `M·C` columns and
/// component `c` only ever occupies column block `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub alpha: Array1<f64>,
    pub b: Array2<f64>,
    pub structure: Structure,
    num_inducing: usize,
    num_components: usize,
}

impl VariationalState {
    pub fn new(
        alpha: Array1<f64>,
        b: Array2<f64>,
        structure: Structure,
        num_inducing: usize,
        num_components: usize,
    ) -> Result<Self> {
        let mc = num_inducing * num_components;
        if alpha.len() != mc || b.nrows() != mc {
            return Err(Error::DimensionMismatch(format!(
                "alpha has {} entries and B has {} rows, expected M*C = {mc}",
                alpha.len(),
                b.nrows()
            )));
        }
        if b.ncols() == 0 {
            return Err(Error::InvalidRank(0));
        }
        let st = VariationalState {
            alpha,
            b,
            structure,
            num_inducing,
            num_components,
        };
        if structure == Structure::MeanField {
            if st.b.ncols() != mc {
                return Err(Error::InvalidRank(st.b.ncols()));
            }
            if !st.is_block_diagonal() {
                return Err(Error::InvalidParameter(
                    "mean-field coupling factor must be block diagonal".into(),
                ));
            }
        }
        Ok(st)
    }

    pub fn num_inducing(&self) -> usize {
        self.num_inducing
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    pub fn alpha_block(&self, c: usize) -> ndarray::ArrayView1<'_, f64> {
        let m = self.num_inducing;
        self.alpha.slice(s![c * m..(c + 1) * m])
    }

    pub fn b_block(&self, c: usize) -> ArrayView2<'_, f64> {
        let m = self.num_inducing;
        self.b.slice(s![c * m..(c + 1) * m, ..])
    }

    /// Whether entry `(row, col)` of B is free under the structure.
    pub fn is_free(&self, row: usize, col: usize) -> bool {
        match self.structure {
            Structure::Coupled => true,
            Structure::MeanField => row / self.num_inducing == col / self.num_inducing,
        }
    }

    pub fn is_block_diagonal(&self) -> bool {
        self.b
            .indexed_iter()
            .all(|((i, j), &v)| v == 0.0 || i / self.num_inducing == j / self.num_inducing)
    }

    /// Per-component `M×M` blocks of a mean-field factor.
    pub fn mean_field_blocks(&self) -> Vec<Array2<f64>> {
        let m = self.num_inducing;
        (0..self.num_components)
            .map(|c| {
                self.b
                    .slice(s![c * m..(c + 1) * m, c * m..(c + 1) * m])
                    .to_owned()
            })
            .collect()
    }
}

/// Parameters of the non-sparse model: `q(F) = N(K α, (K⁻¹ + (1⊗Λ)(1⊗Λ)ᵀ)⁻¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullVariationalState {
    pub alpha: Array1<f64>,
    pub lambda: Array1<f64>,
}

impl FullVariationalState {
    pub fn zeros(n: usize, c: usize) -> Self {
        FullVariationalState {
            alpha: Array1::zeros(n * c),
            lambda: Array1::zeros(n),
        }
    }

    pub fn alpha_block(&self, c: usize) -> ndarray::ArrayView1<'_, f64> {
        let n = self.lambda.len();
        self.alpha.slice(s![c * n..(c + 1) * n])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMarginals {
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
}

/// Per-point mean and variance of the summed predictor, optionally with the
/// per-component marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorMarginals {
    pub mu_sum: Array1<f64>,
    pub var_sum: Array1<f64>,
    pub per_component: Option<Vec<ComponentMarginals>>,
}

impl PredictorMarginals {
    pub fn len(&self) -> usize {
        self.mu_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_sum.is_empty()
    }
}

/// Prior-matching variational state: `α = 0`, `B = 0`.
pub fn init_state(
    specs: &[ComponentSpec],
    structure: Structure,
    rank: usize,
) -> Result<VariationalState> {
    if rank < 1 {
        return Err(Error::InvalidRank(rank));
    }
    let m = shared_inducing(specs)?;
    let c = specs.len();
    let r = match structure {
        Structure::Coupled => rank,
        Structure::MeanField => m * c,
    };
    VariationalState::new(
        Array1::zeros(m * c),
        Array2::zeros((m * c, r)),
        structure,
        m,
        c,
    )
}

fn shared_inducing(specs: &[ComponentSpec]) -> Result<usize> {
    let first = specs
        .first()
        .ok_or_else(|| Error::InvalidParameter("model needs at least one component".into()))?
        .num_inducing();
    if specs.iter().any(|s| s.num_inducing() != first) {
        return Err(Error::InvalidParameter(
            "all components must share the same number of inducing points".into(),
        ));
    }
    Ok(first)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoComponents,
    EmptyActiveDims {
        component: usize,
    },
    DimOutOfRange {
        component: usize,
        dim: usize,
        input_dim: usize,
    },
    KernelArity {
        component: usize,
        needs: usize,
        active: usize,
    },
    InducingShape {
        component: usize,
        cols: usize,
        active: usize,
    },
    NoInducing {
        component: usize,
    },
    SharedMViolation {
        component: usize,
        m: usize,
        expected: usize,
    },
    DomainError {
        component: usize,
        what: &'static str,
        value: f64,
    },
    InvalidKernel {
        component: usize,
        message: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoComponents => write!(f, "model has no components"),
            Violation::EmptyActiveDims { component } => {
                write!(f, "component {component}: no active dimensions")
            }
            Violation::DimOutOfRange {
                component,
                dim,
                input_dim,
            } => write!(
                f,
                "component {component}: active dim {dim} out of range for {input_dim} inputs"
            ),
            Violation::KernelArity {
                component,
                needs,
                active,
            } => write!(
                f,
                "component {component}: kernel reads {needs} columns but only {active} are active"
            ),
            Violation::InducingShape {
                component,
                cols,
                active,
            } => write!(
                f,
                "component {component}: inducing inputs have {cols} columns, expected {active}"
            ),
            Violation::NoInducing { component } => {
                write!(f, "component {component}: no inducing points")
            }
            Violation::SharedMViolation {
                component,
                m,
                expected,
            } => write!(
                f,
                "component {component}: {m} inducing points, other components use {expected}"
            ),
            Violation::DomainError {
                component,
                what,
                value,
            } => write!(
                f,
                "component {component}: {what} value {value} outside [0, 1]"
            ),
            Violation::InvalidKernel { component, message } => {
                write!(f, "component {component}: {message}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Check a model specification against a dataset. Collects every problem
/// instead of stopping at the first.
pub fn validate_model(specs: &[ComponentSpec], data: &Dataset) -> ValidationReport {
    let mut v = Vec::new();
    if specs.is_empty() {
        v.push(Violation::NoComponents);
    }
    let expected_m = specs.first().map(|s| s.num_inducing()).unwrap_or(0);
    for (c, spec) in specs.iter().enumerate() {
        let active = spec.active_dims.len();
        if active == 0 {
            v.push(Violation::EmptyActiveDims { component: c });
        }
        let mut dims_ok = true;
        for &d in &spec.active_dims {
            if d >= data.dim() {
                dims_ok = false;
                v.push(Violation::DimOutOfRange {
                    component: c,
                    dim: d,
                    input_dim: data.dim(),
                });
            }
        }
        if let Err(e) = spec.kernel.validate() {
            v.push(Violation::InvalidKernel {
                component: c,
                message: e.to_string(),
            });
        }
        let needs = spec.kernel.input_dim();
        if needs > active {
            v.push(Violation::KernelArity {
                component: c,
                needs,
                active,
            });
        }
        if spec.inducing.ncols() != active {
            v.push(Violation::InducingShape {
                component: c,
                cols: spec.inducing.ncols(),
                active,
            });
        }
        if spec.num_inducing() == 0 {
            v.push(Violation::NoInducing { component: c });
        } else if spec.num_inducing() != expected_m {
            v.push(Violation::SharedMViolation {
                component: c,
                m: spec.num_inducing(),
                expected: expected_m,
            });
        }
        let in_box = |x: f64| (-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&x);
        for local in spec.kernel.unit_box_dims() {
            if local < spec.inducing.ncols() {
                if let Some(&bad) = spec.inducing.column(local).iter().find(|&&z| !in_box(z)) {
                    v.push(Violation::DomainError {
                        component: c,
                        what: "inducing input",
                        value: bad,
                    });
                }
            }
            if dims_ok && local < active {
                let col = spec.active_dims[local];
                if let Some(&bad) = data.x.column(col).iter().find(|&&x| !in_box(x)) {
                    v.push(Violation::DomainError {
                        component: c,
                        what: "data input",
                        value: bad,
                    });
                }
            }
        }
    }
    ValidationReport { violations: v }
}
