//! Covariance functions.
//!
//! Leaves are the squared exponential, a constant, and the zero-mean
//! ("ANOVA") variant of a univariate squared exponential on `[0, 1]`; sums
//! and products compose them. All hyperparameters live in log space and the
//! gradient routines differentiate with respect to those log values.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use libm::erf;
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Slack allowed when checking that ANOVA inputs lie in `[0, 1]`.
pub const DOMAIN_SLACK: f64 = 1e-12;

/// Log-space hyperparameters of a squared-exponential leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
}

impl KernelParams {
    pub fn new(variance: f64, lengthscales: &[f64]) -> Self {
        KernelParams {
            log_variance: variance.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
        }
    }

    pub fn univariate(variance: f64, lengthscale: f64) -> Self {
        Self::new(variance, &[lengthscale])
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscale(&self, d: usize) -> f64 {
        self.log_lengthscales[d].exp()
    }

    pub fn is_valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v.exp().is_finite() && v.exp() > 0.0;
        ok(self.log_variance) && self.log_lengthscales.iter().all(|&l| ok(l))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    SquaredExp {
        params: KernelParams,
        dims: Vec<usize>,
    },
    Constant {
        log_variance: f64,
    },
    /// `g(x, y) - m(x) m(y) / D` for a univariate squared exponential `g`,
    /// its mean embedding `m` on `[0, 1]` and double integral `D`.
    ZeroMeanAnova {
        base: KernelParams,
        dim: usize,
    },
    Product(Vec<Kernel>),
    Sum(Vec<Kernel>),
}

/// Closed-form `∫₀¹ g(x, s) ds` for a univariate squared exponential `g`.
pub fn se_mean_embedding(params: &KernelParams, x: f64) -> f64 {
    params.variance() * unit_embedding(params.lengthscale(0), x)
}

/// Closed-form `∫₀¹∫₀¹ g(s, t) ds dt`.
pub fn se_double_integral(params: &KernelParams) -> f64 {
    params.variance() * unit_double_integral(params.lengthscale(0))
}

/// Build the zero-mean component kernel on input dimension 0.
pub fn zero_mean_component(base: KernelParams) -> Result<Kernel> {
    if base.log_lengthscales.len() != 1 {
        return Err(Error::InvalidParameter(format!(
            "zero-mean component needs a univariate base, got {} lengthscales",
            base.log_lengthscales.len()
        )));
    }
    Ok(Kernel::ZeroMeanAnova { base, dim: 0 })
}

// Embedding and double integral for unit variance.
fn unit_embedding(ell: f64, x: f64) -> f64 {
    let s = SQRT_2 * ell;
    ell * (PI / 2.0).sqrt() * (erf((1.0 - x) / s) + erf(x / s))
}

fn unit_embedding_dlogell(ell: f64, x: f64) -> f64 {
    let a = 1.0 - x;
    let two_l2 = 2.0 * ell * ell;
    unit_embedding(ell, x) - (a * (-a * a / two_l2).exp() + x * (-x * x / two_l2).exp())
}

fn unit_embedding_dx(ell: f64, x: f64) -> f64 {
    let two_l2 = 2.0 * ell * ell;
    (-x * x / two_l2).exp() - (-(1.0 - x) * (1.0 - x) / two_l2).exp()
}

fn unit_double_integral(ell: f64) -> f64 {
    let z = 1.0 / (SQRT_2 * ell);
    let one_minus_e = -(-1.0 / (2.0 * ell * ell)).exp_m1();
    ell * (2.0 * PI).sqrt() * erf(z) - 2.0 * ell * ell * one_minus_e
}

fn unit_double_integral_dlogell(ell: f64) -> f64 {
    let one_minus_e = -(-1.0 / (2.0 * ell * ell)).exp_m1();
    unit_double_integral(ell) - 2.0 * ell * ell * one_minus_e
}

/// Build the components of the ANOVA kernel
/// `σ₀ + Σ_{i=1}^{6} s_i(x_i, y_i) + s_7(x_1, y_1) s_8(x_2, y_2)`.
///
/// Returns one `(kernel, active_dims)` pair per additive component: the six
/// univariate terms (the constant folded into the first) followed by the
/// bivariate product on dimensions `(0, 1)`. Kernels use local dimensions,
/// i.e. they index into the projection of the inputs onto `active_dims`.
pub fn build_anova_kernel(
    dims: usize,
    params: &[KernelParams],
    sigma0: f64,
) -> Result<Vec<(Kernel, Vec<usize>)>> {
    if params.len() != dims + 2 {
        return Err(Error::InvalidParameter(format!(
            "expected {} parameter sets, got {}",
            dims + 2,
            params.len()
        )));
    }
    if dims < 2 {
        return Err(Error::InvalidParameter(
            "ANOVA kernel needs at least two input dimensions".into(),
        ));
    }
    let mut out = Vec::with_capacity(dims + 1);
    for (i, p) in params.iter().take(dims).enumerate() {
        let s = zero_mean_component(p.clone())?;
        let k = if i == 0 {
            Kernel::Sum(vec![
                Kernel::Constant {
                    log_variance: sigma0.ln(),
                },
                s,
            ])
        } else {
            s
        };
        out.push((k, vec![i]));
    }
    let s7 = zero_mean_component(params[dims].clone())?;
    let s8 = Kernel::ZeroMeanAnova {
        base: params[dims + 1].clone(),
        dim: 1,
    };
    out.push((Kernel::Product(vec![s7, s8]), vec![0, 1]));
    Ok(out)
}

impl Kernel {
    pub fn squared_exp(variance: f64, lengthscales: &[f64], dims: Vec<usize>) -> Self {
        Kernel::SquaredExp {
            params: KernelParams::new(variance, lengthscales),
            dims,
        }
    }

    pub fn constant(value: f64) -> Self {
        Kernel::Constant {
            log_variance: value.ln(),
        }
    }

    /// Number of input columns this kernel reads (largest index + 1).
    pub fn input_dim(&self) -> usize {
        match self {
            Kernel::SquaredExp { dims, .. } => dims.iter().map(|d| d + 1).max().unwrap_or(0),
            Kernel::Constant { .. } => 0,
            Kernel::ZeroMeanAnova { dim, .. } => dim + 1,
            Kernel::Product(ks) | Kernel::Sum(ks) => {
                ks.iter().map(|k| k.input_dim()).max().unwrap_or(0)
            }
        }
    }

    /// True if any leaf is restricted to the unit box.
    pub fn requires_unit_box(&self) -> bool {
        match self {
            Kernel::ZeroMeanAnova { .. } => true,
            Kernel::Product(ks) | Kernel::Sum(ks) => ks.iter().any(|k| k.requires_unit_box()),
            _ => false,
        }
    }

    /// Input columns restricted to the unit box.
    pub fn unit_box_dims(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_box_dims(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect_box_dims(&self, out: &mut Vec<usize>) {
        match self {
            Kernel::ZeroMeanAnova { dim, .. } => out.push(*dim),
            Kernel::Product(ks) | Kernel::Sum(ks) => {
                ks.iter().for_each(|k| k.collect_box_dims(out))
            }
            _ => {}
        }
    }

    /// Relabel input dimensions through `map` (local index -> new index).
    pub fn remap_dims(&self, map: &[usize]) -> Kernel {
        match self {
            Kernel::SquaredExp { params, dims } => Kernel::SquaredExp {
                params: params.clone(),
                dims: dims.iter().map(|&d| map[d]).collect(),
            },
            Kernel::Constant { .. } => self.clone(),
            Kernel::ZeroMeanAnova { base, dim } => Kernel::ZeroMeanAnova {
                base: base.clone(),
                dim: map[*dim],
            },
            Kernel::Product(ks) => Kernel::Product(ks.iter().map(|k| k.remap_dims(map)).collect()),
            Kernel::Sum(ks) => Kernel::Sum(ks.iter().map(|k| k.remap_dims(map)).collect()),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Kernel::SquaredExp { params, .. } => 1 + params.log_lengthscales.len(),
            Kernel::Constant { .. } => 1,
            Kernel::ZeroMeanAnova { .. } => 2,
            Kernel::Product(ks) | Kernel::Sum(ks) => ks.iter().map(|k| k.n_params()).sum(),
        }
    }

    /// Log hyperparameters in depth-first order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.push_params(&mut out);
        out
    }

    fn push_params(&self, out: &mut Vec<f64>) {
        match self {
            Kernel::SquaredExp { params, .. } => {
                out.push(params.log_variance);
                out.extend_from_slice(&params.log_lengthscales);
            }
            Kernel::Constant { log_variance } => out.push(*log_variance),
            Kernel::ZeroMeanAnova { base, .. } => {
                out.push(base.log_variance);
                out.push(base.log_lengthscales[0]);
            }
            Kernel::Product(ks) | Kernel::Sum(ks) => ks.iter().for_each(|k| k.push_params(out)),
        }
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "kernel has {} parameters, got {}",
                self.n_params(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        self.pull_params(&mut it);
        Ok(())
    }

    fn pull_params(&mut self, it: &mut impl Iterator<Item = f64>) {
        match self {
            Kernel::SquaredExp { params, .. } => {
                params.log_variance = it.next().unwrap();
                for l in params.log_lengthscales.iter_mut() {
                    *l = it.next().unwrap();
                }
            }
            Kernel::Constant { log_variance } => *log_variance = it.next().unwrap(),
            Kernel::ZeroMeanAnova { base, .. } => {
                base.log_variance = it.next().unwrap();
                base.log_lengthscales[0] = it.next().unwrap();
            }
            Kernel::Product(ks) | Kernel::Sum(ks) => ks.iter_mut().for_each(|k| k.pull_params(it)),
        }
    }

    /// Flags the log variances of constant leaves, aligned with [`Kernel::params`].
    pub fn constant_param_mask(&self) -> Vec<bool> {
        self.param_names()
            .iter()
            .map(|n| n.ends_with("const.log_variance"))
            .collect()
    }

    /// Human-readable parameter labels, aligned with [`Kernel::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.push_names("", &mut out);
        out
    }

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        match self {
            Kernel::SquaredExp { params, dims } => {
                out.push(format!("{prefix}se.log_variance"));
                for (d, _) in dims.iter().zip(&params.log_lengthscales) {
                    out.push(format!("{prefix}se.log_lengthscale[{d}]"));
                }
            }
            Kernel::Constant { .. } => out.push(format!("{prefix}const.log_variance")),
            Kernel::ZeroMeanAnova { dim, .. } => {
                out.push(format!("{prefix}zmanova[{dim}].log_variance"));
                out.push(format!("{prefix}zmanova[{dim}].log_lengthscale"));
            }
            Kernel::Product(ks) => {
                for (i, k) in ks.iter().enumerate() {
                    k.push_names(&format!("{prefix}prod{i}."), out);
                }
            }
            Kernel::Sum(ks) => {
                for (i, k) in ks.iter().enumerate() {
                    k.push_names(&format!("{prefix}sum{i}."), out);
                }
            }
        }
    }

    /// Structural validity: parameter finiteness and arity.
    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::SquaredExp { params, dims } => {
                if dims.is_empty() || dims.len() != params.log_lengthscales.len() {
                    return Err(Error::InvalidParameter(format!(
                        "squared exponential has {} dims but {} lengthscales",
                        dims.len(),
                        params.log_lengthscales.len()
                    )));
                }
                if !params.is_valid() {
                    return Err(Error::InvalidParameter(
                        "non-finite squared exponential parameter".into(),
                    ));
                }
            }
            Kernel::Constant { log_variance } => {
                if !log_variance.is_finite() || !log_variance.exp().is_finite() {
                    return Err(Error::InvalidParameter("non-finite constant".into()));
                }
            }
            Kernel::ZeroMeanAnova { base, .. } => {
                if base.log_lengthscales.len() != 1 || !base.is_valid() {
                    return Err(Error::InvalidParameter(
                        "zero-mean component needs one finite lengthscale".into(),
                    ));
                }
            }
            Kernel::Product(ks) | Kernel::Sum(ks) => {
                if ks.is_empty() {
                    return Err(Error::InvalidParameter("empty kernel composition".into()));
                }
                for k in ks {
                    k.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Check that every unit-box dimension of `x` lies in `[0, 1]`.
    pub fn check_domain(&self, x: &ArrayView2<f64>) -> Result<()> {
        for d in self.unit_box_dims() {
            for &v in x.column(d).iter() {
                if !(v >= -DOMAIN_SLACK && v <= 1.0 + DOMAIN_SLACK) {
                    return Err(Error::DomainError { value: v });
                }
            }
        }
        Ok(())
    }

    fn check_inputs(&self, x: &ArrayView2<f64>) -> Result<()> {
        let need = self.input_dim();
        if x.ncols() < need {
            return Err(Error::DimensionMismatch(format!(
                "kernel reads {need} input columns, got {}",
                x.ncols()
            )));
        }
        self.check_domain(x)
    }

    /// Cross-covariance matrix `k(x_i, x2_j)`.
    pub fn matrix(&self, x: &ArrayView2<f64>, x2: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(x)?;
        self.check_inputs(x2)?;
        Ok(self.matrix_unchecked(x, x2))
    }

    fn matrix_unchecked(&self, x: &ArrayView2<f64>, x2: &ArrayView2<f64>) -> Array2<f64> {
        let (n, m) = (x.nrows(), x2.nrows());
        match self {
            Kernel::SquaredExp { params, dims } => {
                let var = params.variance();
                let inv: Vec<f64> = (0..dims.len())
                    .map(|d| 1.0 / (params.lengthscale(d) * params.lengthscale(d)))
                    .collect();
                Array2::from_shape_fn((n, m), |(i, j)| {
                    let mut r2 = 0.0;
                    for (k, &d) in dims.iter().enumerate() {
                        let t = x[[i, d]] - x2[[j, d]];
                        r2 += t * t * inv[k];
                    }
                    var * (-0.5 * r2).exp()
                })
            }
            Kernel::Constant { log_variance } => Array2::from_elem((n, m), log_variance.exp()),
            Kernel::ZeroMeanAnova { base, dim } => {
                let var = base.variance();
                let ell = base.lengthscale(0);
                let inv = 1.0 / (ell * ell);
                let ex: Vec<f64> = x
                    .column(*dim)
                    .iter()
                    .map(|&v| unit_embedding(ell, v))
                    .collect();
                let ey: Vec<f64> = x2
                    .column(*dim)
                    .iter()
                    .map(|&v| unit_embedding(ell, v))
                    .collect();
                let dd = unit_double_integral(ell);
                Array2::from_shape_fn((n, m), |(i, j)| {
                    let t = x[[i, *dim]] - x2[[j, *dim]];
                    var * ((-0.5 * t * t * inv).exp() - ex[i] * ey[j] / dd)
                })
            }
            Kernel::Product(ks) => {
                let mut acc = Array2::from_elem((n, m), 1.0);
                for k in ks {
                    acc *= &k.matrix_unchecked(x, x2);
                }
                acc
            }
            Kernel::Sum(ks) => {
                let mut acc = Array2::zeros((n, m));
                for k in ks {
                    acc += &k.matrix_unchecked(x, x2);
                }
                acc
            }
        }
    }

    /// Diagonal `k(x_i, x_i)`.
    pub fn diag(&self, x: &ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_inputs(x)?;
        Ok(self.diag_with_grads_unchecked(x, false).0)
    }

    /// Diagonal and its derivatives with respect to each log parameter.
    pub fn diag_with_grads(&self, x: &ArrayView2<f64>) -> Result<(Array1<f64>, Vec<Array1<f64>>)> {
        self.check_inputs(x)?;
        Ok(self.diag_with_grads_unchecked(x, true))
    }

    fn diag_with_grads_unchecked(
        &self,
        x: &ArrayView2<f64>,
        want_grads: bool,
    ) -> (Array1<f64>, Vec<Array1<f64>>) {
        let n = x.nrows();
        match self {
            Kernel::SquaredExp { params, .. } => {
                let d = Array1::from_elem(n, params.variance());
                let mut g = Vec::new();
                if want_grads {
                    g.push(d.clone());
                    g.extend((0..params.log_lengthscales.len()).map(|_| Array1::zeros(n)));
                }
                (d, g)
            }
            Kernel::Constant { log_variance } => {
                let d = Array1::from_elem(n, log_variance.exp());
                let g = if want_grads { vec![d.clone()] } else { vec![] };
                (d, g)
            }
            Kernel::ZeroMeanAnova { base, dim } => {
                let var = base.variance();
                let ell = base.lengthscale(0);
                let dd = unit_double_integral(ell);
                let ddd = unit_double_integral_dlogell(ell);
                let mut d = Array1::zeros(n);
                let mut gl = Array1::zeros(n);
                for (i, &v) in x.column(*dim).iter().enumerate() {
                    let e = unit_embedding(ell, v);
                    let de = unit_embedding_dlogell(ell, v);
                    d[i] = var * (1.0 - e * e / dd);
                    gl[i] = -var * (2.0 * e * de / dd - e * e * ddd / (dd * dd));
                }
                let g = if want_grads {
                    vec![d.clone(), gl]
                } else {
                    vec![]
                };
                (d, g)
            }
            Kernel::Product(ks) => {
                let parts: Vec<_> = ks
                    .iter()
                    .map(|k| k.diag_with_grads_unchecked(x, want_grads))
                    .collect();
                let mut d = Array1::from_elem(n, 1.0);
                for (p, _) in &parts {
                    d *= p;
                }
                let mut g = Vec::new();
                if want_grads {
                    for (i, (_, gi)) in parts.iter().enumerate() {
                        let mut others = Array1::from_elem(n, 1.0);
                        for (j, (pj, _)) in parts.iter().enumerate() {
                            if j != i {
                                others *= pj;
                            }
                        }
                        g.extend(gi.iter().map(|gg| gg * &others));
                    }
                }
                (d, g)
            }
            Kernel::Sum(ks) => {
                let mut d = Array1::zeros(n);
                let mut g = Vec::new();
                for k in ks {
                    let (dk, gk) = k.diag_with_grads_unchecked(x, want_grads);
                    d += &dk;
                    g.extend(gk);
                }
                (d, g)
            }
        }
    }

    /// Cross-covariance and its derivatives with respect to each log
    /// parameter, in [`Kernel::params`] order.
    pub fn matrix_with_grads(
        &self,
        x: &ArrayView2<f64>,
        x2: &ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        self.check_inputs(x)?;
        self.check_inputs(x2)?;
        Ok(self.matrix_with_grads_unchecked(x, x2))
    }

    fn matrix_with_grads_unchecked(
        &self,
        x: &ArrayView2<f64>,
        x2: &ArrayView2<f64>,
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let (n, m) = (x.nrows(), x2.nrows());
        match self {
            Kernel::SquaredExp { params, dims } => {
                let k = self.matrix_unchecked(x, x2);
                let mut grads = vec![k.clone()];
                for (q, &d) in dims.iter().enumerate() {
                    let inv = 1.0 / (params.lengthscale(q) * params.lengthscale(q));
                    grads.push(Array2::from_shape_fn((n, m), |(i, j)| {
                        let t = x[[i, d]] - x2[[j, d]];
                        k[[i, j]] * t * t * inv
                    }));
                }
                (k, grads)
            }
            Kernel::Constant { .. } => {
                let k = self.matrix_unchecked(x, x2);
                (k.clone(), vec![k])
            }
            Kernel::ZeroMeanAnova { base, dim } => {
                let var = base.variance();
                let ell = base.lengthscale(0);
                let inv = 1.0 / (ell * ell);
                let col = |z: &ArrayView2<f64>, f: &dyn Fn(f64) -> f64| -> Vec<f64> {
                    z.column(*dim).iter().map(|&v| f(v)).collect()
                };
                let ex = col(x, &|v| unit_embedding(ell, v));
                let ey = col(x2, &|v| unit_embedding(ell, v));
                let dex = col(x, &|v| unit_embedding_dlogell(ell, v));
                let dey = col(x2, &|v| unit_embedding_dlogell(ell, v));
                let dd = unit_double_integral(ell);
                let ddd = unit_double_integral_dlogell(ell);
                let mut k = Array2::zeros((n, m));
                let mut gl = Array2::zeros((n, m));
                for i in 0..n {
                    for j in 0..m {
                        let t = x[[i, *dim]] - x2[[j, *dim]];
                        let g = (-0.5 * t * t * inv).exp();
                        let corr = ex[i] * ey[j] / dd;
                        k[[i, j]] = var * (g - corr);
                        let dcorr = (dex[i] * ey[j] + ex[i] * dey[j]) / dd - corr * ddd / dd;
                        gl[[i, j]] = var * (g * t * t * inv - dcorr);
                    }
                }
                (k.clone(), vec![k, gl])
            }
            Kernel::Product(ks) => {
                let parts: Vec<_> = ks
                    .iter()
                    .map(|k| k.matrix_with_grads_unchecked(x, x2))
                    .collect();
                let mut k = Array2::from_elem((n, m), 1.0);
                for (p, _) in &parts {
                    k *= p;
                }
                let mut grads = Vec::new();
                for (i, (_, gi)) in parts.iter().enumerate() {
                    let mut others = Array2::from_elem((n, m), 1.0);
                    for (j, (pj, _)) in parts.iter().enumerate() {
                        if j != i {
                            others *= pj;
                        }
                    }
                    grads.extend(gi.iter().map(|g| g * &others));
                }
                (k, grads)
            }
            Kernel::Sum(ks) => {
                let mut k = Array2::zeros((n, m));
                let mut grads = Vec::new();
                for sub in ks {
                    let (ks, gs) = sub.matrix_with_grads_unchecked(x, x2);
                    k += &ks;
                    grads.extend(gs);
                }
                (k, grads)
            }
        }
    }

    /// Derivatives `∂k(x_i, x2_j)/∂x_i[d]` for every input column `d` of `x`.
    pub fn input_grads(
        &self,
        x: &ArrayView2<f64>,
        x2: &ArrayView2<f64>,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_inputs(x)?;
        self.check_inputs(x2)?;
        Ok(self.input_grads_unchecked(x, x2))
    }

    fn input_grads_unchecked(&self, x: &ArrayView2<f64>, x2: &ArrayView2<f64>) -> Vec<Array2<f64>> {
        let (n, m) = (x.nrows(), x2.nrows());
        let dcount = x.ncols();
        let zeros = || {
            (0..dcount)
                .map(|_| Array2::zeros((n, m)))
                .collect::<Vec<_>>()
        };
        match self {
            Kernel::SquaredExp { params, dims } => {
                let k = self.matrix_unchecked(x, x2);
                let mut out = zeros();
                for (q, &d) in dims.iter().enumerate() {
                    let inv = 1.0 / (params.lengthscale(q) * params.lengthscale(q));
                    out[d] = Array2::from_shape_fn((n, m), |(i, j)| {
                        -k[[i, j]] * (x[[i, d]] - x2[[j, d]]) * inv
                    });
                }
                out
            }
            Kernel::Constant { .. } => zeros(),
            Kernel::ZeroMeanAnova { base, dim } => {
                let var = base.variance();
                let ell = base.lengthscale(0);
                let inv = 1.0 / (ell * ell);
                let dd = unit_double_integral(ell);
                let mut out = zeros();
                out[*dim] = Array2::from_shape_fn((n, m), |(i, j)| {
                    let a = x[[i, *dim]];
                    let b = x2[[j, *dim]];
                    let t = a - b;
                    let dg = -(-0.5 * t * t * inv).exp() * t * inv;
                    var * (dg - unit_embedding_dx(ell, a) * unit_embedding(ell, b) / dd)
                });
                out
            }
            Kernel::Product(ks) => {
                let vals: Vec<_> = ks.iter().map(|k| k.matrix_unchecked(x, x2)).collect();
                let mut out = zeros();
                for (i, k) in ks.iter().enumerate() {
                    let mut others = Array2::from_elem((n, m), 1.0);
                    for (j, v) in vals.iter().enumerate() {
                        if j != i {
                            others *= v;
                        }
                    }
                    for (d, g) in k.input_grads_unchecked(x, x2).into_iter().enumerate() {
                        out[d] += &(g * &others);
                    }
                }
                out
            }
            Kernel::Sum(ks) => {
                let mut out = zeros();
                for k in ks {
                    for (d, g) in k.input_grads_unchecked(x, x2).into_iter().enumerate() {
                        out[d] += &g;
                    }
                }
                out
            }
        }
    }

    /// Magnitude of the kernel before any cancellation: the variance of a
    /// leaf (the base variance for a zero-mean component), multiplied
    /// through products and added through sums.
    pub fn variance_scale(&self) -> f64 {
        match self {
            Kernel::SquaredExp { params, .. } => params.variance(),
            Kernel::Constant { log_variance } => log_variance.exp(),
            Kernel::ZeroMeanAnova { base, .. } => base.variance(),
            Kernel::Product(ks) => ks.iter().map(|k| k.variance_scale()).product(),
            Kernel::Sum(ks) => ks.iter().map(|k| k.variance_scale()).sum(),
        }
    }

    /// Derivatives of [`Kernel::variance_scale`] with respect to the log
    /// hyperparameters, aligned with [`Kernel::params`].
    pub fn variance_scale_grads(&self) -> Vec<f64> {
        match self {
            Kernel::SquaredExp { params, .. } => {
                let mut g = vec![0.0; 1 + params.log_lengthscales.len()];
                g[0] = params.variance();
                g
            }
            Kernel::Constant { log_variance } => vec![log_variance.exp()],
            Kernel::ZeroMeanAnova { base, .. } => vec![base.variance(), 0.0],
            Kernel::Sum(ks) => ks.iter().flat_map(|k| k.variance_scale_grads()).collect(),
            Kernel::Product(ks) => {
                let scales: Vec<f64> = ks.iter().map(|k| k.variance_scale()).collect();
                let mut out = Vec::with_capacity(self.n_params());
                for (i, k) in ks.iter().enumerate() {
                    let others: f64 = scales
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, v)| v)
                        .product();
                    out.extend(k.variance_scale_grads().into_iter().map(|g| g * others));
                }
                out
            }
        }
    }

    /// Split a sum into its constant summands and the rest. Used to report
    /// the intercept separately from a component's effect.
    pub fn constant_part(&self) -> f64 {
        match self {
            Kernel::Constant { log_variance } => log_variance.exp(),
            Kernel::Sum(ks) => ks.iter().map(|k| k.constant_part()).sum(),
            _ => 0.0,
        }
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_list<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::SquaredExp { params, dims } => {
                let ls: Vec<String> = params.log_lengthscales.iter().map(|&v| fmt_f(v)).collect();
                write!(
                    f,
                    "se(dims=[{}];log_var={};log_ls=[{}])",
                    fmt_list(dims),
                    fmt_f(params.log_variance),
                    ls.join(",")
                )
            }
            Kernel::Constant { log_variance } => {
                write!(f, "const(log_var={})", fmt_f(*log_variance))
            }
            Kernel::ZeroMeanAnova { base, dim } => write!(
                f,
                "zmanova(dim={};log_var={};log_ls={})",
                dim,
                fmt_f(base.log_variance),
                fmt_f(base.log_lengthscales[0])
            ),
            Kernel::Product(ks) | Kernel::Sum(ks) => {
                let name = if matches!(self, Kernel::Product(_)) {
                    "prod"
                } else {
                    "sum"
                };
                write!(f, "{name}(")?;
                for (i, k) in ks.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{k}")?;
                }
                write!(f, ")")
            }
        }
    }
}

struct Parser<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format(format!("kernel spec at offset {}: {msg}", self.pos))
    }

    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn eat(&mut self, tok: &str) -> Result<()> {
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            Ok(())
        } else {
            Err(self.err(&format!("expected '{tok}'")))
        }
    }

    fn ident(&mut self) -> &'a str {
        let r = self.rest();
        let end = r
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(r.len());
        self.pos += end;
        &r[..end]
    }

    fn token(&mut self) -> &'a str {
        let r = self.rest();
        let end = r.find([',', ';', ')', ']']).unwrap_or(r.len());
        self.pos += end;
        &r[..end]
    }

    fn float(&mut self) -> Result<f64> {
        let t = self.token();
        t.parse::<f64>()
            .map_err(|_| self.err(&format!("bad number '{t}'")))
    }

    fn usize(&mut self) -> Result<usize> {
        let t = self.token();
        t.parse::<usize>()
            .map_err(|_| self.err(&format!("bad index '{t}'")))
    }

    fn list<T>(&mut self, mut item: impl FnMut(&mut Self) -> Result<T>) -> Result<Vec<T>> {
        self.eat("[")?;
        let mut out = Vec::new();
        if self.rest().starts_with(']') {
            self.pos += 1;
            return Ok(out);
        }
        loop {
            out.push(item(self)?);
            if self.rest().starts_with(',') {
                self.pos += 1;
            } else {
                self.eat("]")?;
                return Ok(out);
            }
        }
    }

    fn kernel(&mut self) -> Result<Kernel> {
        let name = self.ident();
        self.eat("(")?;
        let k = match name {
            "se" => {
                self.eat("dims=")?;
                let dims = self.list(|p| p.usize())?;
                self.eat(";log_var=")?;
                let log_variance = self.float()?;
                self.eat(";log_ls=")?;
                let log_lengthscales = self.list(|p| p.float())?;
                Kernel::SquaredExp {
                    params: KernelParams {
                        log_variance,
                        log_lengthscales,
                    },
                    dims,
                }
            }
            "const" => {
                self.eat("log_var=")?;
                Kernel::Constant {
                    log_variance: self.float()?,
                }
            }
            "zmanova" => {
                self.eat("dim=")?;
                let dim = self.usize()?;
                self.eat(";log_var=")?;
                let log_variance = self.float()?;
                self.eat(";log_ls=")?;
                let ll = self.float()?;
                Kernel::ZeroMeanAnova {
                    base: KernelParams {
                        log_variance,
                        log_lengthscales: vec![ll],
                    },
                    dim,
                }
            }
            "sum" | "prod" => {
                let mut ks = vec![self.kernel()?];
                while self.rest().starts_with(',') {
                    self.pos += 1;
                    ks.push(self.kernel()?);
                }
                if name == "sum" {
                    Kernel::Sum(ks)
                } else {
                    Kernel::Product(ks)
                }
            }
            other => return Err(self.err(&format!("unknown kernel '{other}'"))),
        };
        self.eat(")")?;
        Ok(k)
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let mut p = Parser {
            s: &compact,
            pos: 0,
        };
        let k = p.kernel()?;
        if p.pos != compact.len() {
            return Err(p.err("trailing input"));
        }
        k.validate()?;
        Ok(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random::<f64>())
    }

    #[test]
    fn se_zero_distance_is_variance() {
        let k = Kernel::squared_exp(2.5, &[0.3], vec![0]);
        let x = array![[0.4]];
        let m = k.matrix(&x.view(), &x.view()).unwrap();
        assert!((m[[0, 0]] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn se_unit_distance() {
        let k = Kernel::squared_exp(1.0, &[1.0], vec![0]);
        let m = k
            .matrix(&array![[0.0]].view(), &array![[1.0]].view())
            .unwrap();
        assert!((m[[0, 0]] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn sum_on_disjoint_dims_adds() {
        let a = Kernel::squared_exp(1.0, &[0.5], vec![0]);
        let b = Kernel::squared_exp(2.0, &[0.2], vec![1]);
        let s = Kernel::Sum(vec![a.clone(), b.clone()]);
        let x = rand_points(10, 2, 1);
        let v = x.view();
        let want = a.matrix(&v, &v).unwrap() + b.matrix(&v, &v).unwrap();
        let got = s.matrix(&v, &v).unwrap();
        assert!((&got - &want).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn embedding_limits_and_symmetry() {
        let p = KernelParams::univariate(1.0, 1e6);
        assert!((se_mean_embedding(&p, 0.5) - 1.0).abs() < 1e-9);
        assert!((se_double_integral(&p) - 1.0).abs() < 1e-9);
        for &ell in &[0.05, 0.2, 1.0, 5.0] {
            let p = KernelParams::univariate(1.3, ell);
            for &x in &[0.0, 0.1, 0.37, 0.5] {
                let a = se_mean_embedding(&p, x);
                let b = se_mean_embedding(&p, 1.0 - x);
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn double_integral_scales_with_variance() {
        let p1 = KernelParams::univariate(1.0, 0.3);
        let p2 = KernelParams::univariate(2.0, 0.3);
        assert!((se_double_integral(&p2) - 2.0 * se_double_integral(&p1)).abs() < 1e-14);
        assert!(se_double_integral(&p1) > 0.0);
    }

    #[test]
    fn zero_mean_component_rejects_multivariate_base() {
        assert!(zero_mean_component(KernelParams::new(1.0, &[0.1, 0.2])).is_err());
    }

    #[test]
    fn anova_domain_is_enforced() {
        let k = zero_mean_component(KernelParams::univariate(1.0, 0.3)).unwrap();
        let bad = array![[1.1]];
        let good = array![[0.5]];
        assert!(matches!(
            k.matrix(&bad.view(), &good.view()),
            Err(Error::DomainError { .. })
        ));
        assert!(k
            .matrix(&array![[1.0 + 1e-13]].view(), &good.view())
            .is_ok());
    }

    #[test]
    fn zero_mean_component_is_symmetric() {
        let k = zero_mean_component(KernelParams::univariate(0.7, 0.25)).unwrap();
        let x = rand_points(12, 1, 3);
        let m = k.matrix(&x.view(), &x.view()).unwrap();
        assert!(crate::linalg::asymmetry(&m.view()) < 1e-15);
    }

    #[test]
    fn anova_builder_shape() {
        let params: Vec<_> = (0..8)
            .map(|i| KernelParams::univariate(1.0, 0.2 + 0.05 * i as f64))
            .collect();
        let comps = build_anova_kernel(6, &params, 0.5).unwrap();
        assert_eq!(comps.len(), 7);
        assert_eq!(comps[6].1, vec![0, 1]);
        assert!(matches!(comps[0].0, Kernel::Sum(_)));
        assert_eq!(comps[0].0.constant_part(), 0.5);

        // product definition on the diagonal
        let (a, b) = (0.3, 0.8);
        let x = array![[a, b]];
        let biv = comps[6].0.matrix(&x.view(), &x.view()).unwrap()[[0, 0]];
        let s7 = zero_mean_component(params[6].clone()).unwrap();
        let s8 = zero_mean_component(params[7].clone()).unwrap();
        let v7 = s7.matrix(&array![[a]].view(), &array![[a]].view()).unwrap()[[0, 0]];
        let v8 = s8.matrix(&array![[b]].view(), &array![[b]].view()).unwrap()[[0, 0]];
        assert!((biv - v7 * v8).abs() < 1e-15);
    }

    #[test]
    fn display_parse_round_trip() {
        let params: Vec<_> = (0..8)
            .map(|i| KernelParams::univariate(1.0 + i as f64 / 3.0, 0.1 * (i + 1) as f64))
            .collect();
        for (k, _) in build_anova_kernel(6, &params, 0.123456789).unwrap() {
            let back: Kernel = k.to_string().parse().unwrap();
            assert_eq!(back, k);
        }
        let se = Kernel::squared_exp(0.1, &[0.3, 7.0], vec![0, 2]);
        assert_eq!(se.to_string().parse::<Kernel>().unwrap(), se);
        assert!("se(dims=[0];log_var=x;log_ls=[0])"
            .parse::<Kernel>()
            .is_err());
        assert!("wiggle()".parse::<Kernel>().is_err());
    }

    fn finite_diff_check(k: &Kernel, x: &Array2<f64>, y: &Array2<f64>) {
        let (_, grads) = k.matrix_with_grads(&x.view(), &y.view()).unwrap();
        let (_, dgrads) = k.diag_with_grads(&x.view()).unwrap();
        let p0 = k.params();
        let h = 1e-6;
        for i in 0..p0.len() {
            let mut kp = k.clone();
            let mut km = k.clone();
            let mut pp = p0.clone();
            pp[i] += h;
            kp.set_params(&pp).unwrap();
            pp[i] -= 2.0 * h;
            km.set_params(&pp).unwrap();
            let fd = (kp.matrix(&x.view(), &y.view()).unwrap()
                - km.matrix(&x.view(), &y.view()).unwrap())
                / (2.0 * h);
            let err = (&fd - &grads[i]).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(err < 1e-6, "param {i}: {err}");
            let fdd = (kp.diag(&x.view()).unwrap() - km.diag(&x.view()).unwrap()) / (2.0 * h);
            let err = (&fdd - &dgrads[i])
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(err < 1e-6, "diag param {i}: {err}");
        }
        // inputs
        let ig = k.input_grads(&x.view(), &y.view()).unwrap();
        for r in 0..x.nrows() {
            for d in 0..x.ncols() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[r, d]] += h;
                xm[[r, d]] -= h;
                let fd = (k.matrix(&xp.view(), &y.view()).unwrap()
                    - k.matrix(&xm.view(), &y.view()).unwrap())
                    / (2.0 * h);
                for j in 0..y.nrows() {
                    assert!((fd[[r, j]] - ig[d][[r, j]]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = rand_points(5, 2, 10).mapv(|v| 0.05 + 0.9 * v);
        let y = rand_points(4, 2, 11).mapv(|v| 0.05 + 0.9 * v);
        let params: Vec<_> = (0..4)
            .map(|i| KernelParams::univariate(0.8 + i as f64 * 0.3, 0.15 + 0.2 * i as f64))
            .collect();
        let kernels = vec![
            Kernel::squared_exp(1.7, &[0.4, 0.9], vec![0, 1]),
            Kernel::constant(0.6),
            Kernel::ZeroMeanAnova {
                base: params[0].clone(),
                dim: 1,
            },
            Kernel::Sum(vec![
                Kernel::constant(2.0),
                Kernel::ZeroMeanAnova {
                    base: params[1].clone(),
                    dim: 0,
                },
            ]),
            Kernel::Product(vec![
                Kernel::ZeroMeanAnova {
                    base: params[2].clone(),
                    dim: 0,
                },
                Kernel::ZeroMeanAnova {
                    base: params[3].clone(),
                    dim: 1,
                },
            ]),
        ];
        for k in &kernels {
            finite_diff_check(k, &x, &y);
        }
    }
}
