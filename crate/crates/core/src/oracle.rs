//! Dense brute-force references for conjugate GP regression and Gaussian
//! KL divergences.
//!
//! Everything here forms explicit inverses by Gauss-Jordan elimination and
//! determinants by LU factorization, so it shares no numerical code path
//! with the Cholesky-based models it checks. Sizes are capped.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::block_diag;
use crate::model::{ComponentSpec, Dataset, PRIOR_JITTER};

/// Largest dense problem the oracles accept.
pub const DENSE_CAP: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub log_evidence: f64,
}

fn check_cap(n: usize) -> Result<()> {
    if n > DENSE_CAP {
        Err(Error::CapExceeded { n, cap: DENSE_CAP })
    } else {
        Ok(())
    }
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn dense_inverse(m: &Array2<f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch(
            "inverse of a non-square matrix".into(),
        ));
    }
    // Augmented [m | I] in one row-major buffer of width 2n.
    let w = 2 * n;
    let mut a = vec![0.0; n * w];
    for i in 0..n {
        for j in 0..n {
            a[i * w + j] = m[[i, j]];
        }
        a[i * w + n + i] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * w + col].abs().total_cmp(&a[j * w + col].abs()))
            .expect("non-empty range");
        let p = a[piv * w + col];
        if p == 0.0 || !p.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: col,
                value: p,
            });
        }
        if piv != col {
            for k in 0..w {
                a.swap(piv * w + k, col * w + k);
            }
        }
        let pivot_row: Vec<f64> = a[col * w..(col + 1) * w].iter().map(|v| v / p).collect();
        a[col * w..(col + 1) * w].copy_from_slice(&pivot_row);
        for i in 0..n {
            if i != col {
                let row = &mut a[i * w..(i + 1) * w];
                let f = row[col];
                if f != 0.0 {
                    for (r, pr) in row.iter_mut().zip(&pivot_row) {
                        *r -= f * pr;
                    }
                }
            }
        }
    }
    Ok(Array2::from_shape_fn((n, n), |(i, j)| a[i * w + n + j]))
}

/// `(sign, log|det|)` by LU with partial pivoting.
pub fn lu_logdet(m: &Array2<f64>) -> (f64, f64) {
    let n = m.nrows();
    let mut a: Vec<f64> = m.iter().copied().collect();
    let mut sign = 1.0;
    let mut logdet = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty range");
        if a[piv * n + col] == 0.0 {
            return (0.0, f64::NEG_INFINITY);
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            sign = -sign;
        }
        let p = a[col * n + col];
        if p < 0.0 {
            sign = -sign;
        }
        logdet += p.abs().ln();
        let (top, bottom) = a.split_at_mut((col + 1) * n);
        let pivot_row = &top[col * n + col..(col + 1) * n];
        for row in bottom.chunks_mut(n) {
            let f = row[col] / p;
            if f != 0.0 {
                for (r, pr) in row[col..].iter_mut().zip(pivot_row) {
                    *r -= f * pr;
                }
            }
        }
    }
    (sign, logdet)
}

/// `log N(y; mean, cov)`.
pub fn gaussian_log_density(y: &Array1<f64>, mean: &Array1<f64>, cov: &Array2<f64>) -> Result<f64> {
    let (sign, logdet) = lu_logdet(cov);
    if sign <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            pivot: 0,
            value: sign,
        });
    }
    let r = y - mean;
    let inv = dense_inverse(cov)?;
    let n = y.len() as f64;
    Ok(-0.5 * (r.dot(&inv.dot(&r)) + logdet + n * (2.0 * PI).ln()))
}

/// `KL[N(mu0, cov0) || N(mu1, cov1)]`.
pub fn dense_gaussian_kl(
    mu0: &Array1<f64>,
    cov0: &Array2<f64>,
    mu1: &Array1<f64>,
    cov1: &Array2<f64>,
) -> Result<f64> {
    let k = mu0.len();
    if cov0.dim() != (k, k) || cov1.dim() != (k, k) || mu1.len() != k {
        return Err(Error::DimensionMismatch(
            "KL between mismatched Gaussians".into(),
        ));
    }
    let (s0, ld0) = lu_logdet(cov0);
    let (s1, ld1) = lu_logdet(cov1);
    if s0 <= 0.0 || s1 <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            pivot: 0,
            value: s0.min(s1),
        });
    }
    let inv1 = dense_inverse(cov1)?;
    let d = mu1 - mu0;
    let tr: f64 = (&inv1 * &cov0.t()).sum();
    Ok(0.5 * (tr + d.dot(&inv1.dot(&d)) - k as f64 + ld1 - ld0))
}

fn component_kernels(
    specs: &[ComponentSpec],
    x: &ArrayView2<f64>,
    x2: &ArrayView2<f64>,
) -> Result<Vec<Array2<f64>>> {
    specs
        .iter()
        .map(|s| s.kernel.matrix(&s.project(x).view(), &s.project(x2).view()))
        .collect()
}

/// Component covariances on the training inputs, each with the prior
/// jitter `ε = PRIOR_JITTER · variance scale` on its diagonal.
fn training_kernels(specs: &[ComponentSpec], x: &ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    let mut ks = component_kernels(specs, x, x)?;
    for (k, s) in ks.iter_mut().zip(specs) {
        let eps = PRIOR_JITTER * s.kernel.variance_scale();
        for i in 0..k.nrows() {
            k[[i, i]] += eps;
        }
    }
    Ok(ks)
}

fn sum_all(ms: &[Array2<f64>]) -> Array2<f64> {
    ms.iter().skip(1).fold(ms[0].clone(), |a, m| a + m)
}

fn condition(
    data: &Dataset,
    noise_var: f64,
    k_train: &Array2<f64>,
    k_cross: &Array2<f64>,
    k_query: &Array2<f64>,
) -> Result<ExactPosterior> {
    let n = data.len();
    let mut s = k_train.clone();
    for i in 0..n {
        s[[i, i]] += noise_var;
    }
    let inv = dense_inverse(&s)?;
    let mean = k_cross.t().dot(&inv.dot(&data.y));
    let cov = k_query - &k_cross.t().dot(&inv).dot(k_cross);
    let log_evidence = gaussian_log_density(&data.y, &Array1::zeros(n), &s)?;
    Ok(ExactPosterior {
        mean,
        cov,
        log_evidence,
    })
}

/// Exact posterior of `Σ_c f_c` at `xq` under Gaussian noise.
pub fn exact_sum_posterior(
    specs: &[ComponentSpec],
    data: &Dataset,
    noise_var: f64,
    xq: &ArrayView2<f64>,
) -> Result<ExactPosterior> {
    check_cap(data.len())?;
    check_cap(xq.nrows())?;
    let x = data.x.view();
    let kt = sum_all(&training_kernels(specs, &x)?);
    let kx = sum_all(&component_kernels(specs, &x, xq)?);
    let kq = sum_all(&component_kernels(specs, xq, xq)?);
    condition(data, noise_var, &kt, &kx, &kq)
}

/// Exact posterior of component `c` at `xq` (projected internally).
pub fn exact_component_posterior(
    specs: &[ComponentSpec],
    data: &Dataset,
    noise_var: f64,
    c: usize,
    xq: &ArrayView2<f64>,
) -> Result<ExactPosterior> {
    check_cap(data.len())?;
    check_cap(xq.nrows())?;
    let spec = specs
        .get(c)
        .ok_or_else(|| Error::DimensionMismatch(format!("no component {c}")))?;
    let x = data.x.view();
    let kt = sum_all(&training_kernels(specs, &x)?);
    let kx = spec
        .kernel
        .matrix(&spec.project(&x).view(), &spec.project(xq).view())?;
    let kq = spec
        .kernel
        .matrix(&spec.project(xq).view(), &spec.project(xq).view())?;
    condition(data, noise_var, &kt, &kx, &kq)
}

/// Block-diagonal inducing prior covariance over all components: each
/// block is `K_UU + ε I` with `ε` the relative jitter times the kernel's
/// variance scale.
pub fn dense_kuu(specs: &[ComponentSpec]) -> Result<Array2<f64>> {
    let mut blocks: Vec<Array2<f64>> = specs
        .iter()
        .map(|s| s.kernel.matrix(&s.inducing.view(), &s.inducing.view()))
        .collect::<Result<_>>()?;
    for (b, s) in blocks.iter_mut().zip(specs) {
        let eps = PRIOR_JITTER * s.kernel.variance_scale();
        for i in 0..b.nrows() {
            b[[i, i]] += eps;
        }
    }
    Ok(block_diag(&blocks))
}

/// `(K⁻¹ + B Bᵀ)⁻¹` by explicit inversion.
pub fn dense_precision_posterior(k: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    check_cap(k.nrows())?;
    let prec = dense_inverse(k)? + b.dot(&b.t());
    dense_inverse(&prec)
}

/// Collapsed-bound solution for an additive model with stacked inducing
/// variables, at fixed hyperparameters and Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedPosterior {
    pub bound: f64,
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
}

/// Optimal sparse bound `log N(y; 0, Q + σ²I) − tr(K − Q)/(2σ²)` with
/// `Q = K_fU K_UU⁻¹ K_Uf`, and the corresponding predictive marginals of
/// the sum at `xq`.
pub fn collapsed_posterior(
    specs: &[ComponentSpec],
    data: &Dataset,
    noise_var: f64,
    xq: &ArrayView2<f64>,
) -> Result<CollapsedPosterior> {
    let n = data.len();
    check_cap(n)?;
    let x = data.x.view();
    let kuu = dense_kuu(specs)?;
    let kuf = concat_rows(specs, &x)?;
    let kuq = concat_rows(specs, xq)?;
    let kinv = dense_inverse(&kuu)?;
    let q = kuf.t().dot(&kinv).dot(&kuf);
    let ktrace: f64 = specs
        .iter()
        .map(|s| s.kernel.diag(&s.project(&x).view()).map(|d| d.sum()))
        .sum::<Result<f64>>()?;
    let mut cov = q.clone();
    for i in 0..n {
        cov[[i, i]] += noise_var;
    }
    let bound = gaussian_log_density(&data.y, &Array1::zeros(n), &cov)?
        - (ktrace - q.diag().sum()) / (2.0 * noise_var);

    let inner = dense_inverse(&(&kuu + &(kuf.dot(&kuf.t()) / noise_var)))?;
    let mean = kuq.t().dot(&inner.dot(&kuf.dot(&data.y))) / noise_var;
    let kqq: Array1<f64> = specs
        .iter()
        .map(|s| s.kernel.diag(&s.project(xq).view()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(Array1::zeros(xq.nrows()), |a, d| a + d);
    let explained = (&kuq * &(kinv - &inner).dot(&kuq)).sum_axis(Axis(0));
    Ok(CollapsedPosterior {
        bound,
        mean,
        variance: kqq - explained,
    })
}

fn concat_rows(specs: &[ComponentSpec], x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let blocks: Vec<Array2<f64>> = specs
        .iter()
        .map(|s| s.kernel.matrix(&s.inducing.view(), &s.project(x).view()))
        .collect::<Result<_>>()?;
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::DimensionMismatch(e.to_string()))
}

/// Dense reconstruction of a variational posterior and the quantities the
/// models compute in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseReference {
    /// `I + Sᵀ K S` with `S` the stacked precision factor.
    pub a: Array2<f64>,
    /// `KL[N(Kα, Σ) || N(0, K)]`.
    pub kl: f64,
    pub mu_sum: Array1<f64>,
    pub var_sum: Array1<f64>,
    pub component_var: Vec<Array1<f64>>,
    /// `log|K⁻¹ Σ|`.
    pub logdet_ratio: f64,
    /// `tr(K⁻¹ Σ)`.
    pub trace_ratio: f64,
}

fn dense_reference(
    k: &Array2<f64>,
    s: &Array2<f64>,
    alpha: &Array1<f64>,
) -> Result<(Array2<f64>, Array2<f64>, f64, f64, f64)> {
    let a = Array2::<f64>::eye(s.ncols()) + s.t().dot(k).dot(s);
    let sigma = dense_precision_posterior(k, s)?;
    let mean = k.dot(alpha);
    let kl = dense_gaussian_kl(&mean, &sigma, &Array1::zeros(mean.len()), k)?;
    let ratio = dense_inverse(k)?.dot(&sigma);
    let (_, logdet_ratio) = lu_logdet(&ratio);
    let trace_ratio = ratio.diag().sum();
    Ok((a, sigma, kl, logdet_ratio, trace_ratio))
}

/// Dense check of a full model: `K = blkdiag(K_c)` on the training inputs,
/// `S = 1_C ⊗ Λ`, `Σ_F = (K⁻¹ + S Sᵀ)⁻¹`; marginals at the training inputs.
pub fn dense_full_reference(model: &crate::full::FullModel) -> Result<DenseReference> {
    let n = model.data.len();
    let c = model.specs.len();
    check_cap(n * c)?;
    let x = model.data.x.view();
    let blocks = training_kernels(&model.specs, &x)?;
    let k = block_diag(&blocks);
    let mut s = Array2::zeros((n * c, n));
    for b in 0..c {
        for i in 0..n {
            s[[b * n + i, i]] = model.state.lambda[i];
        }
    }
    let (a, sigma, kl, logdet_ratio, trace_ratio) = dense_reference(&k, &s, &model.state.alpha)?;
    let mean = k.dot(&model.state.alpha);
    let mut mu_sum = Array1::zeros(n);
    let mut var_sum = Array1::zeros(n);
    let mut component_var = Vec::with_capacity(c);
    for b in 0..c {
        mu_sum += &mean.slice(ndarray::s![b * n..(b + 1) * n]);
        component_var.push(Array1::from_shape_fn(n, |i| sigma[[b * n + i, b * n + i]]));
        for b2 in 0..c {
            for i in 0..n {
                var_sum[i] += sigma[[b * n + i, b2 * n + i]];
            }
        }
    }
    Ok(DenseReference {
        a,
        kl,
        mu_sum,
        var_sum,
        component_var,
        logdet_ratio,
        trace_ratio,
    })
}

/// Dense check of a sparse model at query inputs `xq`:
/// `Σ_UU = (K_UU⁻¹ + B Bᵀ)⁻¹`, and for each component
/// `Var f_c = k_cc − Q_c + K_{*c} K_c⁻¹ Σ_cc K_c⁻¹ K_{c*}` with cross terms
/// between components from the off-diagonal blocks of `Σ_UU`.
pub fn dense_sparse_reference(
    model: &crate::sparse::SparseModel,
    xq: &ArrayView2<f64>,
) -> Result<DenseReference> {
    let k = dense_kuu(&model.specs)?;
    let (a, sigma, kl, logdet_ratio, trace_ratio) =
        dense_reference(&k, &model.state.b, &model.state.alpha)?;
    let kinv = dense_inverse(&k)?;
    let kuq = concat_rows(&model.specs, xq)?;
    // Projection of the query onto the inducing values: K_{*U} K_UU⁻¹.
    let proj = kuq.t().dot(&kinv);
    let mu_sum = kuq.t().dot(&model.state.alpha);
    let m = model.state.num_inducing();
    let nq = xq.nrows();
    let mut var_sum = Array1::zeros(nq);
    let mut component_var = Vec::new();
    for (c, spec) in model.specs.iter().enumerate() {
        let cols = ndarray::s![.., c * m..(c + 1) * m];
        let kc = kuq.slice(ndarray::s![c * m..(c + 1) * m, ..]).to_owned();
        let pc = proj.slice(cols).to_owned();
        let prior = spec.kernel.diag(&spec.project(xq).view())?;
        let nystrom = (&pc * &kc.t()).sum_axis(Axis(1));
        let sig_cc = sigma
            .slice(ndarray::s![c * m..(c + 1) * m, c * m..(c + 1) * m])
            .to_owned();
        let explained = (&pc.dot(&sig_cc) * &pc).sum_axis(Axis(1));
        let v = &prior - &nystrom + &explained;
        var_sum = var_sum + &prior - &nystrom;
        component_var.push(v);
    }
    var_sum = var_sum + (&proj.dot(&sigma) * &proj).sum_axis(Axis(1));
    Ok(DenseReference {
        a,
        kl,
        mu_sum,
        var_sum,
        component_var,
        logdet_ratio,
        trace_ratio,
    })
}
