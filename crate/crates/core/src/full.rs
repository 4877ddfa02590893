//! Full (non-sparse) additive model.
//!
//! The posterior over all component values at the training inputs is
//!
//! ```text
//! q(F) = N(K α, Σ_F),   Σ_F⁻¹ = K⁻¹ + (1⊗Λ)(1⊗Λ)ᵀ,
//! ```
//!
//! with `K = blkdiag(K_1, …, K_C)` and `Λ = diag(λ)`. This is the optimal
//! family for a factorizing likelihood, so in the conjugate case it recovers
//! the exact posterior. All quantities go through the `N × N` matrix
//! `A = I + Σ_c Λ K_c Λ`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::likelihood::{evaluate_batch, Likelihood};
use crate::linalg::{
    cholesky, column, column_sq_norms, frobenius_dot, tri_solve, BlockWhitening, Cholesky,
};
use crate::model::{
    add_prior_jitter, prior_jitter, validate_model, ComponentMarginals, ComponentSpec, Dataset,
    FullVariationalState, PredictorMarginals,
};
use crate::optim::{maximize, OptimizerConfig, Status};
use crate::sparse::{
    constant_positions, Hyperparameters, TrainReport, LOG_PARAM_BOUND, VARIANCE_FLOOR,
};

/// Largest training set the full model accepts.
pub const FULL_MODEL_CAP: usize = 5000;

#[derive(Debug, Clone, PartialEq)]
pub struct FullModel {
    /// Component kernels and active inputs. The inducing inputs are set to
    /// the projected training inputs and otherwise ignored.
    pub specs: Vec<ComponentSpec>,
    pub lik: Likelihood,
    pub state: FullVariationalState,
    pub data: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullGradient {
    pub alpha: Array1<f64>,
    pub lambda: Array1<f64>,
    pub kernels: Vec<Vec<f64>>,
    pub likelihood: Vec<f64>,
}

struct Evaluation {
    elbo: f64,
    kl: f64,
    clamped: usize,
    grad: Option<FullGradient>,
}

fn assemble_a(lambda: &Array1<f64>, ksum: &Array2<f64>) -> Result<(Array2<f64>, Cholesky)> {
    let n = lambda.len();
    let mut a = Array2::<f64>::eye(n);
    for ((i, j), v) in a.indexed_iter_mut() {
        *v += lambda[i] * ksum[[i, j]] * lambda[j];
    }
    let a = (&a + &a.t()) * 0.5;
    let l = cholesky(&a, 0.0)?;
    Ok((a, l))
}

fn scale_rows(m: &Array2<f64>, d: &Array1<f64>) -> Array2<f64> {
    m * &d.view().insert_axis(Axis(1))
}

fn kl_terms(
    state: &FullVariationalState,
    kc: &[&Array2<f64>],
    ksum: &Array2<f64>,
    l: &Cholesky,
) -> f64 {
    let quad: f64 = kc
        .iter()
        .enumerate()
        .map(|(c, k)| {
            let a = state.alpha_block(c);
            a.dot(&k.dot(&a))
        })
        .sum();
    // tr(Λ A⁻¹ Λ K_sum)
    let ainv = l.inverse();
    let lal = scale_rows(
        &scale_rows(&ainv, &state.lambda).t().to_owned(),
        &state.lambda,
    );
    let trace = frobenius_dot(&lal.view(), &ksum.t());
    0.5 * (l.logdet() + quad - trace)
}

fn check_hypers(specs: &[ComponentSpec], lik: &Likelihood) -> Result<()> {
    let bad = specs
        .iter()
        .flat_map(|s| s.kernel.params())
        .chain(lik.params())
        .any(|p| !(p.abs() <= LOG_PARAM_BOUND));
    if bad {
        return Err(Error::InvalidParameter(format!(
            "log hyperparameter outside ±{LOG_PARAM_BOUND}"
        )));
    }
    lik.validate()
}

fn evaluate(
    specs: &[ComponentSpec],
    lik: &Likelihood,
    state: &FullVariationalState,
    data: &Dataset,
    grads: Option<bool>,
) -> Result<Evaluation> {
    check_hypers(specs, lik)?;
    let want_hyper = grads == Some(true);
    let x = data.x.view();
    let n = data.len();
    let mut kc = Vec::with_capacity(specs.len());
    let mut dkc = Vec::with_capacity(specs.len());
    for s in specs {
        let xc = s.project(&x);
        if want_hyper {
            let (mut k, mut dk) = s.kernel.matrix_with_grads(&xc.view(), &xc.view())?;
            add_prior_jitter(&s.kernel, &mut k, &mut dk);
            kc.push(k);
            dkc.push(dk);
        } else {
            let mut k = s.kernel.matrix(&xc.view(), &xc.view())?;
            add_prior_jitter(&s.kernel, &mut k, &mut []);
            kc.push(k);
        }
    }
    let mut ksum = Array2::<f64>::zeros((n, n));
    let mut mu = Array1::<f64>::zeros(n);
    for (c, k) in kc.iter().enumerate() {
        ksum += k;
        mu += &k.dot(&state.alpha_block(c));
    }
    let (_, l) = assemble_a(&state.lambda, &ksum)?;
    let p = scale_rows(&ksum, &state.lambda);
    let w = tri_solve(&l, &p, false)?;
    let var = ksum.diag().to_owned() - column_sq_norms(&w);
    let terms = evaluate_batch(lik, &data.y, &mu, &var, VARIANCE_FLOOR)?;
    let refs: Vec<&Array2<f64>> = kc.iter().collect();
    let kl = kl_terms(state, &refs, &ksum, &l);
    let elbo = terms.value - kl;
    if grads.is_none() {
        return Ok(Evaluation {
            elbo,
            kl,
            clamped: terms.clamped,
            grad: None,
        });
    }

    let g = &terms.d_mu;
    let h = &terms.d_var;
    let ainv = l.inverse();
    let q = tri_solve(&l, &w, true)?;
    let qh = &q * &h.view().insert_axis(Axis(0));
    let g_a = qh.dot(&q.t()) - (&ainv - &ainv.dot(&ainv)) * 0.5;
    let g_p = &qh * -2.0;

    let c_count = specs.len();
    let mut d_alpha = Array1::zeros(n * c_count);
    for (c, k) in kc.iter().enumerate() {
        let ac = state.alpha_block(c);
        d_alpha
            .slice_mut(s![c * n..(c + 1) * n])
            .assign(&k.dot(&(g - &ac)));
    }
    let lam = &state.lambda;
    let gak = &g_a * &ksum;
    let d_lambda = (&g_p * &ksum).sum_axis(Axis(1)) + gak.dot(lam) * 2.0;

    let mut d_kern = Vec::new();
    let mut d_lik = vec![0.0; lik.n_params()];
    if want_hyper {
        // Shared part of ∂E/∂K_c: diag(h) + Λ G_P + Λ G_A Λ.
        let mut shared =
            scale_rows(&g_p, lam) + scale_rows(&scale_rows(&g_a, lam).t().to_owned(), lam);
        for i in 0..n {
            shared[[i, i]] += h[i];
        }
        for (c, dk) in dkc.iter().enumerate() {
            let ac = state.alpha_block(c).to_owned();
            let gk = &shared + &outer(g, &ac) - &outer(&ac, &ac) * 0.5;
            d_kern.push(
                dk.iter()
                    .map(|d| frobenius_dot(&gk.view(), &d.view()))
                    .collect(),
            );
        }
        d_lik = terms.d_params.clone();
    } else {
        for s in specs {
            d_kern.push(vec![0.0; s.kernel.n_params()]);
        }
    }
    Ok(Evaluation {
        elbo,
        kl,
        clamped: terms.clamped,
        grad: Some(FullGradient {
            alpha: d_alpha,
            lambda: d_lambda,
            kernels: d_kern,
            likelihood: d_lik,
        }),
    })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view()
        .insert_axis(Axis(1))
        .dot(&b.view().insert_axis(Axis(0)))
}

impl FullModel {
    /// Build a full model; inducing inputs of `specs` are replaced by the
    /// projected training inputs. Fails with `CapExceeded` above
    /// [`FULL_MODEL_CAP`] points.
    pub fn new(
        mut specs: Vec<ComponentSpec>,
        lik: Likelihood,
        state: FullVariationalState,
        data: Dataset,
    ) -> Result<Self> {
        if data.len() > FULL_MODEL_CAP {
            return Err(Error::CapExceeded {
                n: data.len(),
                cap: FULL_MODEL_CAP,
            });
        }
        for s in specs.iter_mut() {
            if s.active_dims.iter().all(|&d| d < data.dim()) {
                s.inducing = s.project(&data.x.view());
            }
        }
        validate_model(&specs, &data).into_result()?;
        lik.validate()?;
        if state.lambda.len() != data.len() || state.alpha.len() != data.len() * specs.len() {
            return Err(Error::DimensionMismatch(format!(
                "state has {} alpha and {} lambda entries for N={}, C={}",
                state.alpha.len(),
                state.lambda.len(),
                data.len(),
                specs.len()
            )));
        }
        Ok(FullModel {
            specs,
            lik,
            state,
            data,
        })
    }

    /// Model at the prior: `α = 0`, `λ = 0`.
    pub fn at_prior(specs: Vec<ComponentSpec>, lik: Likelihood, data: Dataset) -> Result<Self> {
        let st = FullVariationalState::zeros(data.len(), specs.len());
        FullModel::new(specs, lik, st, data)
    }

    pub fn num_components(&self) -> usize {
        self.specs.len()
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters {
            kernels: self.specs.iter().map(|s| s.kernel.params()).collect(),
            likelihood: self.lik.params(),
        }
    }

    fn training_kernels(&self) -> Result<Vec<Array2<f64>>> {
        let x = self.data.x.view();
        self.specs
            .iter()
            .map(|s| {
                let xc = s.project(&x);
                let mut k = s.kernel.matrix(&xc.view(), &xc.view())?;
                add_prior_jitter(&s.kernel, &mut k, &mut []);
                Ok(k)
            })
            .collect()
    }

    /// `A = I + Σ_c Λ K_c Λ` and its Cholesky factor.
    pub fn assemble_a_full(&self) -> Result<(Array2<f64>, Cholesky)> {
        let kc = self.training_kernels()?;
        let ksum = kc
            .iter()
            .fold(Array2::zeros((self.data.len(), self.data.len())), |a, k| {
                a + k
            });
        assemble_a(&self.state.lambda, &ksum)
    }

    pub fn kl_full(&self) -> Result<f64> {
        Ok(evaluate(&self.specs, &self.lik, &self.state, &self.data, None)?.kl)
    }

    pub fn elbo_full(&self) -> Result<f64> {
        Ok(evaluate(&self.specs, &self.lik, &self.state, &self.data, None)?.elbo)
    }

    pub fn clamp_count(&self) -> Result<usize> {
        Ok(evaluate(&self.specs, &self.lik, &self.state, &self.data, None)?.clamped)
    }

    /// ELBO and gradient with respect to `(α, λ)` and, when `hypers` is set,
    /// the log hyperparameters.
    pub fn elbo_and_gradient(&self, hypers: bool) -> Result<(f64, FullGradient)> {
        let e = evaluate(
            &self.specs,
            &self.lik,
            &self.state,
            &self.data,
            Some(hypers),
        )?;
        Ok((e.elbo, e.grad.expect("gradient requested")))
    }

    /// Marginals at the training inputs.
    pub fn marginals_full(&self, include_components: bool) -> Result<PredictorMarginals> {
        self.marginals_at(&self.data.x.view(), include_components)
    }

    /// Marginals at arbitrary inputs.
    pub fn marginals_at(
        &self,
        xq: &ArrayView2<f64>,
        include_components: bool,
    ) -> Result<PredictorMarginals> {
        full_marginals(&self.specs, &self.state, xq, include_components)
    }

    fn pack(&self, hypers: bool) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .state
            .alpha
            .iter()
            .chain(self.state.lambda.iter())
            .copied()
            .collect();
        if hypers {
            for s in &self.specs {
                v.extend(s.kernel.params());
            }
            v.extend(self.lik.params());
        }
        v
    }

    fn unpack(&mut self, hypers: bool, v: &[f64]) -> Result<()> {
        let na = self.state.alpha.len();
        let nl = self.state.lambda.len();
        let expected = na
            + nl
            + if hypers {
                self.specs
                    .iter()
                    .map(|s| s.kernel.n_params())
                    .sum::<usize>()
                    + self.lik.n_params()
            } else {
                0
            };
        if v.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters, expected {expected}",
                v.len()
            )));
        }
        self.state
            .alpha
            .iter_mut()
            .zip(&v[..na])
            .for_each(|(a, b)| *a = *b);
        self.state
            .lambda
            .iter_mut()
            .zip(&v[na..na + nl])
            .for_each(|(a, b)| *a = *b);
        if hypers {
            let mut off = na + nl;
            for s in self.specs.iter_mut() {
                let k = s.kernel.n_params();
                s.kernel.set_params(&v[off..off + k])?;
                off += k;
            }
            self.lik.set_params(&v[off..])?;
        }
        Ok(())
    }

    fn pack_gradient(g: &FullGradient, hypers: bool) -> Vec<f64> {
        let mut v: Vec<f64> = g.alpha.iter().chain(g.lambda.iter()).copied().collect();
        if hypers {
            for k in &g.kernels {
                v.extend(k);
            }
            v.extend(&g.likelihood);
        }
        v
    }

    /// Move `λ = 0` (a stationary point in `λ`) to `λ_n = √(−2 ∂E_n/∂v_n)`
    /// evaluated at the prior marginals, the stationarity condition of the
    /// precision with the expected log-likelihood curvature frozen there.
    pub fn seed_lambda(&mut self) -> Result<()> {
        let m = self.marginals_full(false)?;
        for (i, l) in self.state.lambda.iter_mut().enumerate() {
            let t = self.lik.point_term(
                self.data.y[i],
                m.mu_sum[i],
                m.var_sum[i].max(VARIANCE_FLOOR),
            );
            let s = (-2.0 * t.d_var).max(0.0).sqrt();
            *l = if s > 0.0 && s.is_finite() { s } else { 1.0 };
        }
        Ok(())
    }
}

/// Marginals of a full model from its parts, with the training inputs
/// stored as each component's inducing inputs:
/// `μ = Σ_c K_{*c} α_c`, `v = Σ_c k_c(x,x) − ‖L_A⁻¹ Λ Σ_c K_{c,*}‖²`,
/// with the prior jitter treated as a white-noise term of each kernel.
pub fn full_marginals(
    specs: &[ComponentSpec],
    state: &FullVariationalState,
    xq: &ArrayView2<f64>,
    include_components: bool,
) -> Result<PredictorMarginals> {
    let n = state.lambda.len();
    let nq = xq.nrows();
    let mut ksum = Array2::zeros((n, n));
    let mut cross = Vec::with_capacity(specs.len());
    let mut kss = Vec::with_capacity(specs.len());
    for s in specs {
        let z = s.inducing.view();
        if z.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} stored inputs for {n} lambda entries",
                z.nrows()
            )));
        }
        let qc = s.project(xq);
        let mut kzz = s.kernel.matrix(&z, &z)?;
        add_prior_jitter(&s.kernel, &mut kzz, &mut []);
        ksum += &kzz;
        // The jitter acts as a nugget: it reaches the cross covariance only
        // where a query coincides with a stored input.
        let eps = prior_jitter(&s.kernel);
        let mut kx = s.kernel.matrix(&z, &qc.view())?;
        for (i, zi) in z.outer_iter().enumerate() {
            for (j, qj) in qc.outer_iter().enumerate() {
                if zi == qj {
                    kx[[i, j]] += eps;
                }
            }
        }
        cross.push(kx);
        kss.push(s.kernel.diag(&qc.view())? + eps);
    }
    let (_, l) = assemble_a(&state.lambda, &ksum)?;
    let mut mu = Array1::zeros(nq);
    let mut prior = Array1::zeros(nq);
    let mut p = Array2::zeros((n, nq));
    let mut per = Vec::new();
    for (c, (kx, kd)) in cross.iter().zip(&kss).enumerate() {
        let mc = kx.t().dot(&state.alpha_block(c));
        let pc = scale_rows(kx, &state.lambda);
        if include_components {
            let wc = tri_solve(&l, &pc, false)?;
            per.push(ComponentMarginals {
                mean: mc.clone(),
                variance: kd - &column_sq_norms(&wc),
            });
        }
        mu += &mc;
        prior += kd;
        p += &pc;
    }
    let w = tri_solve(&l, &p, false)?;
    Ok(PredictorMarginals {
        mu_sum: mu,
        var_sum: prior - column_sq_norms(&w),
        per_component: include_components.then_some(per),
    })
}

/// One L-BFGS run; `α` is optimized in whitened coordinates
/// `α_c = L_c⁻ᵀ α̃_c` with `L_c` the factor of `K_c` at the start of the run.
fn optimize_phase(
    model: &mut FullModel,
    hypers: bool,
    cfg: &OptimizerConfig,
    fix_constant: bool,
) -> Result<crate::optim::OptimResult> {
    let w = BlockWhitening::new(&model.training_kernels()?)?;
    let frozen = if hypers && fix_constant {
        constant_positions(
            &model.specs,
            model.state.alpha.len() + model.state.lambda.len(),
        )
    } else {
        Vec::new()
    };
    let mut internal = model.clone();
    internal.state.alpha = w.whiten(&column(&model.state.alpha))?.column(0).to_owned();
    let mut work = internal.clone();
    let r = maximize(
        |v| {
            work.unpack(hypers, v)?;
            let mut state = work.state.clone();
            state.alpha = w.unwhiten(&column(&state.alpha))?.column(0).to_owned();
            let e = evaluate(&work.specs, &work.lik, &state, &work.data, Some(hypers))?;
            let mut g = e.grad.expect("gradient requested");
            g.alpha = w.pull_back(&column(&g.alpha))?.column(0).to_owned();
            let mut packed = FullModel::pack_gradient(&g, hypers);
            for &i in &frozen {
                packed[i] = 0.0;
            }
            Ok((e.elbo, packed))
        },
        internal.pack(hypers),
        cfg,
    )?;
    internal.unpack(hypers, &r.x)?;
    internal.state.alpha = w
        .unwhiten(&column(&internal.state.alpha))?
        .column(0)
        .to_owned();
    *model = internal;
    Ok(r)
}

/// Maximize the ELBO over `(α, λ)`, then (with `optimize_hypers`) jointly
/// with the log hyperparameters, then once more over `(α, λ)`.
pub fn train_full(
    model: &mut FullModel,
    cfg: &OptimizerConfig,
    optimize_hypers: bool,
) -> Result<TrainReport> {
    train_full_with(model, cfg, optimize_hypers, false)
}

/// [`train_full`], optionally holding constant-kernel variances fixed.
pub fn train_full_with(
    model: &mut FullModel,
    cfg: &OptimizerConfig,
    optimize_hypers: bool,
    fix_constant: bool,
) -> Result<TrainReport> {
    if model.state.lambda.iter().all(|&l| l == 0.0) {
        model.seed_lambda()?;
    }
    let r1 = optimize_phase(model, false, cfg, false)?;
    let mut trace = r1.trace;
    let mut iterations = r1.iterations;
    let mut evaluations = r1.evaluations;
    let mut status = r1.status;
    if optimize_hypers {
        for hyp in [true, false] {
            let r = optimize_phase(model, hyp, cfg, fix_constant)?;
            trace.extend_from_slice(&r.trace[1..]);
            iterations += r.iterations;
            evaluations += r.evaluations;
            if status == Status::Converged || hyp {
                status = r.status;
            }
        }
    }
    let e = evaluate(&model.specs, &model.lik, &model.state, &model.data, None)?;
    Ok(TrainReport {
        elbo: e.elbo,
        trace,
        iterations,
        evaluations,
        status,
        clamped: e.clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Kernel;
    use ndarray::array;

    fn toy() -> FullModel {
        let x = Array2::from_shape_fn((6, 2), |(i, j)| ((i * 3 + j * 5) % 7) as f64 / 6.0);
        let y = x.map_axis(Axis(1), |r| r[0] - r[1]);
        let data = Dataset::new(x, y).unwrap();
        let specs = vec![
            ComponentSpec::new(
                Kernel::squared_exp(1.0, &[0.5], vec![0]),
                vec![0],
                Array2::zeros((0, 1)),
            ),
            ComponentSpec::new(
                Kernel::squared_exp(0.5, &[0.3], vec![0]),
                vec![1],
                Array2::zeros((0, 1)),
            ),
        ];
        FullModel::at_prior(specs, Likelihood::gaussian(0.2), data).unwrap()
    }

    #[test]
    fn a_is_identity_at_zero_lambda() {
        let m = toy();
        let (a, _) = m.assemble_a_full().unwrap();
        assert_eq!(a, Array2::<f64>::eye(6));
        assert_eq!(m.kl_full().unwrap(), 0.0);
    }

    #[test]
    fn a_diagonal_arithmetic() {
        let x = array![[0.0], [1.0]];
        let data = Dataset::new(x, array![0.0, 0.0]).unwrap();
        let k = Kernel::squared_exp(1.0, &[1e-3], vec![0]);
        let specs = vec![ComponentSpec::new(k, vec![0], Array2::zeros((0, 1)))];
        let st = FullVariationalState {
            alpha: Array1::zeros(2),
            lambda: array![1.0, 2.0],
        };
        let m = FullModel::new(specs, Likelihood::gaussian(1.0), st, data).unwrap();
        let (a, _) = m.assemble_a_full().unwrap();
        // 1 + λ²(1 + ε) with the prior jitter ε.
        let eps = crate::model::PRIOR_JITTER;
        assert!((a[[0, 0]] - (2.0 + eps)).abs() < 1e-15);
        assert!((a[[1, 1]] - (5.0 + 4.0 * eps)).abs() < 1e-15);
        assert!(a[[0, 1]].abs() < 1e-15);
    }

    #[test]
    fn prior_marginals() {
        let m = toy();
        let pm = m.marginals_full(true).unwrap();
        assert!(pm.mu_sum.iter().all(|&v| v == 0.0));
        // Component variances 1 and 0.5, each with its jitter.
        let eps = crate::model::PRIOR_JITTER;
        assert!(pm
            .var_sum
            .iter()
            .all(|&v| (v - 1.5 * (1.0 + eps)).abs() < 1e-14));
        let pc = pm.per_component.unwrap();
        assert!(pc[1]
            .variance
            .iter()
            .all(|&v| (v - 0.5 * (1.0 + eps)).abs() < 1e-14));
    }

    #[test]
    fn inducing_inputs_become_training_inputs() {
        let m = toy();
        assert_eq!(m.specs[1].inducing.column(0), m.data.x.column(1));
    }

    #[test]
    fn seeded_lambda_is_gaussian_optimum() {
        let mut m = toy();
        m.seed_lambda().unwrap();
        let want = 1.0 / 0.2f64.sqrt();
        assert!(m.state.lambda.iter().all(|&l| (l - want).abs() < 1e-12));
    }

    #[test]
    fn cap_is_enforced() {
        let x = Array2::zeros((FULL_MODEL_CAP + 1, 1));
        let data = Dataset::new(x, Array1::zeros(FULL_MODEL_CAP + 1)).unwrap();
        let specs = vec![ComponentSpec::new(
            Kernel::squared_exp(1.0, &[0.5], vec![0]),
            vec![0],
            Array2::zeros((0, 1)),
        )];
        assert!(matches!(
            FullModel::at_prior(specs, Likelihood::gaussian(1.0), data),
            Err(Error::CapExceeded { .. })
        ));
    }
}
