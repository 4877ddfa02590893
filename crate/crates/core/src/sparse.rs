//! Sparse coupled additive model.
//!
//! Each component `c` has inducing inputs `Z_c` with values `U_c`. The
//! variational posterior over all inducing values is
//!
//! ```text
//! q(U) = N(K_UU α, Σ_UU),   Σ_UU⁻¹ = K_UU⁻¹ + B Bᵀ,
//! ```
//!
//! with `B = [B_1; …; B_C]` of size `MC × R`. Everything is expressed through
//! `A = I_R + Σ_c B_cᵀ K_c B_c`, so `K_UU` is never inverted:
//!
//! ```text
//! KL    = ½ [log|A| + αᵀ K_UU α − Σ_c tr(B_c A⁻¹ B_cᵀ K_c)]
//! μ_sum = Σ_c K_{f_c U_c} α_c
//! v_sum = Σ_c diag K_{f_c f_c} − ‖L_A⁻¹ Σ_c B_cᵀ K_{U_c f_c}‖²_col
//! ```
//!
//! A mean-field posterior is the special case where `B` is block diagonal
//! (`R = MC`, component `c` confined to column block `c`).

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::{evaluate_batch, Likelihood};
use crate::linalg::{
    cholesky, column, column_sq_norms, frobenius_dot, tri_solve, BlockWhitening, Cholesky,
};
use crate::model::{
    add_prior_jitter, validate_model, ComponentMarginals, ComponentSpec, Dataset,
    PredictorMarginals, Structure, VariationalState,
};
use crate::optim::{adam_maximize, maximize, AdamConfig, OptimizerConfig, Status};

/// Floor applied to predictive variances before the likelihood sees them.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Log hyperparameters outside `±LOG_PARAM_BOUND` are rejected.
pub const LOG_PARAM_BOUND: f64 = 20.0;

/// Flattened log hyperparameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub kernels: Vec<Vec<f64>>,
    pub likelihood: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseModel {
    pub specs: Vec<ComponentSpec>,
    pub lik: Likelihood,
    pub state: VariationalState,
    pub data: Dataset,
}

/// Gradient of the ELBO with respect to every parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    pub alpha: Array1<f64>,
    pub b: Array2<f64>,
    pub kernels: Vec<Vec<f64>>,
    pub likelihood: Vec<f64>,
    pub inducing: Vec<Array2<f64>>,
}

/// Which parameter groups the optimizer moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSelection {
    pub variational: bool,
    pub hypers: bool,
    pub inducing: bool,
}

impl ParamSelection {
    pub const VARIATIONAL: ParamSelection = ParamSelection {
        variational: true,
        hypers: false,
        inducing: false,
    };
    pub const ALL: ParamSelection = ParamSelection {
        variational: true,
        hypers: true,
        inducing: true,
    };
}

struct ComponentMatrices {
    kuu: Array2<f64>,
    kuf: Array2<f64>,
    kff: Array1<f64>,
    dkuu: Vec<Array2<f64>>,
    dkuf: Vec<Array2<f64>>,
    dkff: Vec<Array1<f64>>,
}

fn component_matrices(
    spec: &ComponentSpec,
    x: &ArrayView2<f64>,
    grads: bool,
) -> Result<ComponentMatrices> {
    let xc = spec.project(x);
    let z = spec.inducing.view();
    let k = &spec.kernel;
    if grads {
        let (mut kuu, mut dkuu) = k.matrix_with_grads(&z, &z)?;
        add_prior_jitter(k, &mut kuu, &mut dkuu);
        let (kuf, dkuf) = k.matrix_with_grads(&z, &xc.view())?;
        let (kff, dkff) = k.diag_with_grads(&xc.view())?;
        Ok(ComponentMatrices {
            kuu,
            kuf,
            kff,
            dkuu,
            dkuf,
            dkff,
        })
    } else {
        Ok(ComponentMatrices {
            kuu: spec.inducing_prior()?,
            kuf: k.matrix(&z, &xc.view())?,
            kff: k.diag(&xc.view())?,
            dkuu: vec![],
            dkuf: vec![],
            dkff: vec![],
        })
    }
}

fn all_components(
    specs: &[ComponentSpec],
    x: &ArrayView2<f64>,
    grads: bool,
) -> Result<Vec<ComponentMatrices>> {
    specs
        .par_iter()
        .map(|s| component_matrices(s, x, grads))
        .collect()
}

fn check_hypers(specs: &[ComponentSpec], lik: &Likelihood) -> Result<()> {
    let out_of_bounds = specs
        .iter()
        .flat_map(|s| s.kernel.params())
        .chain(lik.params())
        .any(|p| !(p.abs() <= LOG_PARAM_BOUND));
    if out_of_bounds {
        return Err(Error::InvalidParameter(format!(
            "log hyperparameter outside ±{LOG_PARAM_BOUND}"
        )));
    }
    lik.validate()
}

/// `A = I + Σ_c B_cᵀ K_c B_c` and its Cholesky factor.
fn assemble_a(state: &VariationalState, kuu: &[&Array2<f64>]) -> Result<(Array2<f64>, Cholesky)> {
    let r = state.rank();
    let mut a = Array2::<f64>::eye(r);
    for (c, k) in kuu.iter().enumerate() {
        let bc = state.b_block(c);
        let kb = k.dot(&bc);
        a += &bc.t().dot(&kb);
    }
    let a = (&a + &a.t()) * 0.5;
    let l = cholesky(&a, 0.0)?;
    Ok((a, l))
}

/// `KL[q(U) || p(U)]` evaluated term by term. The trace term uses
/// `Σ_c B_cᵀ K_c B_c = A − I`, so `Σ_c tr(B_c A⁻¹ B_cᵀ K_c) = R − tr(A⁻¹)`,
/// adjusted for any jitter the factorization added to `A`.
fn kl_terms(state: &VariationalState, kuu: &[&Array2<f64>], l: &Cholesky) -> f64 {
    let quad: f64 = kuu
        .iter()
        .enumerate()
        .map(|(c, k)| {
            let ac = state.alpha_block(c);
            ac.dot(&k.dot(&ac))
        })
        .sum();
    let trace = state.rank() as f64 - (1.0 + l.jitter()) * l.inverse_trace();
    0.5 * (l.logdet() + quad - trace)
}

struct Evaluation {
    elbo: f64,
    kl: f64,
    clamped: usize,
    grad: Option<SparseGradient>,
}

fn evaluate(
    specs: &[ComponentSpec],
    lik: &Likelihood,
    state: &VariationalState,
    x: &ArrayView2<f64>,
    y: &Array1<f64>,
    scale: f64,
    sel: Option<ParamSelection>,
) -> Result<Evaluation> {
    check_hypers(specs, lik)?;
    let want = sel.is_some();
    let want_hyper = sel.map(|s| s.hypers).unwrap_or(false);
    let want_z = sel.map(|s| s.inducing).unwrap_or(false);
    let comps = all_components(specs, x, want_hyper)?;
    let kuu: Vec<&Array2<f64>> = comps.iter().map(|c| &c.kuu).collect();
    let (_, l) = assemble_a(state, &kuu)?;
    let n = x.nrows();
    let r = state.rank();

    let mut p = Array2::<f64>::zeros((r, n));
    let mut mu = Array1::<f64>::zeros(n);
    let mut kff = Array1::<f64>::zeros(n);
    for (c, cm) in comps.iter().enumerate() {
        p += &state.b_block(c).t().dot(&cm.kuf);
        mu += &cm.kuf.t().dot(&state.alpha_block(c));
        kff += &cm.kff;
    }
    let w = tri_solve(&l, &p, false)?;
    let var = &kff - &column_sq_norms(&w);
    let terms = evaluate_batch(lik, y, &mu, &var, VARIANCE_FLOOR)?;
    let kl = kl_terms(state, &kuu, &l);
    let elbo = scale * terms.value - kl;
    if !want {
        return Ok(Evaluation {
            elbo,
            kl,
            clamped: terms.clamped,
            grad: None,
        });
    }

    let g = &terms.d_mu * scale;
    let h = &terms.d_var * scale;
    let ainv = l.inverse();
    let q = tri_solve(&l, &w, true)?; // A⁻¹ P
    let qh = &q * &h.view().insert_axis(Axis(0));
    let g_a = qh.dot(&q.t()) - (&ainv - &ainv.dot(&ainv)) * 0.5;
    let g_p = &qh * -2.0;

    let m = state.num_inducing();
    let mc = state.alpha.len();
    let mut d_alpha = Array1::zeros(mc);
    let mut d_b = Array2::zeros((mc, r));
    let mut d_kern = Vec::with_capacity(specs.len());
    let mut d_z = Vec::with_capacity(specs.len());
    for (c, cm) in comps.iter().enumerate() {
        let ac = state.alpha_block(c);
        let bc = state.b_block(c);
        let da = cm.kuf.dot(&g) - cm.kuu.dot(&ac);
        d_alpha.slice_mut(s![c * m..(c + 1) * m]).assign(&da);
        let db = cm.kuu.dot(&bc).dot(&g_a) * 2.0 + cm.kuf.dot(&g_p.t());
        d_b.slice_mut(s![c * m..(c + 1) * m, ..]).assign(&db);

        if want_hyper || want_z {
            let ac2 = ac.view().insert_axis(Axis(1));
            let g_kuu = bc.dot(&g_a).dot(&bc.t()) - ac2.dot(&ac2.t()) * 0.5;
            let g_kuf = ac2.dot(&g.view().insert_axis(Axis(0))) + bc.dot(&g_p);
            if want_hyper {
                let dk: Vec<f64> = (0..cm.dkuu.len())
                    .map(|i| {
                        frobenius_dot(&g_kuu.view(), &cm.dkuu[i].view())
                            + frobenius_dot(&g_kuf.view(), &cm.dkuf[i].view())
                            + h.dot(&cm.dkff[i])
                    })
                    .collect();
                d_kern.push(dk);
            }
            if want_z {
                d_z.push(inducing_gradient(&specs[c], x, &g_kuu, &g_kuf)?);
            }
        }
    }
    // Structural zeros of a mean-field factor never move.
    if state.structure == Structure::MeanField {
        for ((i, j), v) in d_b.indexed_iter_mut() {
            if !state.is_free(i, j) {
                *v = 0.0;
            }
        }
    }
    let d_lik = terms.d_params.iter().map(|v| v * scale).collect();
    Ok(Evaluation {
        elbo,
        kl,
        clamped: terms.clamped,
        grad: Some(SparseGradient {
            alpha: d_alpha,
            b: d_b,
            kernels: if want_hyper {
                d_kern
            } else {
                specs
                    .iter()
                    .map(|s| vec![0.0; s.kernel.n_params()])
                    .collect()
            },
            likelihood: if want_hyper {
                d_lik
            } else {
                vec![0.0; lik.n_params()]
            },
            inducing: if want_z {
                d_z
            } else {
                specs
                    .iter()
                    .map(|s| Array2::zeros(s.inducing.dim()))
                    .collect()
            },
        }),
    })
}

fn inducing_gradient(
    spec: &ComponentSpec,
    x: &ArrayView2<f64>,
    g_kuu: &Array2<f64>,
    g_kuf: &Array2<f64>,
) -> Result<Array2<f64>> {
    let z = spec.inducing.view();
    let xc = spec.project(x);
    let duf = spec.kernel.input_grads(&z, &xc.view())?;
    let duu = spec.kernel.input_grads(&z, &z)?;
    let gsym = g_kuu + &g_kuu.t();
    let mut out = Array2::zeros(spec.inducing.dim());
    for d in 0..spec.inducing.ncols() {
        let a = (&duf[d] * g_kuf).sum_axis(Axis(1));
        let b = (&duu[d] * &gsym).sum_axis(Axis(1));
        out.column_mut(d).assign(&(a + b));
    }
    Ok(out)
}

/// Outcome of [`train_sparse`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub elbo: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
    /// Variances raised to the floor at the final iterate.
    pub clamped: usize,
}

impl TrainReport {
    pub fn max_iter_reached(&self) -> bool {
        self.status == Status::MaxIterReached
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Run a joint phase over hyperparameters after the variational phase.
    pub optimize_hypers: bool,
    /// Also move inducing inputs during the joint phase.
    pub optimize_inducing: bool,
    /// Additional random restarts of the coupling factor.
    pub restarts: usize,
    pub seed: u64,
    /// Minibatch size for the expected log-likelihood; `None` for full batch.
    pub batch_size: Option<usize>,
    pub adam: AdamConfig,
    /// Hold constant-kernel variances (the ANOVA intercept `σ₀`) fixed.
    pub fix_constant: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            optimize_hypers: true,
            optimize_inducing: false,
            restarts: 0,
            seed: 0,
            batch_size: None,
            adam: AdamConfig::default(),
            fix_constant: false,
        }
    }
}

/// Scale of the deterministic coupling seed used when `B` starts at zero.
pub const COUPLING_SEED_SCALE: f64 = 0.1;

impl SparseModel {
    pub fn new(
        specs: Vec<ComponentSpec>,
        lik: Likelihood,
        state: VariationalState,
        data: Dataset,
    ) -> Result<Self> {
        validate_model(&specs, &data).into_result()?;
        lik.validate()?;
        if state.num_components() != specs.len() || state.num_inducing() != specs[0].num_inducing()
        {
            return Err(Error::DimensionMismatch(format!(
                "state is for C={} M={}, specs have C={} M={}",
                state.num_components(),
                state.num_inducing(),
                specs.len(),
                specs[0].num_inducing()
            )));
        }
        Ok(SparseModel {
            specs,
            lik,
            state,
            data,
        })
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

    pub fn set_hyperparameters(&mut self, h: &Hyperparameters) -> Result<()> {
        if h.kernels.len() != self.specs.len() {
            return Err(Error::DimensionMismatch(
                "one parameter list per component".into(),
            ));
        }
        for (s, p) in self.specs.iter_mut().zip(&h.kernels) {
            s.kernel.set_params(p)?;
        }
        self.lik.set_params(&h.likelihood)
    }

    fn kuu_all(&self) -> Result<Vec<Array2<f64>>> {
        self.specs.iter().map(|s| s.inducing_prior()).collect()
    }

    /// `A = I + Σ_c B_cᵀ K_{U_c U_c} B_c` (size `R × R`) and its factor.
    pub fn assemble_a_sparse(&self) -> Result<(Array2<f64>, Cholesky)> {
        let kuu = self.kuu_all()?;
        let refs: Vec<&Array2<f64>> = kuu.iter().collect();
        assemble_a(&self.state, &refs)
    }

    pub fn kl_sparse(&self) -> Result<f64> {
        let kuu = self.kuu_all()?;
        let refs: Vec<&Array2<f64>> = kuu.iter().collect();
        let (_, l) = assemble_a(&self.state, &refs)?;
        Ok(kl_terms(&self.state, &refs, &l))
    }

    /// Marginals of the summed predictor (and optionally of each component)
    /// at query inputs in the original input space.
    pub fn marginals_sparse(
        &self,
        xq: &ArrayView2<f64>,
        include_components: bool,
    ) -> Result<PredictorMarginals> {
        marginals_from_parts(&self.specs, &self.state, xq, include_components)
    }

    pub fn elbo_sparse(&self) -> Result<f64> {
        Ok(evaluate(
            &self.specs,
            &self.lik,
            &self.state,
            &self.data.x.view(),
            &self.data.y,
            1.0,
            None,
        )?
        .elbo)
    }

    /// ELBO with its gradient for the selected parameter groups (unselected
    /// groups are reported as zeros).
    pub fn elbo_and_gradient(&self, sel: ParamSelection) -> Result<(f64, SparseGradient)> {
        let e = evaluate(
            &self.specs,
            &self.lik,
            &self.state,
            &self.data.x.view(),
            &self.data.y,
            1.0,
            Some(sel),
        )?;
        Ok((e.elbo, e.grad.expect("gradient requested")))
    }

    /// Unbiased minibatch estimate of the ELBO and its gradient.
    pub fn elbo_minibatch(
        &self,
        idx: &[usize],
        sel: ParamSelection,
    ) -> Result<(f64, SparseGradient)> {
        if idx.is_empty() {
            return Err(Error::InvalidParameter("empty minibatch".into()));
        }
        let batch = self.data.subset(idx);
        let scale = self.data.len() as f64 / idx.len() as f64;
        let e = evaluate(
            &self.specs,
            &self.lik,
            &self.state,
            &batch.x.view(),
            &batch.y,
            scale,
            Some(sel),
        )?;
        Ok((e.elbo, e.grad.expect("gradient requested")))
    }

    /// Number of predictive variances that hit the floor at the current state.
    pub fn clamp_count(&self) -> Result<usize> {
        Ok(evaluate(
            &self.specs,
            &self.lik,
            &self.state,
            &self.data.x.view(),
            &self.data.y,
            1.0,
            None,
        )?
        .clamped)
    }

    pub fn kl_and_elbo(&self) -> Result<(f64, f64)> {
        let e = evaluate(
            &self.specs,
            &self.lik,
            &self.state,
            &self.data.x.view(),
            &self.data.y,
            1.0,
            None,
        )?;
        Ok((e.kl, e.elbo))
    }

    /// Flatten the selected parameters.
    pub fn pack(&self, sel: ParamSelection) -> Vec<f64> {
        let mut out = Vec::new();
        if sel.variational {
            out.extend(self.state.alpha.iter());
            for ((i, j), &v) in self.state.b.indexed_iter() {
                if self.state.is_free(i, j) {
                    out.push(v);
                }
            }
        }
        if sel.hypers {
            for s in &self.specs {
                out.extend(s.kernel.params());
            }
            out.extend(self.lik.params());
        }
        if sel.inducing {
            for s in &self.specs {
                out.extend(s.inducing.iter());
            }
        }
        out
    }

    pub fn unpack(&mut self, sel: ParamSelection, v: &[f64]) -> Result<()> {
        let mut it = v.iter().copied();
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::DimensionMismatch("parameter vector too short".into()))
        };
        if sel.variational {
            for a in self.state.alpha.iter_mut() {
                *a = next()?;
            }
            let (rows, cols) = self.state.b.dim();
            for i in 0..rows {
                for j in 0..cols {
                    if self.state.is_free(i, j) {
                        self.state.b[[i, j]] = next()?;
                    }
                }
            }
        }
        if sel.hypers {
            for s in self.specs.iter_mut() {
                let p: Vec<f64> = (0..s.kernel.n_params())
                    .map(|_| next())
                    .collect::<Result<_>>()?;
                s.kernel.set_params(&p)?;
            }
            let p: Vec<f64> = (0..self.lik.n_params())
                .map(|_| next())
                .collect::<Result<_>>()?;
            self.lik.set_params(&p)?;
        }
        if sel.inducing {
            for s in self.specs.iter_mut() {
                for z in s.inducing.iter_mut() {
                    *z = next()?;
                }
            }
        }
        if it.next().is_some() {
            return Err(Error::DimensionMismatch("parameter vector too long".into()));
        }
        Ok(())
    }

    /// Flatten a gradient in the same layout as [`SparseModel::pack`].
    pub fn pack_gradient(&self, sel: ParamSelection, g: &SparseGradient) -> Vec<f64> {
        let mut out = Vec::new();
        if sel.variational {
            out.extend(g.alpha.iter());
            for ((i, j), &v) in g.b.indexed_iter() {
                if self.state.is_free(i, j) {
                    out.push(v);
                }
            }
        }
        if sel.hypers {
            for k in &g.kernels {
                out.extend(k);
            }
            out.extend(&g.likelihood);
        }
        if sel.inducing {
            for z in &g.inducing {
                out.extend(z.iter());
            }
        }
        out
    }

    /// Move a zero coupling factor off the `B = 0` stationary point. Row
    /// `i` of component `c` gets `scale` in column `(c·M + i) mod R`, so
    /// every column is used and for `R = M·C` the seed is the same
    /// diagonal matrix under both structures. Zero columns of `B` are
    /// themselves stationary, so leaving any unused would cap the rank.
    pub fn seed_coupling(&mut self, scale: f64) {
        let m = self.state.num_inducing();
        let r = self.state.rank();
        for row in 0..m * self.num_components() {
            self.state.b[[row, row % r]] = scale;
        }
    }

    fn randomize_coupling(&mut self, rng: &mut ChaCha20Rng) {
        let mc = self.state.alpha.len();
        let normal = Normal::new(0.0, (1.0 / mc as f64).sqrt()).expect("valid sd");
        let (rows, cols) = self.state.b.dim();
        for i in 0..rows {
            for j in 0..cols {
                self.state.b[[i, j]] = if self.state.is_free(i, j) {
                    normal.sample(rng)
                } else {
                    0.0
                };
            }
        }
    }
}

/// Marginals of the summed predictor (and optionally of each component)
/// at query inputs, from model parts alone.
pub fn marginals_from_parts(
    specs: &[ComponentSpec],
    state: &VariationalState,
    xq: &ArrayView2<f64>,
    include_components: bool,
) -> Result<PredictorMarginals> {
    let comps = all_components(specs, xq, false)?;
    let kuu: Vec<&Array2<f64>> = comps.iter().map(|c| &c.kuu).collect();
    let (_, l) = assemble_a(state, &kuu)?;
    let n = xq.nrows();
    let mut p = Array2::<f64>::zeros((state.rank(), n));
    let mut mu = Array1::zeros(n);
    let mut kff = Array1::zeros(n);
    let mut per = Vec::new();
    for (c, cm) in comps.iter().enumerate() {
        let pc = state.b_block(c).t().dot(&cm.kuf);
        let mc = cm.kuf.t().dot(&state.alpha_block(c));
        if include_components {
            let wc = tri_solve(&l, &pc, false)?;
            per.push(ComponentMarginals {
                mean: mc.clone(),
                variance: &cm.kff - &column_sq_norms(&wc),
            });
        }
        p += &pc;
        mu += &mc;
        kff += &cm.kff;
    }
    let w = tri_solve(&l, &p, false)?;
    Ok(PredictorMarginals {
        mu_sum: mu,
        var_sum: kff - column_sq_norms(&w),
        per_component: include_components.then_some(per),
    })
}

/// Positions of constant-kernel variances in a packed vector whose
/// hyperparameter block starts at `offset`.
pub(crate) fn constant_positions(specs: &[ComponentSpec], offset: usize) -> Vec<usize> {
    specs
        .iter()
        .flat_map(|s| s.kernel.constant_param_mask())
        .enumerate()
        .filter(|(_, c)| *c)
        .map(|(i, _)| offset + i)
        .collect()
}

impl SparseModel {
    /// Packed positions held fixed under `sel`.
    fn frozen_positions(&self, sel: ParamSelection, fix_constant: bool) -> Vec<usize> {
        if !(fix_constant && sel.hypers) {
            return Vec::new();
        }
        let offset = if sel.variational {
            self.pack(ParamSelection::VARIATIONAL).len()
        } else {
            0
        };
        constant_positions(&self.specs, offset)
    }
}

fn unwhitened(w: &BlockWhitening, st: &VariationalState) -> Result<VariationalState> {
    let mut out = st.clone();
    out.alpha = w.unwhiten(&column(&st.alpha))?.column(0).to_owned();
    out.b = w.unwhiten(&st.b)?;
    Ok(out)
}

/// One L-BFGS run over `sel`. The variational parameters are optimized in
/// whitened coordinates `α_c = L_c⁻ᵀ α̃_c`, `B_c = L_c⁻ᵀ B̃_c` (with `L_c`
/// the factor of `K_{U_c U_c}` at the start of the run); the model keeps
/// the plain parameterization.
fn optimize_phase(
    model: &mut SparseModel,
    sel: ParamSelection,
    cfg: &OptimizerConfig,
    fix_constant: bool,
) -> Result<crate::optim::OptimResult> {
    let w = BlockWhitening::new(&model.kuu_all()?)?;
    let frozen = model.frozen_positions(sel, fix_constant);
    let mut internal = model.clone();
    if sel.variational {
        internal.state.alpha = w.whiten(&column(&model.state.alpha))?.column(0).to_owned();
        internal.state.b = w.whiten(&model.state.b)?;
    }
    let mut work = internal.clone();
    let result = maximize(
        |v| {
            work.unpack(sel, v)?;
            let state = if sel.variational {
                unwhitened(&w, &work.state)?
            } else {
                work.state.clone()
            };
            let e = evaluate(
                &work.specs,
                &work.lik,
                &state,
                &work.data.x.view(),
                &work.data.y,
                1.0,
                Some(sel),
            )?;
            let mut g = e.grad.expect("gradient requested");
            if sel.variational {
                g.alpha = w.pull_back(&column(&g.alpha))?.column(0).to_owned();
                g.b = w.pull_back(&g.b)?;
            }
            let mut packed = work.pack_gradient(sel, &g);
            for &i in &frozen {
                packed[i] = 0.0;
            }
            Ok((e.elbo, packed))
        },
        internal.pack(sel),
        cfg,
    )?;
    internal.unpack(sel, &result.x)?;
    if sel.variational {
        internal.state = unwhitened(&w, &internal.state)?;
    }
    *model = internal;
    Ok(result)
}

fn train_once(model: &mut SparseModel, cfg: &TrainConfig) -> Result<TrainReport> {
    if let Some(bs) = cfg.batch_size {
        return train_minibatch(model, cfg, bs);
    }
    let r1 = optimize_phase(model, ParamSelection::VARIATIONAL, &cfg.optimizer, false)?;
    let mut trace = r1.trace.clone();
    let mut iterations = r1.iterations;
    let mut evaluations = r1.evaluations;
    let mut status = r1.status;
    if cfg.optimize_hypers || cfg.optimize_inducing {
        let sel = ParamSelection {
            variational: true,
            hypers: cfg.optimize_hypers,
            inducing: cfg.optimize_inducing,
        };
        let r2 = optimize_phase(model, sel, &cfg.optimizer, cfg.fix_constant)?;
        trace.extend_from_slice(&r2.trace[1..]);
        iterations += r2.iterations;
        evaluations += r2.evaluations;
        status = r2.status;
        // Re-converge the variational parameters at the final hyperparameters.
        let r3 = optimize_phase(model, ParamSelection::VARIATIONAL, &cfg.optimizer, false)?;
        trace.extend_from_slice(&r3.trace[1..]);
        iterations += r3.iterations;
        evaluations += r3.evaluations;
        if status == Status::Converged {
            status = r3.status;
        }
    }
    let (_, elbo) = model.kl_and_elbo()?;
    Ok(TrainReport {
        elbo,
        trace,
        iterations,
        evaluations,
        status,
        clamped: model.clamp_count()?,
    })
}

fn train_minibatch(
    model: &mut SparseModel,
    cfg: &TrainConfig,
    batch: usize,
) -> Result<TrainReport> {
    use rand::seq::index::sample;
    let n = model.data.len();
    let batch = batch.min(n).max(1);
    let sel = ParamSelection {
        variational: true,
        hypers: cfg.optimize_hypers,
        inducing: cfg.optimize_inducing,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let frozen = model.frozen_positions(sel, cfg.fix_constant);
    let mut work = model.clone();
    let (x, _) = adam_maximize(
        |_, v| {
            work.unpack(sel, v)?;
            let idx = sample(&mut rng, n, batch).into_vec();
            let (val, g) = work.elbo_minibatch(&idx, sel)?;
            let mut packed = work.pack_gradient(sel, &g);
            for &i in &frozen {
                packed[i] = 0.0;
            }
            Ok((val, packed))
        },
        model.pack(sel),
        &cfg.adam,
    )?;
    model.unpack(sel, &x)?;
    let (_, elbo) = model.kl_and_elbo()?;
    Ok(TrainReport {
        elbo,
        trace: vec![elbo],
        iterations: cfg.adam.iterations,
        evaluations: cfg.adam.iterations,
        status: Status::MaxIterReached,
        clamped: model.clamp_count()?,
    })
}

/// Maximize the ELBO over `(α, B)`, then jointly with the log
/// hyperparameters (and inducing inputs when enabled).
///
/// A coupling factor that is exactly zero is a stationary point of the
/// objective in `B`, so it is first moved to [`SparseModel::seed_coupling`].
/// With `restarts > 0` further runs start from random `B` and the best
/// final ELBO wins.
pub fn train_sparse(model: &mut SparseModel, cfg: &TrainConfig) -> Result<TrainReport> {
    if model.state.b.iter().all(|&v| v == 0.0) {
        model.seed_coupling(COUPLING_SEED_SCALE);
    }
    let start = model.clone();
    let mut best_model = model.clone();
    let mut best = train_once(&mut best_model, cfg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.restarts {
        let mut candidate = start.clone();
        candidate.randomize_coupling(&mut rng);
        if let Ok(rep) = train_once(&mut candidate, cfg) {
            if rep.elbo > best.elbo {
                best = rep;
                best_model = candidate;
            }
        }
    }
    *model = best_model;
    Ok(best)
}

/// Posterior summary of one component on a grid over its active inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectTable {
    pub component: usize,
    pub active_dims: Vec<usize>,
    /// Grid points in the component's (projected) input space.
    pub grid: Array2<f64>,
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
    /// Contribution of constant kernel summands (intercept) to `mean`.
    pub offset: f64,
}

/// Per-component posterior means `K_{f_c U_c} α_c` and variances
/// `diag K_{f_c f_c} − diag(K_{f_c U_c} B_c A⁻¹ B_cᵀ K_{U_c f_c})` on
/// user-supplied grids (one per component, in projected coordinates).
pub fn decompose(model: &SparseModel, grids: &[Array2<f64>]) -> Result<Vec<EffectTable>> {
    if grids.len() != model.num_components() {
        return Err(Error::DimensionMismatch(format!(
            "{} grids for {} components",
            grids.len(),
            model.num_components()
        )));
    }
    let (_, l) = model.assemble_a_sparse()?;
    let mut out = Vec::with_capacity(grids.len());
    for (c, (spec, grid)) in model.specs.iter().zip(grids).enumerate() {
        if grid.ncols() != spec.active_dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "grid for component {c} has {} columns, expected {}",
                grid.ncols(),
                spec.active_dims.len()
            )));
        }
        let z = spec.inducing.view();
        let kuf = spec.kernel.matrix(&z, &grid.view())?;
        let kff = spec.kernel.diag(&grid.view())?;
        let ac = model.state.alpha_block(c);
        let mean = kuf.t().dot(&ac);
        let w = tri_solve(&l, &model.state.b_block(c).t().dot(&kuf), false)?;
        let variance = kff - column_sq_norms(&w);
        let offset = spec.kernel.constant_part() * ac.sum();
        out.push(EffectTable {
            component: c,
            active_dims: spec.active_dims.clone(),
            grid: grid.clone(),
            mean,
            variance,
            offset,
        });
    }
    Ok(out)
}
