//! Expected log-likelihood `E_{ρ~N(μ, v)}[log p(y | ρ)]` and its derivatives.
//!
//! The Gaussian likelihood uses the closed form; Poisson (log link) goes
//! through Gauss–Hermite quadrature. Derivatives with respect to `v` use the
//! derivative of the quadrature sum itself so the optimizer sees a
//! consistent objective.

use std::f64::consts::PI;
use std::sync::OnceLock;

use libm::lgamma;
use ndarray::Array1;

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::model::PredictorMarginals;

pub const DEFAULT_QUADRATURE_POINTS: usize = 20;

/// Gauss–Hermite rule for the weight `exp(-t²)` (weights sum to `√π`).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Nodes by Newton iteration on the normalized Hermite recurrence.
    pub fn gauss_hermite(q: usize) -> Self {
        assert!(q >= 1, "need at least one quadrature node");
        const PIM4: f64 = 0.751_125_544_464_942_5; // π^(-1/4)
        let n = q;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let half = n.div_ceil(2);
        let mut z = 0.0f64;
        for i in 0..half {
            z = match i {
                0 => {
                    (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-0.16667)
                }
                1 => z - 1.14 * (n as f64).powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * n as f64).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        QuadratureRule {
            nodes: x,
            weights: w,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn default_rule() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| QuadratureRule::gauss_hermite(DEFAULT_QUADRATURE_POINTS))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    Gaussian {
        log_noise_variance: f64,
    },
    /// Poisson counts with rate `exp(ρ)`.
    Poisson,
}

/// Value and derivatives of one expected log-likelihood term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointTerm {
    pub value: f64,
    pub d_mu: f64,
    pub d_var: f64,
    /// Derivative with respect to the log noise variance (zero for Poisson).
    pub d_param: f64,
}

impl Likelihood {
    pub fn gaussian(noise_variance: f64) -> Self {
        Likelihood::Gaussian {
            log_noise_variance: noise_variance.ln(),
        }
    }

    pub fn noise_variance(&self) -> Option<f64> {
        match self {
            Likelihood::Gaussian { log_noise_variance } => Some(log_noise_variance.exp()),
            Likelihood::Poisson => None,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Likelihood::Gaussian { .. } => 1,
            Likelihood::Poisson => 0,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Likelihood::Gaussian { log_noise_variance } => vec![*log_noise_variance],
            Likelihood::Poisson => vec![],
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "likelihood has {} parameters, got {}",
                self.n_params(),
                p.len()
            )));
        }
        if let Likelihood::Gaussian { log_noise_variance } = self {
            *log_noise_variance = p[0];
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let Likelihood::Gaussian { log_noise_variance } = self {
            let s2 = log_noise_variance.exp();
            if !(s2.is_finite() && s2 > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "noise variance {s2} must be finite and positive"
                )));
            }
        }
        Ok(())
    }

    // log p(y|ρ) and its first two ρ-derivatives.
    fn log_density(&self, y: f64, rho: f64) -> (f64, f64, f64) {
        match self {
            Likelihood::Gaussian { log_noise_variance } => {
                let s2 = log_noise_variance.exp();
                let r = y - rho;
                (
                    -0.5 * (2.0 * PI * s2).ln() - r * r / (2.0 * s2),
                    r / s2,
                    -1.0 / s2,
                )
            }
            Likelihood::Poisson => {
                let rate = rho.exp();
                (y * rho - rate - lgamma(y + 1.0), y - rate, -rate)
            }
        }
    }

    /// `E[log p(y|ρ)]` under `ρ ~ N(mu, var)`.
    pub fn expected_loglik(&self, y: f64, mu: f64, var: f64) -> f64 {
        self.point_term(y, mu, var).value
    }

    /// `(∂/∂mu, ∂/∂var)` of [`Likelihood::expected_loglik`].
    pub fn expected_loglik_grads(&self, y: f64, mu: f64, var: f64) -> (f64, f64) {
        let t = self.point_term(y, mu, var);
        (t.d_mu, t.d_var)
    }

    pub fn point_term(&self, y: f64, mu: f64, var: f64) -> PointTerm {
        match self {
            Likelihood::Gaussian { log_noise_variance } => {
                let s2 = log_noise_variance.exp();
                let r = y - mu;
                let q = r * r + var;
                PointTerm {
                    value: -0.5 * (2.0 * PI * s2).ln() - q / (2.0 * s2),
                    d_mu: r / s2,
                    d_var: -0.5 / s2,
                    d_param: -0.5 + q / (2.0 * s2),
                }
            }
            Likelihood::Poisson => self.point_term_quadrature(default_rule(), y, mu, var),
        }
    }

    /// The same term computed by Gauss–Hermite quadrature regardless of kind.
    pub fn point_term_quadrature(
        &self,
        rule: &QuadratureRule,
        y: f64,
        mu: f64,
        var: f64,
    ) -> PointTerm {
        let var = var.max(0.0);
        let sd = (2.0 * var).sqrt();
        let norm = PI.sqrt();
        let (mut value, mut d_mu, mut d_var, mut d_param) = (0.0, 0.0, 0.0, 0.0);
        let tiny = var < 1e-20;
        for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
            let rho = mu + sd * t;
            let (f, f1, f2) = self.log_density(y, rho);
            value += w * f;
            d_mu += w * f1;
            d_var += if tiny { 0.5 * w * f2 } else { w * f1 * t / sd };
            if let Likelihood::Gaussian { log_noise_variance } = self {
                let s2 = log_noise_variance.exp();
                let r = y - rho;
                d_param += w * (-0.5 + r * r / (2.0 * s2));
            }
        }
        PointTerm {
            value: value / norm,
            d_mu: d_mu / norm,
            d_var: d_var / norm,
            d_param: d_param / norm,
        }
    }
}

/// Per-point terms evaluated over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTerms {
    pub value: f64,
    pub d_mu: Array1<f64>,
    pub d_var: Array1<f64>,
    pub d_params: Vec<f64>,
    /// Number of variances raised to the floor before evaluation.
    pub clamped: usize,
}

/// Evaluate every point; variances below `floor` are raised to it and their
/// variance derivative is zeroed (the clamp is flat there).
pub fn evaluate_batch(
    lik: &Likelihood,
    y: &Array1<f64>,
    mu: &Array1<f64>,
    var: &Array1<f64>,
    floor: f64,
) -> Result<BatchTerms> {
    let n = y.len();
    if mu.len() != n || var.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} targets, {} means, {} variances",
            n,
            mu.len(),
            var.len()
        )));
    }
    let mut values = Vec::with_capacity(n);
    let mut d_mu = Array1::zeros(n);
    let mut d_var = Array1::zeros(n);
    let mut dp = Vec::with_capacity(n);
    let mut clamped = 0;
    for i in 0..n {
        let (v, was_clamped) = if var[i] < floor {
            (floor, true)
        } else {
            (var[i], false)
        };
        clamped += was_clamped as usize;
        let t = lik.point_term(y[i], mu[i], v);
        values.push(t.value);
        d_mu[i] = t.d_mu;
        d_var[i] = if was_clamped { 0.0 } else { t.d_var };
        dp.push(t.d_param);
    }
    let d_params = if lik.n_params() == 1 {
        vec![pairwise_sum(&dp)]
    } else {
        vec![]
    };
    Ok(BatchTerms {
        value: pairwise_sum(&values),
        d_mu,
        d_var,
        d_params,
        clamped,
    })
}

/// `Σ_n E_{q(ρ_n)}[log p(y_n | ρ_n)]`.
pub fn expected_loglik_sum(
    lik: &Likelihood,
    y: &Array1<f64>,
    marginals: &PredictorMarginals,
) -> Result<f64> {
    if y.len() != marginals.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {} marginals",
            y.len(),
            marginals.len()
        )));
    }
    let terms: Vec<f64> = y
        .iter()
        .zip(marginals.mu_sum.iter().zip(&marginals.var_sum))
        .map(|(&yy, (&m, &v))| lik.expected_loglik(yy, m, v))
        .collect();
    Ok(pairwise_sum(&terms))
}
