//! Gradient-based maximizers: L-BFGS with backtracking (Armijo) line search
//! for deterministic objectives, and Adam for minibatch estimates.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    /// Number of correction pairs kept by L-BFGS.
    pub memory: usize,
    /// Relative objective change regarded as stalled.
    pub rel_tol: f64,
    /// Consecutive stalled iterations before declaring convergence.
    pub patience: usize,
    /// Infinity-norm gradient threshold for convergence.
    pub grad_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iter: 2000,
            memory: 20,
            rel_tol: 1e-9,
            patience: 5,
            grad_tol: 1e-8,
            armijo: 1e-4,
            max_backtracks: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterReached,
    /// No ascent step could be found; the last accepted iterate is returned.
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Maximize `f`, which returns the objective and its gradient.
///
/// Evaluation errors and non-finite values at trial points are treated as
/// rejected steps. An error at `x0` is returned as is.
pub fn maximize<F>(mut f: F, x0: Vec<f64>, cfg: &OptimizerConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (v0, g0) = f(&x0)?;
    if !v0.is_finite() || g0.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("objective at the starting point".into()));
    }
    let mut evaluations = 1;
    let mut x = x0;
    let mut value = v0;
    let mut grad = g0;
    let mut trace = vec![value];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut stalled = 0;
    let mut status = Status::MaxIterReached;
    let mut iterations = 0;

    if n == 0 || inf_norm(&grad) < cfg.grad_tol {
        return Ok(OptimResult {
            x,
            value,
            gradient: grad,
            trace,
            iterations: 0,
            evaluations,
            status: Status::Converged,
        });
    }

    while iterations < cfg.max_iter {
        iterations += 1;
        // Two-loop recursion on the ascent gradient.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                q[i] += s[i] * (a - b);
            }
        }
        let mut dir = q;
        let mut slope = dot(&grad, &dir);
        if !(slope > 0.0) {
            pairs.clear();
            dir = grad.clone();
            slope = dot(&grad, &dir);
        }
        let mut step = if pairs.is_empty() {
            (1.0 / inf_norm(&dir)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            evaluations += 1;
            if let Ok((tv, tg)) = f(&trial) {
                if tv.is_finite()
                    && tg.iter().all(|g| g.is_finite())
                    && tv >= value + cfg.armijo * step * slope
                {
                    accepted = Some((trial, tv, tg));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((nx, nv, ng)) = accepted else {
            if pairs.is_empty() {
                status = Status::LineSearchFailed;
                break;
            }
            pairs.clear();
            continue;
        };

        // Curvature pair for the minimization of -f.
        let s: Vec<f64> = nx.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad.iter().zip(&ng).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }

        let rel = (nv - value).abs() / nv.abs().max(1.0);
        x = nx;
        value = nv;
        grad = ng;
        trace.push(value);

        if inf_norm(&grad) < cfg.grad_tol {
            status = Status::Converged;
            break;
        }
        if rel < cfg.rel_tol {
            stalled += 1;
            if stalled >= cfg.patience {
                status = Status::Converged;
                break;
            }
        } else {
            stalled = 0;
        }
    }

    Ok(OptimResult {
        x,
        value,
        gradient: grad,
        trace,
        iterations,
        evaluations,
        status,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 2000,
        }
    }
}

/// Stochastic ascent with Adam. `f` receives the step index so it can pick
/// a minibatch. Returns the final iterate and the per-step estimates.
pub fn adam_maximize<F>(mut f: F, x0: Vec<f64>, cfg: &AdamConfig) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0;
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let (val, g) = f(t, &x)?;
        trace.push(val);
        let b1 = 1.0 - cfg.beta1.powi(t as i32 + 1);
        let b2 = 1.0 - cfg.beta2.powi(t as i32 + 1);
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            x[i] += cfg.learning_rate * (m[i] / b1) / ((v[i] / b2).sqrt() + cfg.epsilon);
        }
    }
    Ok((x, trace))
}
