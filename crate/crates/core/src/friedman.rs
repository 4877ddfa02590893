//! Friedman test function on `[0, 1]⁶` and its analytic ANOVA main effects.
//!
//! `f(x) = 10 sin(π x₁ x₂) + 20 (x₃ − ½)² + 10 x₄ + 5 x₅`; `x₆` is inert.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardUniform};

pub const FRIEDMAN_DIM: usize = 6;

pub fn friedman(x: ArrayView1<f64>) -> f64 {
    10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

pub fn friedman_rows(x: &ArrayView2<f64>) -> Array1<f64> {
    x.rows().into_iter().map(friedman).collect()
}

/// `Cin(x) = ∫₀ˣ (1 − cos t)/t dt`, by its alternating power series.
fn cin(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    let x2 = x * x;
    for k in 1..60 {
        let k2 = 2.0 * k as f64;
        term *= x2 / ((k2 - 1.0) * k2);
        let add = if k % 2 == 1 { term / k2 } else { -term / k2 };
        sum += add;
        if term / k2 < 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

/// Mean of `f` over the unit cube.
pub fn friedman_mean() -> f64 {
    10.0 / PI * cin(PI) + 20.0 / 12.0 + 5.0 + 2.5
}

/// Zero-mean main effect of input `dim` (0-based) at `t`:
/// `E[f | x_dim = t] − E[f]`.
pub fn main_effect(dim: usize, t: f64) -> f64 {
    let e0 = 10.0 / PI * cin(PI);
    match dim {
        0 | 1 => {
            let s = if t.abs() < 1e-8 {
                // (1 − cos πt)/(πt) → πt/2
                PI * t / 2.0
            } else {
                (1.0 - (PI * t).cos()) / (PI * t)
            };
            10.0 * s - e0
        }
        2 => 20.0 * (t - 0.5).powi(2) - 5.0 / 3.0,
        3 => 10.0 * t - 5.0,
        4 => 5.0 * t - 2.5,
        _ => 0.0,
    }
}

/// `n` points uniform on `[0,1]⁶` with `y = f(x) + N(0, noise_sd²)`.
pub fn sample<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    noise_sd: f64,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let x = Array2::from_shape_simple_fn((n, FRIEDMAN_DIM), || StandardUniform.sample(rng));
    let f = friedman_rows(&x.view());
    let y = if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).expect("positive sd");
        f.mapv(|v| v + normal.sample(rng))
    } else {
        f.clone()
    };
    (x, y, f)
}
