//! Wall-clock scaling measurements for the sparse objective.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardUniform};

use crate::error::Result;
use crate::kernels::Kernel;
use crate::likelihood::Likelihood;
use crate::model::{regular_grid, ComponentSpec, Dataset, Structure, VariationalState};
use crate::sparse::SparseModel;

/// Random coupled model with `c` univariate SE components on `c` inputs,
/// `m` inducing points each and rank `r`.
pub fn random_sparse_model(
    n: usize,
    m: usize,
    c: usize,
    r: usize,
    seed: u64,
) -> Result<SparseModel> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n, c), || StandardUniform.sample(&mut rng));
    let y = Array1::from_shape_fn(n, |i| x.row(i).sum() + rng.random_range(-0.1..0.1));
    let data = Dataset::new(x, y)?;
    let specs: Vec<ComponentSpec> = (0..c)
        .map(|d| {
            ComponentSpec::new(
                Kernel::squared_exp(1.0, &[0.3], vec![0]),
                vec![d],
                regular_grid(m, 1),
            )
        })
        .collect();
    let normal = Normal::new(0.0, (1.0 / (m * c) as f64).sqrt()).expect("valid sd");
    let alpha = Array1::from_shape_simple_fn(m * c, || normal.sample(&mut rng));
    let b = Array2::from_shape_simple_fn((m * c, r), || normal.sample(&mut rng));
    let state = VariationalState::new(alpha, b, Structure::Coupled, m, c)?;
    SparseModel::new(specs, Likelihood::gaussian(0.1), state, data)
}

/// Seconds per call of `f`, as the median over `repeats` batches each
/// lasting at least `min_batch_seconds`.
pub fn time_per_call<F: FnMut()>(mut f: F, repeats: usize, min_batch_seconds: f64) -> f64 {
    f();
    let mut calls = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..calls {
            f();
        }
        if t.elapsed().as_secs_f64() >= min_batch_seconds || calls >= 1 << 20 {
            break;
        }
        calls *= 2;
    }
    let mut samples: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            for _ in 0..calls {
                f();
            }
            t.elapsed().as_secs_f64() / calls as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

/// Least-squares line `y = slope·x + intercept` with its R².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// `None` with fewer than two distinct abscissae.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let sxx: f64 = x[..n].iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x[..n]
        .iter()
        .zip(&y[..n])
        .map(|(a, b)| (a - mx) * (b - my))
        .sum();
    let syy: f64 = y[..n].iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Slope of `log y` against `log x`.
pub fn growth_exponent(x: &[f64], y: &[f64]) -> Option<f64> {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).map(|f| f.slope)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub r: usize,
    pub kl_seconds: f64,
    pub elbo_seconds: f64,
}

/// Time `kl_sparse` and `elbo_sparse` on one random instance. The rank is
/// fixed at `m`, so per-component work is constant as `c` grows.
pub fn time_instance(n: usize, m: usize, c: usize, repeats: usize, seed: u64) -> Result<Timing> {
    let model = random_sparse_model(n, m, c, m, seed)?;
    model.kl_sparse()?;
    model.elbo_sparse()?;
    let kl_seconds = time_per_call(
        || {
            std::hint::black_box(model.kl_sparse().ok());
        },
        repeats,
        0.02,
    );
    let elbo_seconds = time_per_call(
        || {
            std::hint::black_box(model.elbo_sparse().ok());
        },
        repeats,
        0.02,
    );
    Ok(Timing {
        n,
        m,
        c,
        r: m,
        kl_seconds,
        elbo_seconds,
    })
}
