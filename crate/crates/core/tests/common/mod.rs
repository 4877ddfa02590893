#![allow(dead_code)]

use addgp::kernels::{zero_mean_component, KernelParams};
use addgp::{
    ComponentSpec, Dataset, FullModel, FullVariationalState, Kernel, Likelihood, SparseModel,
    Structure, VariationalState,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(0.0..1.0))
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Array1<f64> {
    // Box-Muller keeps the test helpers independent of the library's sampler.
    Array1::from_shape_simple_fn(n, || {
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Component kernel on one input: SE, or a zero-mean ANOVA term when
/// `anova` is set (inputs must lie in the unit box).
pub fn random_kernel(rng: &mut ChaCha8Rng, anova: bool) -> Kernel {
    let var = rng.random_range(0.5..2.0);
    let ls = rng.random_range(0.2..0.6);
    if anova {
        zero_mean_component(KernelParams::univariate(var, ls)).unwrap()
    } else {
        Kernel::squared_exp(var, &[ls], vec![0])
    }
}

/// Data on `[0,1]^c`, component `i` acting on input `i`.
pub fn random_data(rng: &mut ChaCha8Rng, n: usize, c: usize, lik: &Likelihood) -> Dataset {
    let x = uniform(rng, n, c);
    let f: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| (4.0 * v).sin()).sum())
        .collect();
    let y = match lik {
        Likelihood::Gaussian { .. } => &f + &normal_vec(rng, n, 0.3),
        Likelihood::Poisson => f.mapv(|v| (0.5 * v).exp().round()),
    };
    Dataset::new(x, y).unwrap()
}

pub fn specs_on_grid(rng: &mut ChaCha8Rng, c: usize, m: usize, anova: bool) -> Vec<ComponentSpec> {
    (0..c)
        .map(|i| {
            let z = uniform(rng, m, 1);
            ComponentSpec::new(random_kernel(rng, anova && i % 2 == 1), vec![i], z)
        })
        .collect()
}

pub fn random_sparse(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
    c: usize,
    r: usize,
    structure: Structure,
    lik: Likelihood,
) -> SparseModel {
    let data = random_data(rng, n, c, &lik);
    let specs = specs_on_grid(rng, c, m, true);
    let mc = m * c;
    let alpha = normal_vec(rng, mc, 0.5);
    let r = if structure == Structure::MeanField {
        mc
    } else {
        r
    };
    let mut b = Array2::from_shape_vec((mc, r), normal_vec(rng, mc * r, 0.5).to_vec()).unwrap();
    if structure == Structure::MeanField {
        for ((i, j), v) in b.indexed_iter_mut() {
            if i / m != j / m {
                *v = 0.0;
            }
        }
    }
    let st = VariationalState::new(alpha, b, structure, m, c).unwrap();
    SparseModel::new(specs, lik, st, data).unwrap()
}

/// One point per stratum `[i/n, (i+1)/n)` in every column, rows shuffled
/// independently, so no two inputs of a component nearly coincide.
pub fn stratified(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
    let mut x = Array2::zeros((n, c));
    for j in 0..c {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        for i in 0..n {
            x[[i, j]] = (perm[i] as f64 + rng.random_range(0.25..0.75)) / n as f64;
        }
    }
    x
}

pub fn random_full(rng: &mut ChaCha8Rng, n: usize, c: usize, lik: Likelihood) -> FullModel {
    let mut data = random_data(rng, n, c, &lik);
    data.x = stratified(rng, n, c);
    let specs = specs_on_grid(rng, c, 1, true);
    let st = FullVariationalState {
        alpha: normal_vec(rng, n * c, 0.5),
        lambda: normal_vec(rng, n, 1.0),
    };
    FullModel::new(specs, lik, st, data).unwrap()
}

/// Symmetric eigenvalues by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
