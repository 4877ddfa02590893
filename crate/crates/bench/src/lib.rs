//! Fixtures shared by the criterion benchmarks.

use addgp::scaling::random_sparse_model;
use addgp::SparseModel;

/// Inducing points per component in every fixture.
pub const INDUCING: usize = 16;

/// Component counts swept at fixed `N`.
pub const COMPONENT_GRID: [usize; 4] = [1, 2, 4, 8];

/// Dataset sizes swept at fixed `C`.
pub const SIZE_GRID: [usize; 4] = [1000, 2000, 4000, 8000];

/// `N` held fixed during the component sweep.
pub const SWEEP_N: usize = 1000;

/// `C` held fixed during the size sweep.
pub const SWEEP_C: usize = 2;

/// Coupled sparse model with full rank `R = M` and a fixed seed.
pub fn fixture(n: usize, c: usize) -> SparseModel {
    random_sparse_model(n, INDUCING, c, INDUCING, 7).expect("valid fixture")
}
