//! Dense linear algebra used throughout the crate.
//!
//! Everything here is a plain function of its inputs: Cholesky factorization
//! with diagonal jitter, triangular solves, log-determinants and a few
//! helpers for symmetric matrices. Matrices are `ndarray` row-major `f64`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Relative jitter (times the mean diagonal) tried first when factorizing
/// kernel matrices.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Relative jitter of the single retry.
pub const RETRY_JITTER: f64 = 1e-6;

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = m + jitter I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    factor: Array2<f64>,
    jitter: f64,
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn factor(&self) -> &Array2<f64> {
        &self.factor
    }

    /// Absolute jitter that was added to the diagonal before factorizing.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn into_factor(self) -> Array2<f64> {
        self.factor
    }

    /// Wrap an existing factor. The caller promises it is lower triangular
    /// with a positive diagonal.
    pub fn from_factor(factor: Array2<f64>) -> Result<Self> {
        if factor.nrows() != factor.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "factor must be square, got {}x{}",
                factor.nrows(),
                factor.ncols()
            )));
        }
        for i in 0..factor.nrows() {
            if !(factor[[i, i]] > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    pivot: i,
                    value: factor[[i, i]],
                });
            }
        }
        Ok(Cholesky {
            factor,
            jitter: 0.0,
        })
    }

    /// Solve `(L Lᵀ) x = rhs`.
    pub fn solve(&self, rhs: &Array2<f64>) -> Result<Array2<f64>> {
        let y = tri_solve(self, rhs, false)?;
        tri_solve(self, &y, true)
    }

    pub fn solve_vec(&self, rhs: &Array1<f64>) -> Result<Array1<f64>> {
        let m = rhs.view().insert_axis(Axis(1)).to_owned();
        Ok(self.solve(&m)?.index_axis_move(Axis(1), 0))
    }

    /// Explicit inverse of `L Lᵀ`, symmetrized.
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.dim();
        let linv = tri_solve(self, &Array2::eye(n), false).expect("square identity rhs");
        let inv = linv.t().dot(&linv);
        symmetrize(&inv)
    }

    pub fn logdet(&self) -> f64 {
        logdet_from_chol(self)
    }

    /// `tr((L Lᵀ)⁻¹) = ‖L⁻¹‖²_F`.
    pub fn inverse_trace(&self) -> f64 {
        let linv = tri_solve(self, &Array2::eye(self.dim()), false).expect("square identity rhs");
        linv.iter().map(|v| v * v).sum()
    }
}

/// Factor `m + jitter I`. `jitter` is absolute.
pub fn cholesky(m: &Array2<f64>, jitter: f64) -> Result<Cholesky> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    // Row-major storage so the inner products run over contiguous rows.
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let (row_j, rest) = l[j * n..].split_at_mut(n);
        let d = m[[j, j]] + jitter - dot(&row_j[..j], &row_j[..j]);
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        row_j[j] = d;
        for (off, row_i) in rest.chunks_exact_mut(n).enumerate() {
            let i = j + 1 + off;
            row_i[j] = (m[[i, j]] - dot(&row_i[..j], &row_j[..j])) / d;
        }
    }
    let factor = Array2::from_shape_vec((n, n), l).expect("n x n storage");
    Ok(Cholesky { factor, jitter })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Factor a kernel matrix with the standard jitter policy: `1e-8 · mean(diag)`
/// first, then one retry at `1e-6 · mean(diag)`.
pub fn cholesky_jittered(m: &Array2<f64>) -> Result<Cholesky> {
    let n = m.nrows().max(1);
    let scale = (m.diag().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
    match cholesky(m, DEFAULT_JITTER * scale) {
        Ok(c) => Ok(c),
        Err(Error::NotPositiveDefinite { .. }) => cholesky(m, RETRY_JITTER * scale),
        Err(e) => Err(e),
    }
}

/// Solve `L X = rhs`, or `Lᵀ X = rhs` when `transpose` is set.
pub fn tri_solve(l: &Cholesky, rhs: &Array2<f64>, transpose: bool) -> Result<Array2<f64>> {
    let n = l.dim();
    if rhs.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "triangular solve: factor is {n}x{n}, rhs has {} rows",
            rhs.nrows()
        )));
    }
    let f = &l.factor;
    let k = rhs.ncols();
    let mut x = rhs.as_standard_layout().into_owned();
    let xs = x.as_slice_mut().expect("standard layout");
    if k == 0 {
        return Ok(x);
    }
    if !transpose {
        for i in 0..n {
            let (done, row) = xs.split_at_mut(i * k);
            let row = &mut row[..k];
            for (j, xj) in done.chunks_exact(k).enumerate() {
                let lij = f[[i, j]];
                if lij != 0.0 {
                    row.iter_mut().zip(xj).for_each(|(v, w)| *v -= lij * w);
                }
            }
            let d = f[[i, i]];
            row.iter_mut().for_each(|v| *v /= d);
        }
    } else {
        for i in (0..n).rev() {
            let (head, done) = xs.split_at_mut((i + 1) * k);
            let row = &mut head[i * k..];
            for (off, xj) in done.chunks_exact(k).enumerate() {
                let lji = f[[i + 1 + off, i]];
                if lji != 0.0 {
                    row.iter_mut().zip(xj).for_each(|(v, w)| *v -= lji * w);
                }
            }
            let d = f[[i, i]];
            row.iter_mut().for_each(|v| *v /= d);
        }
    }
    Ok(x)
}

/// `log det(L Lᵀ) = 2 Σ log L_ii`.
pub fn logdet_from_chol(l: &Cholesky) -> f64 {
    2.0 * l.factor.diag().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    (m + &m.t()) * 0.5
}

/// Largest absolute asymmetry `max |m_ij - m_ji|`.
pub fn asymmetry(m: &ArrayView2<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    worst
}

/// `tr(a b)` for square matrices of equal size without forming the product.
pub fn trace_of_product(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            s += a[[i, j]] * b[[j, i]];
        }
    }
    s
}

/// Frobenius inner product `Σ a_ij b_ij`.
pub fn frobenius_dot(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    ndarray::Zip::from(a).and(b).fold(0.0, |s, x, y| s + x * y)
}

/// Squared column norms of `m`.
pub fn column_sq_norms(m: &Array2<f64>) -> Array1<f64> {
    m.map_axis(Axis(0), |c| c.dot(&c))
}

/// Pairwise (cascade) summation. Result depends only on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BASE: usize = 32;
    if xs.len() <= BASE {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn pairwise_sum_view(xs: ArrayView1<f64>) -> f64 {
    match xs.as_slice() {
        Some(s) => pairwise_sum(s),
        None => pairwise_sum(&xs.to_vec()),
    }
}

/// Block-diagonal matrix assembled from square blocks.
pub fn block_diag(blocks: &[Array2<f64>]) -> Array2<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let m: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Array2::zeros((n, m));
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.slice_mut(ndarray::s![r..r + b.nrows(), c..c + b.ncols()])
            .assign(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Block-diagonal change of variables `x_b = L_b⁻ᵀ x̃_b` on row blocks,
/// with `L_b` the Cholesky factor of block `b`'s kernel matrix.
///
/// Optimizing in `x̃` instead of `x` removes the kernel's conditioning from
/// the curvature of terms like `xᵀ K x`.
#[derive(Debug, Clone)]
pub struct BlockWhitening {
    factors: Vec<Cholesky>,
}

impl BlockWhitening {
    pub fn new(blocks: &[Array2<f64>]) -> Result<Self> {
        let factors = blocks
            .iter()
            .map(cholesky_jittered)
            .collect::<Result<_>>()?;
        Ok(BlockWhitening { factors })
    }

    pub fn rows(&self) -> usize {
        self.factors.iter().map(|f| f.dim()).sum()
    }

    fn map_blocks<F>(&self, x: &Array2<f64>, f: F) -> Result<Array2<f64>>
    where
        F: Fn(&Cholesky, Array2<f64>) -> Result<Array2<f64>>,
    {
        if x.nrows() != self.rows() {
            return Err(Error::DimensionMismatch(format!(
                "whitening covers {} rows, got {}",
                self.rows(),
                x.nrows()
            )));
        }
        let mut out = Array2::zeros(x.dim());
        let mut off = 0;
        for l in &self.factors {
            let n = l.dim();
            let rows = ndarray::s![off..off + n, ..];
            out.slice_mut(rows).assign(&f(l, x.slice(rows).to_owned())?);
            off += n;
        }
        Ok(out)
    }

    /// `x̃_b = L_bᵀ x_b`.
    pub fn whiten(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.map_blocks(x, |l, b| Ok(l.factor().t().dot(&b)))
    }

    /// `x_b = L_b⁻ᵀ x̃_b`.
    pub fn unwhiten(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.map_blocks(x, |l, b| tri_solve(l, &b, true))
    }

    /// Gradient with respect to `x̃` from the gradient with respect to `x`:
    /// `g̃_b = L_b⁻¹ g_b`.
    pub fn pull_back(&self, g: &Array2<f64>) -> Result<Array2<f64>> {
        self.map_blocks(g, |l, b| tri_solve(l, &b, false))
    }
}

pub fn column(v: &Array1<f64>) -> Array2<f64> {
    v.view().insert_axis(Axis(1)).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        g.dot(&g.t()) + Array2::<f64>::eye(n)
    }

    fn frob(m: &Array2<f64>) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    // Gaussian elimination with partial pivoting; returns log|det|.
    fn lu_logabsdet(m: &Array2<f64>) -> f64 {
        let mut a = m.clone();
        let n = a.nrows();
        let mut acc = 0.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[[i, k]].abs().partial_cmp(&a[[j, k]].abs()).unwrap())
                .unwrap();
            if p != k {
                for c in 0..n {
                    a.swap([k, c], [p, c]);
                }
            }
            let piv = a[[k, k]];
            acc += piv.abs().ln();
            for i in (k + 1)..n {
                let f = a[[i, k]] / piv;
                for c in k..n {
                    a[[i, c]] -= f * a[[k, c]];
                }
            }
        }
        acc
    }

    // Gauss-Jordan inverse.
    fn gj_inverse(m: &Array2<f64>) -> Array2<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        let mut inv = Array2::<f64>::eye(n);
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[[i, k]].abs().partial_cmp(&a[[j, k]].abs()).unwrap())
                .unwrap();
            for c in 0..n {
                a.swap([k, c], [p, c]);
                inv.swap([k, c], [p, c]);
            }
            let piv = a[[k, k]];
            for c in 0..n {
                a[[k, c]] /= piv;
                inv[[k, c]] /= piv;
            }
            for i in 0..n {
                if i != k {
                    let f = a[[i, k]];
                    for c in 0..n {
                        a[[i, c]] -= f * a[[k, c]];
                        inv[[i, c]] -= f * inv[[k, c]];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&Array2::eye(3), 0.0).unwrap();
        assert_eq!(l.factor(), &Array2::<f64>::eye(3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let l = cholesky(&array![[4.0, 2.0], [2.0, 5.0]], 0.0).unwrap();
        assert_eq!(l.factor(), &array![[2.0, 0.0], [1.0, 2.0]]);
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let a = random_spd(20, 1);
        let l = cholesky(&a, 0.0).unwrap();
        let rec = l.factor().dot(&l.factor().t());
        assert!(frob(&(&rec - &a)) / frob(&a) < 1e-10);
        for i in 0..20 {
            for j in (i + 1)..20 {
                assert_eq!(l.factor()[[i, j]], 0.0);
            }
        }
    }

    #[test]
    fn cholesky_with_jitter_reconstructs_shifted() {
        let a = random_spd(8, 2);
        let l = cholesky(&a, 0.5).unwrap();
        let rec = l.factor().dot(&l.factor().t());
        let target = &a + &(Array2::<f64>::eye(8) * 0.5);
        assert!(frob(&(&rec - &target)) / frob(&a) < 1e-8);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(
            cholesky(&m, 0.0),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
        assert!(cholesky_jittered(&m).is_err());
    }

    #[test]
    fn jittered_factor_handles_rank_deficient_gram() {
        // rank one
        let v = array![[1.0], [2.0], [3.0]];
        let m = v.dot(&v.t());
        let l = cholesky_jittered(&m).unwrap();
        assert!(l.jitter() > 0.0);
    }

    #[test]
    fn tri_solve_identity() {
        let l = cholesky(&Array2::eye(4), 0.0).unwrap();
        let v = array![[1.0], [2.0], [3.0], [4.0]];
        assert_eq!(tri_solve(&l, &v, false).unwrap(), v);
        assert_eq!(tri_solve(&l, &v, true).unwrap(), v);
    }

    #[test]
    fn tri_solve_multiplies_back() {
        let m = random_spd(7, 3);
        let l = cholesky(&m, 0.0).unwrap();
        let x = tri_solve(&l, &m, false).unwrap();
        let back = l.factor().dot(&x);
        assert!(frob(&(&back - &m)) / frob(&m) < 1e-10);
        let xt = tri_solve(&l, &m, true).unwrap();
        let back = l.factor().t().dot(&xt);
        assert!(frob(&(&back - &m)) / frob(&m) < 1e-10);
    }

    #[test]
    fn composed_solves_match_dense_inverse() {
        let m = random_spd(5, 4);
        let y = array![[1.0], [-2.0], [0.5], [3.0], [0.0]];
        let l = cholesky(&m, 0.0).unwrap();
        let x = l.solve(&y).unwrap();
        let expected = gj_inverse(&m).dot(&y);
        assert!(frob(&(&x - &expected)) < 1e-10 * frob(&expected));
        assert!(frob(&(&l.inverse() - &gj_inverse(&m))) < 1e-10 * frob(&gj_inverse(&m)));
        let tr = gj_inverse(&m).diag().sum();
        assert!((l.inverse_trace() - tr).abs() < 1e-10 * tr);
    }

    #[test]
    fn tri_solve_dimension_mismatch() {
        let l = cholesky(&Array2::eye(3), 0.0).unwrap();
        assert!(matches!(
            tri_solve(&l, &Array2::zeros((2, 1)), false),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn logdet_examples() {
        let l = cholesky(&Array2::eye(4), 0.0).unwrap();
        assert_eq!(logdet_from_chol(&l), 0.0);
        let l = cholesky(&array![[4.0, 0.0], [0.0, 4.0]], 0.0).unwrap();
        assert!((logdet_from_chol(&l) - 4.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logdet_matches_lu() {
        let m = random_spd(10, 5);
        let l = cholesky(&m, 0.0).unwrap();
        assert!((logdet_from_chol(&l) - lu_logabsdet(&m)).abs() < 1e-9);
    }

    #[test]
    fn logdet_scales_with_dimension() {
        let m = random_spd(6, 6);
        let a = logdet_from_chol(&cholesky(&m, 0.0).unwrap());
        let b = logdet_from_chol(&cholesky(&(&m * 2.0), 0.0).unwrap());
        assert!((b - a - 6.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn whitening_round_trip_and_adjoint() {
        let blocks = vec![random_spd(3, 9), random_spd(3, 10)];
        let w = BlockWhitening::new(&blocks).unwrap();
        let x = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 - j as f64 * 0.7).sin());
        let back = w.unwhiten(&w.whiten(&x).unwrap()).unwrap();
        assert!((&back - &x).iter().all(|d| d.abs() < 1e-12));
        // <g, unwhiten(y)> == <pull_back(g), y>
        let g = x.mapv(|v| v.cos());
        let y = x.mapv(|v| v * v - 0.3);
        let lhs = frobenius_dot(&g.view(), &w.unwhiten(&y).unwrap().view());
        let rhs = frobenius_dot(&w.pull_back(&g).unwrap().view(), &y.view());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pairwise_sum_is_accurate() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.1).collect();
        assert!((pairwise_sum(&xs) - 49950.0).abs() < 1e-8);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn prop_cholesky_and_solve(seed in 0u64..500, n in 1usize..12) {
            let m = random_spd(n, seed);
            let l = cholesky(&m, 0.0).unwrap();
            let rec = l.factor().dot(&l.factor().t());
            proptest::prop_assert!(frob(&(&rec - &m)) / frob(&m) < 1e-8);
            let rhs = Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64 - 4.0);
            let x = tri_solve(&l, &rhs, false).unwrap();
            let back = l.factor().dot(&x);
            proptest::prop_assert!(frob(&(&back - &rhs)) <= 1e-10 * frob(&rhs).max(1.0));
        }
    }
}
