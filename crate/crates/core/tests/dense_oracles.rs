mod common;

use addgp::oracle::{dense_full_reference, dense_sparse_reference};
use addgp::{Likelihood, Structure};
use common::{random_full, random_sparse, rng, uniform};
use ndarray::Array2;

const TOL: f64 = 1e-8;

fn max_abs_diff(a: &ndarray::ArrayView1<f64>, b: &ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn full_model_matches_dense_construction() {
    let mut r = rng(31);
    for trial in 0..20 {
        let n = 3 + trial % 4;
        let c = 1 + trial % 3;
        let m = random_full(&mut r, n, c, Likelihood::gaussian(0.5));
        let d = dense_full_reference(&m).unwrap();
        let (a, l) = m.assemble_a_full().unwrap();
        assert!((&a - &d.a).iter().all(|v| v.abs() < TOL));
        let kl = m.kl_full().unwrap();
        assert!(
            (kl - d.kl).abs() < TOL * d.kl.abs().max(1.0),
            "{kl} vs {}",
            d.kl
        );
        assert!(kl >= -1e-8);
        let pm = m.marginals_full(true).unwrap();
        assert!(max_abs_diff(&pm.mu_sum.view(), &d.mu_sum.view()) < TOL);
        assert!(max_abs_diff(&pm.var_sum.view(), &d.var_sum.view()) < TOL);
        assert!(pm.var_sum.iter().all(|&v| v > 0.0));
        // log|K⁻¹Σ| = −log|A|
        assert!((d.logdet_ratio + l.logdet()).abs() < TOL);
        // tr(K⁻¹Σ) = NC − tr(Λ A⁻¹ Λ K_sum), which with A − I = Λ K_sum Λ is NC − N + tr(A⁻¹)
        let expect = (n * c) as f64 - n as f64 + l.inverse().diag().sum();
        assert!((d.trace_ratio - expect).abs() < TOL);
    }
}

#[test]
fn sparse_model_matches_dense_construction() {
    let mut r = rng(32);
    for trial in 0..20 {
        let m_ind = 2 + trial % 3;
        let c = 1 + trial % 3;
        let rank = 1 + trial % 4;
        let s = if trial % 4 == 3 {
            Structure::MeanField
        } else {
            Structure::Coupled
        };
        let m = random_sparse(&mut r, 5, m_ind, c, rank, s, Likelihood::gaussian(0.5));
        let xq = uniform(&mut r, 7, c);
        let d = dense_sparse_reference(&m, &xq.view()).unwrap();
        let (a, l) = m.assemble_a_sparse().unwrap();
        assert!((&a - &d.a).iter().all(|v| v.abs() < TOL));
        let kl = m.kl_sparse().unwrap();
        assert!(
            (kl - d.kl).abs() < TOL * d.kl.abs().max(1.0),
            "{kl} vs {}",
            d.kl
        );
        let pm = m.marginals_sparse(&xq.view(), true).unwrap();
        assert!(max_abs_diff(&pm.mu_sum.view(), &d.mu_sum.view()) < TOL);
        assert!(max_abs_diff(&pm.var_sum.view(), &d.var_sum.view()) < TOL);
        for (got, want) in pm.per_component.unwrap().iter().zip(&d.component_var) {
            assert!(max_abs_diff(&got.variance.view(), &want.view()) < TOL);
        }
        assert!((d.logdet_ratio + l.logdet()).abs() < TOL);
        let kuu = addgp::oracle::dense_kuu(&m.specs).unwrap();
        let ainv = l.inverse();
        let tr: f64 = (0..c)
            .map(|cc| {
                let bc = m.state.b_block(cc);
                let kc = kuu.slice(ndarray::s![
                    cc * m_ind..(cc + 1) * m_ind,
                    cc * m_ind..(cc + 1) * m_ind
                ]);
                (bc.dot(&ainv).dot(&bc.t()) * kc.t()).sum()
            })
            .sum();
        assert!((d.trace_ratio - ((m_ind * c) as f64 - tr)).abs() < TOL);
    }
}

#[test]
fn component_variance_at_inducing_inputs() {
    let mut r = rng(33);
    let m = random_sparse(
        &mut r,
        6,
        4,
        2,
        3,
        Structure::Coupled,
        Likelihood::gaussian(0.5),
    );
    // Query rows place every component at its own inducing inputs.
    let mut xq = Array2::zeros((4, 2));
    for c in 0..2 {
        xq.column_mut(c).assign(&m.specs[c].inducing.column(0));
    }
    // U carries the inducing jitter, so f(Z) = K K̃⁻¹ U plus residual
    // variance K − K K̃⁻¹ K, which is of order the jitter.
    let prior = addgp::oracle::dense_kuu(&m.specs).unwrap();
    let sigma = addgp::oracle::dense_precision_posterior(&prior, &m.state.b).unwrap();
    let raw = addgp::linalg::block_diag(
        &m.specs
            .iter()
            .map(|s| {
                s.kernel
                    .matrix(&s.inducing.view(), &s.inducing.view())
                    .unwrap()
            })
            .collect::<Vec<_>>(),
    );
    let proj = raw.dot(&addgp::oracle::dense_inverse(&prior).unwrap());
    let expected = &raw - &proj.dot(&raw.t()) + proj.dot(&sigma).dot(&proj.t());
    let pm = m.marginals_sparse(&xq.view(), true).unwrap();
    for (c, comp) in pm.per_component.unwrap().iter().enumerate() {
        for i in 0..4 {
            let e = expected[[c * 4 + i, c * 4 + i]];
            assert!((comp.variance[i] - e).abs() < TOL);
            assert!((e - sigma[[c * 4 + i, c * 4 + i]]).abs() < 1e-6);
        }
    }
}

#[test]
fn kl_nonnegative_on_random_states() {
    let mut r = rng(34);
    for _ in 0..30 {
        let m = random_sparse(&mut r, 4, 3, 2, 2, Structure::Coupled, Likelihood::Poisson);
        assert!(m.kl_sparse().unwrap() >= -1e-8);
        let f = random_full(&mut r, 4, 2, Likelihood::Poisson);
        assert!(f.kl_full().unwrap() >= -1e-8);
    }
}

#[test]
fn component_means_sum_to_predictor_mean() {
    let mut r = rng(35);
    let m = random_sparse(
        &mut r,
        30,
        4,
        3,
        2,
        Structure::Coupled,
        Likelihood::gaussian(0.3),
    );
    let pm = m.marginals_sparse(&m.data.x.view(), true).unwrap();
    let total = pm
        .per_component
        .unwrap()
        .iter()
        .fold(ndarray::Array1::zeros(30), |a, c| a + &c.mean);
    assert!(max_abs_diff(&total.view(), &pm.mu_sum.view()) < 1e-10);
}
