//! Cholesky helpers with diagonal-jitter repair and Gaussian draws from
//! canonical (precision) parameterizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// Cholesky factorization of a symmetric matrix. If the matrix is not
/// numerically positive definite, a growing multiple of the mean diagonal is
/// added until the factorization succeeds. Returns the factor and the jitter
/// that was added (0 when none was needed).
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let sym = symmetrize(a);
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Some((c, 0.0));
    }
    let n = sym.nrows();
    let scale = (sym.trace() / n as f64).abs().max(1e-12);
    let mut jitter = scale * 1e-10;
    for _ in 0..12 {
        let mut b = sym.clone();
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(b) {
            return Some((c, jitter));
        }
        jitter *= 10.0;
    }
    None
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Draw from N(Q⁻¹ b, Q⁻¹) given the Cholesky factor of the precision Q.
pub fn sample_canonical<R: Rng + ?Sized>(
    chol: &Cholesky<f64, Dyn>,
    b: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mean = chol.solve(b);
    let z = DVector::from_fn(b.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let lt = chol.l().transpose();
    let dev = lt
        .solve_upper_triangular(&z)
        .expect("triangular factor is non-singular");
    mean + dev
}

/// Draw a Wishart(scale = V, df) matrix by the Bartlett decomposition.
pub fn sample_wishart<R: Rng + ?Sized>(
    scale_chol_l: &DMatrix<f64>,
    df: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let p = scale_chol_l.nrows();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = rand_distr::ChiSquared::new(df - i as f64).expect("df > dim - 1");
        a[(i, i)] = rng.sample::<f64, _>(chi).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = scale_chol_l * a;
    &la * la.transpose()
}
