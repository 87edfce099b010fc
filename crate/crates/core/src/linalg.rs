//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// (A + Aᵀ)/2.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest absolute asymmetry max |A_ab − A_ba|.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues in ascending order.
pub fn sym_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    sym_eigen(a).0
}

/// Rebuild V diag(f(λ)) Vᵀ from a symmetric eigen-decomposition.
pub fn spectral_map(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    let n = a.nrows();
    let mut scaled = vecs.clone();
    for (c, v) in vals.iter().enumerate() {
        let s = f(*v);
        for r in 0..n {
            scaled[(r, c)] *= s;
        }
    }
    symmetrize(&(scaled * vecs.transpose()))
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sqrt_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(a, |v| v.max(0.0).sqrt())
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// ⟨A, B⟩ = tr(AᵀB).
pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Spectral norm of a symmetric matrix.
pub fn sym_op_norm(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Spectral norm of a general matrix.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    sym_op_norm(&(a.transpose() * a)).sqrt()
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// M x for a matrix stored by nalgebra (column-major).
pub fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let (r, c) = m.shape();
    debug_assert_eq!(c, x.len());
    let data = m.as_slice();
    let mut out = vec![0.0; r];
    for (j, xj) in x.iter().enumerate() {
        let col = &data[j * r..(j + 1) * r];
        for i in 0..r {
            out[i] += col[i] * xj;
        }
    }
    out
}

/// xᵀ M x.
pub fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let r = m.nrows();
    let data = m.as_slice();
    let mut acc = 0.0;
    for (j, xj) in x.iter().enumerate() {
        let col = &data[j * r..(j + 1) * r];
        acc += xj * dot(col, x);
    }
    acc
}

/// Orthonormal basis of span(vectors), dropping directions whose singular
/// value is below `rel_tol` times the largest one.
pub fn span_basis(vectors: &[DVector<f64>], dim: usize, rel_tol: f64) -> Vec<DVector<f64>> {
    let mut gram = DMatrix::zeros(dim, dim);
    for v in vectors {
        gram += v * v.transpose();
    }
    let (vals, vecs) = sym_eigen(&gram);
    let top = vals.last().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for c in (0..dim).rev() {
        if vals[c] > rel_tol * rel_tol * top {
            out.push(vecs.column(c).into_owned());
        }
    }
    out
}

/// Natural log of the determinant of a symmetric positive definite matrix.
pub fn log_det_spd(a: &DMatrix<f64>) -> Option<f64> {
    let chol = a.clone().cholesky()?;
    let l = chol.l();
    Some(2.0 * (0..a.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// Inverse of a symmetric positive definite matrix via Cholesky, symmetrized.
pub fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    Some(symmetrize(&chol.inverse()))
}
