//! Dense kernels shared by every module: symmetric and generalized
//! eigenproblems, weighted singular values, and a few matrix utilities.

use nalgebra::{Cholesky, ComplexField, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type C64 = nalgebra::Complex<f64>;

/// Relative asymmetry `||A - A^T||_max / ||A||_max`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

pub fn is_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    a.is_square() && asymmetry(a) <= rel_tol
}

pub fn sym_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(sym_part(a));
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

pub fn cholesky(a: &DMatrix<f64>, name: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(sym_part(a)).ok_or_else(|| Error::NotPositiveDefinite {
        name,
        eigenvalue: sym_eigen(a).0[0],
    })
}

/// Symmetric-definite pencil `A z = lambda B z` with `B` positive definite.
///
/// Returned eigenvectors are `B`-orthonormal (`Z^T B Z = I`), eigenvalues
/// ascending. Solved through the Cholesky congruence `L^{-1} A L^{-T}`.
#[derive(Debug, Clone)]
pub struct Pencil {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl Pencil {
    pub fn new(a: &DMatrix<f64>, b_chol: &Cholesky<f64, Dyn>) -> Self {
        let l = b_chol.l();
        let x = l
            .solve_lower_triangular(&sym_part(a))
            .expect("cholesky factor is nonsingular");
        let c = l
            .solve_lower_triangular(&x.transpose())
            .expect("cholesky factor is nonsingular");
        let (values, q) = sym_eigen(&c);
        let vectors = l
            .transpose()
            .solve_upper_triangular(&q)
            .expect("cholesky factor is nonsingular");
        Pencil { values, vectors }
    }
}

/// Singular values, sorted decreasing.
pub fn singular_values<T>(m: &DMatrix<T>) -> Vec<f64>
where
    T: ComplexField<RealField = f64>,
{
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn sigma_max<T>(m: &DMatrix<T>) -> f64
where
    T: ComplexField<RealField = f64>,
{
    singular_values(m).first().copied().unwrap_or(0.0)
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

/// Column-wise imaginary part.
pub fn imag(m: &DMatrix<C64>) -> DMatrix<f64> {
    m.map(|z| z.im)
}

pub fn lift<T: ComplexField<RealField = f64>>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(|x| T::from_real(x))
}

/// Row-major flattening used by every JSON container in the crate.
pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            found: data.len(),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Least-squares line `y = a + b x`; returns `(a, b)`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}
