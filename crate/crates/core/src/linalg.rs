//! Dense linear-algebra helpers on top of nalgebra: index-set crops,
//! deterministic pseudoinverses, symmetric eigen-decompositions and the
//! regularised solves used by every estimator in the crate.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used when nothing else is configured.
pub const DEFAULT_PINV_RTOL: f64 = 1e-10;

/// How a (possibly singular or indefinite) symmetric system is inverted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Inversion {
    /// Moore–Penrose pseudoinverse; singular values below
    /// `rel_tol * sigma_max` are treated as zero.
    PseudoInverse { rel_tol: f64 },
    /// Solve `(A + eps I) x = b`; falls back to the pseudoinverse when the
    /// shifted matrix is still singular.
    Ridged { eps: f64 },
}

impl Default for Inversion {
    fn default() -> Self {
        Inversion::PseudoInverse {
            rel_tol: DEFAULT_PINV_RTOL,
        }
    }
}

impl Inversion {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Inversion::PseudoInverse { rel_tol } if !(rel_tol > 0.0) => {
                Err(Error::param("inversion.rel_tol", "must be > 0"))
            }
            Inversion::Ridged { eps } if !(eps > 0.0) => {
                Err(Error::param("inversion.eps", "must be > 0"))
            }
            _ => Ok(()),
        }
    }
}

/// Result of a linear solve, with a flag raised whenever the requested route
/// failed and the pseudoinverse was used instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Solved {
    pub x: DVector<f64>,
    pub pinv_fallback: bool,
}

pub fn submatrix(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| a[(rows[r], cols[c])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Row-major upper triangle (diagonal included), `d(d+1)/2` entries.
pub fn upper_tri(a: &DMatrix<f64>) -> Vec<f64> {
    let d = a.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out.push(a[(i, j)]);
        }
    }
    out
}

pub fn from_upper_tri(d: usize, packed: &[f64]) -> Result<DMatrix<f64>> {
    if packed.len() != d * (d + 1) / 2 {
        return Err(Error::DimensionMismatch {
            expected: d * (d + 1) / 2,
            got: packed.len(),
        });
    }
    let mut a = DMatrix::zeros(d, d);
    let mut it = packed.iter();
    for i in 0..d {
        for j in i..d {
            let v = *it.next().expect("length checked");
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    Ok(a)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order (eigenvectors permuted accordingly).
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(a);
    vals.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn max_abs_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(a);
    vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Projection onto the PSD cone: eigenvalues clipped at zero.
pub fn clip_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    let clipped = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0)));
    symmetrize(&(&vecs * clipped * vecs.transpose()))
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clipped.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    let root = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0).sqrt()));
    symmetrize(&(&vecs * root * vecs.transpose()))
}

/// Moore–Penrose pseudoinverse with a relative singular-value cutoff.
///
/// Singular vectors are normalised so that the largest-magnitude entry of
/// every left singular vector is positive, which makes the decomposition
/// reproducible across runs.
pub fn pinv(a: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(DMatrix::zeros(n, m));
    }
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let mut u = svd.u.expect("u requested");
    let mut v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    for i in 0..s.len() {
        let col = u.column(i);
        let (mut best, mut best_abs) = (0.0, -1.0);
        for &x in col.iter() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = x;
            }
        }
        if best < 0.0 {
            u.column_mut(i).neg_mut();
            v_t.row_mut(i).neg_mut();
        }
    }
    let s_max = s.iter().copied().fold(0.0_f64, f64::max);
    let cutoff = rel_tol * s_max;
    let mut out = DMatrix::zeros(n, m);
    for i in 0..s.len() {
        if s[i] > cutoff && s[i] > 0.0 {
            out += (v_t.row(i).transpose() / s[i]) * u.column(i).transpose();
        }
    }
    Ok(out)
}

pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> Result<DVector<f64>> {
    Ok(pinv(a, rel_tol)? * b)
}

/// Solve the symmetric system `a x = b` with the configured inversion.
pub fn solve_sym(a: &DMatrix<f64>, b: &DVector<f64>, inversion: Inversion) -> Result<Solved> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.len(),
        });
    }
    if a.nrows() == 0 {
        return Ok(Solved {
            x: DVector::zeros(0),
            pinv_fallback: false,
        });
    }
    match inversion {
        Inversion::PseudoInverse { rel_tol } => Ok(Solved {
            x: pinv_solve(a, b, rel_tol)?,
            pinv_fallback: false,
        }),
        Inversion::Ridged { eps } => {
            let shifted = a + DMatrix::identity(a.nrows(), a.nrows()) * eps;
            match shifted.clone().lu().solve(b) {
                Some(x) if x.iter().all(|v| v.is_finite()) => Ok(Solved {
                    x,
                    pinv_fallback: false,
                }),
                _ => Ok(Solved {
                    x: pinv_solve(&shifted, b, DEFAULT_PINV_RTOL)?,
                    pinv_fallback: true,
                }),
            }
        }
    }
}

/// Solve `(a + lambda I) x = b` for symmetric PSD `a`. With `lambda == 0`
/// the minimum-norm pseudoinverse solution is returned; `pinv_fallback`
/// reports whether `a` was numerically singular.
pub fn ridge_solve(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Result<Solved> {
    let d = a.nrows();
    if d == 0 {
        return Ok(Solved {
            x: DVector::zeros(0),
            pinv_fallback: false,
        });
    }
    if lambda > 0.0 {
        let shifted = a + DMatrix::identity(d, d) * lambda;
        if let Some(chol) = shifted.clone().cholesky() {
            return Ok(Solved {
                x: chol.solve(b),
                pinv_fallback: false,
            });
        }
        return Ok(Solved {
            x: pinv_solve(&shifted, b, DEFAULT_PINV_RTOL)?,
            pinv_fallback: true,
        });
    }
    let (vals, _) = sym_eigen(a);
    let top = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let bottom = vals.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let singular = top == 0.0 || bottom <= DEFAULT_PINV_RTOL * top;
    Ok(Solved {
        x: pinv_solve(a, b, DEFAULT_PINV_RTOL)?,
        pinv_fallback: singular,
    })
}
