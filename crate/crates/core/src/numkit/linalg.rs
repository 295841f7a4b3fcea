use crate::error::{GgmError, Result};
use crate::numkit::matrix::{dot, DenseMatrix};
use crate::scalar::Real;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: DenseMatrix<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factors the symmetric part `(A + Aᵀ)/2` of `a`.
    pub fn new(a: &DenseMatrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(GgmError::ShapeMismatch(format!("{:?} is not square", a.shape())));
        }
        let n = a.rows();
        let half = T::lit(0.5);
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
            if !(d > T::zero()) || !d.is_finite() {
                return Err(GgmError::NotPositiveDefinite);
            }
            d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let aij = half * (a[(i, j)] + a[(j, i)]);
                let s = aij - dot(&l.row(i)[..j], &l.row(j)[..j]);
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &DenseMatrix<T> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        self.l.diag().into_iter().map(|d| two * d.ln()).sum()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut y = b.to_vec();
        for i in 0..n {
            let s = dot(&self.l.row(i)[..i], &y[..i]);
            y[i] = (y[i] - s) / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> DenseMatrix<T> {
        let n = self.dim();
        let mut inv = DenseMatrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            inv.set_column(j, &self.solve(&e));
        }
        inv.symmetrized()
    }
}

/// Symmetric positive definite matrix, validated by a successful factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix<T> {
    inner: DenseMatrix<T>,
}

impl<T: Real> SpdMatrix<T> {
    /// Accepts `a` when `(a + aᵀ)/2` admits a Cholesky factorization; stores the symmetrized matrix.
    pub fn new(a: DenseMatrix<T>) -> Result<Self> {
        if !a.is_finite() {
            return Err(GgmError::NotPositiveDefinite);
        }
        let sym = a.symmetrized();
        Cholesky::new(&sym)?;
        Ok(Self { inner: sym })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            inner: DenseMatrix::identity(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.inner.rows()
    }

    pub fn as_matrix(&self) -> &DenseMatrix<T> {
        &self.inner
    }

    pub fn into_matrix(self) -> DenseMatrix<T> {
        self.inner
    }

    pub fn cholesky(&self) -> Cholesky<T> {
        Cholesky::new(&self.inner).expect("validated at construction")
    }

    pub fn inverse(&self) -> SpdMatrix<T> {
        SpdMatrix {
            inner: self.cholesky().inverse(),
        }
    }

    pub fn log_det(&self) -> T {
        self.cholesky().log_det()
    }

    pub fn cast<U: Real>(&self) -> Result<SpdMatrix<U>> {
        SpdMatrix::new(self.inner.cast())
    }
}

impl<T> std::ops::Index<(usize, usize)> for SpdMatrix<T> {
    type Output = T;

    fn index(&self, idx: (usize, usize)) -> &T {
        &self.inner[idx]
    }
}

/// Log-determinant through the Cholesky factor.
pub fn log_det_spd<T: Real>(a: &DenseMatrix<T>) -> Result<T> {
    Ok(Cholesky::new(a)?.log_det())
}

/// All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues<T: Real>(a: &DenseMatrix<T>) -> Result<Vec<T>> {
    if !a.is_square() {
        return Err(GgmError::ShapeMismatch(format!("{:?} is not square", a.shape())));
    }
    let n = a.rows();
    let mut m = a.symmetrized();
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let total: T = m.as_slice().iter().map(|&v| v * v).sum();
        if off <= eps * eps * total || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                m[(p, q)] = T::zero();
                m[(q, p)] = T::zero();
            }
        }
    }
    let mut ev = m.diag();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(ev)
}

/// `(λ_min, λ_max)` of a symmetric matrix.
pub fn eig_extremes<T: Real>(a: &DenseMatrix<T>) -> Result<(T, T)> {
    let ev = symmetric_eigenvalues(a)?;
    match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) => Ok((lo, hi)),
        _ => Err(GgmError::EmptyData),
    }
}

/// Subtracts each column's mean.
pub fn center_columns<T: Real>(data: &DenseMatrix<T>) -> DenseMatrix<T> {
    let (n, p) = data.shape();
    if n == 0 {
        return data.clone();
    }
    let nn = T::from_usize(n).unwrap();
    let mut means = vec![T::zero(); p];
    for i in 0..n {
        for (m, &v) in means.iter_mut().zip(data.row(i)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= nn);
    let mut out = data.clone();
    for i in 0..n {
        for (v, &m) in out.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    out
}

/// `dataᵀ data / n`; the caller centers.
pub fn sample_covariance<T: Real>(data: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let n = data.rows();
    if n == 0 {
        return Err(GgmError::EmptyData);
    }
    let nn = T::from_usize(n).unwrap();
    Ok(data.t_matmul(data)?.scale(T::one() / nn).symmetrized())
}

/// Solves a general square system by Gaussian elimination with partial pivoting.
pub fn solve_general<T: Real>(a: &DenseMatrix<T>, b: &[T]) -> Result<Vec<T>> {
    let n = a.rows();
    if !a.is_square() || b.len() != n {
        return Err(GgmError::ShapeMismatch("solve_general".into()));
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = a.max_abs().max(T::min_positive_value());
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| m[(i, k)].abs().partial_cmp(&m[(j, k)].abs()).unwrap())
            .unwrap();
        if m[(piv, k)].abs() <= T::epsilon() * scale * T::from_usize(n).unwrap() {
            return Err(GgmError::RankDeficient);
        }
        if piv != k {
            for j in 0..n {
                let tmp = m[(k, j)];
                m[(k, j)] = m[(piv, j)];
                m[(piv, j)] = tmp;
            }
            x.swap(k, piv);
        }
        for i in k + 1..n {
            let f = m[(i, k)] / m[(k, k)];
            if f == T::zero() {
                continue;
            }
            for j in k..n {
                let v = m[(k, j)];
                m[(i, j)] -= f * v;
            }
            let xk = x[k];
            x[i] -= f * xk;
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= m[(i, j)] * x[j];
        }
        x[i] = s / m[(i, i)];
    }
    Ok(x)
}

/// Inverse of a general square matrix.
pub fn inverse_general<T: Real>(a: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let n = a.rows();
    let mut inv = DenseMatrix::zeros(n, n);
    let mut e = vec![T::zero(); n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = T::zero());
        e[j] = T::one();
        inv.set_column(j, &solve_general(a, &e)?);
    }
    Ok(inv)
}
