use crate::error::{GgmError, Result};
use crate::numkit::{Cholesky, DenseMatrix, SpdMatrix};
use crate::scalar::{soft_threshold, Real};

/// Graphical Lasso with an unpenalized diagonal:
/// minimize `−log det Θ + tr(SΘ) + Σ_{i≠j} ρ·w_ij·|Θ_ij|`, with `w_ij = 1 − W_ij` when a weight
/// matrix `W` is supplied and `w_ij = 1` otherwise.
#[derive(Debug, Clone)]
pub struct GlassoProblem<T> {
    pub s: DenseMatrix<T>,
    pub rho: T,
    pub weights: Option<DenseMatrix<T>>,
    /// Convergence threshold on the largest change of the covariance iterate, relative to mean diag(S).
    pub tol: T,
    pub max_iter: usize,
    /// Ridge-stabilize a singular S even when no penalty is active.
    pub ridge_fallback: bool,
    /// Previous solution to start from; ignored when it does not fit.
    pub warm_start: Option<SpdMatrix<T>>,
}

#[derive(Debug, Clone)]
pub struct GlassoSolution<T> {
    pub theta: SpdMatrix<T>,
    /// Covariance-side iterate, equal to `Θ⁻¹` at convergence.
    pub covariance: DenseMatrix<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Ridge added to the diagonal of S when it was not positive definite (zero otherwise).
    pub ridge: T,
}

impl<T: Real> GlassoSolution<T> {
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(GgmError::NonConverged {
                what: "graphical lasso",
                iterations: self.iterations,
            })
        }
    }
}

impl<T: Real> GlassoProblem<T> {
    pub fn new(s: DenseMatrix<T>, rho: T) -> Self {
        Self {
            s,
            rho,
            weights: None,
            tol: T::lit(1e-10),
            max_iter: 500,
            ridge_fallback: false,
            warm_start: None,
        }
    }

    pub fn with_ridge_fallback(mut self) -> Self {
        self.ridge_fallback = true;
        self
    }

    pub fn with_weights(mut self, w: DenseMatrix<T>) -> Self {
        self.weights = Some(w);
        self
    }

    pub fn with_warm_start(mut self, theta: SpdMatrix<T>) -> Self {
        self.warm_start = Some(theta);
        self
    }

    pub fn with_tol(mut self, tol: T) -> Self {
        self.tol = tol;
        self
    }

    /// Effective off-diagonal penalty matrix `ρ·(1 − W)` (or `ρ`), zero on the diagonal.
    pub fn penalty_matrix(&self) -> DenseMatrix<T> {
        let p = self.s.rows();
        DenseMatrix::from_fn(p, p, |i, j| {
            if i == j {
                T::zero()
            } else {
                let w = self
                    .weights
                    .as_ref()
                    .map_or(T::one(), |w| T::one() - w[(i, j)].max(T::zero()).min(T::one()));
                self.rho * w
            }
        })
    }

    fn validate(&self) -> Result<()> {
        if !self.s.is_square() {
            return Err(GgmError::ShapeMismatch("S must be square".into()));
        }
        if !self.s.is_symmetric(T::lit(1e-8)) || !self.s.is_finite() {
            return Err(GgmError::BadConfig("S must be finite and symmetric".into()));
        }
        if self.rho < T::zero() {
            return Err(GgmError::BadConfig("rho must be nonnegative".into()));
        }
        if let Some(w) = &self.weights {
            if w.shape() != self.s.shape() {
                return Err(GgmError::ShapeMismatch("weights must match S".into()));
            }
            if !w.is_symmetric(T::lit(1e-12)) {
                return Err(GgmError::BadConfig("weights must be symmetric".into()));
            }
        }
        Ok(())
    }
}

/// `(S, ridge)`: S itself when positive definite; otherwise S plus `1e-8·tr(S)/p` on the
/// diagonal when allowed, and an error otherwise.
fn stabilized<T: Real>(s: &DenseMatrix<T>, allow_ridge: bool) -> Result<(DenseMatrix<T>, T)> {
    if Cholesky::new(s).is_ok() {
        return Ok((s.clone(), T::zero()));
    }
    if !allow_ridge {
        return Err(GgmError::NotPositiveDefinite);
    }
    let p = s.rows();
    let mut ridge = T::lit(1e-8) * s.trace() / T::from_usize(p).unwrap();
    if !(ridge > T::zero()) {
        ridge = T::lit(1e-8);
    }
    let mut out = s.clone();
    for i in 0..p {
        out[(i, i)] += ridge;
    }
    // a zero-variance column can still defeat the ridge
    for i in 0..p {
        if !(out[(i, i)] > T::zero()) {
            return Err(GgmError::NotPositiveDefinite);
        }
    }
    Ok((out, ridge))
}

/// Solves the inner problem of column `j` on the current nonzeros of `beta` with their signs held
/// fixed. Keeps the result and refreshes `wb` only when every sign survives.
fn exact_active_solve<T: Real>(
    w: &DenseMatrix<T>,
    s: &DenseMatrix<T>,
    penalty: &DenseMatrix<T>,
    j: usize,
    beta: &mut [T],
    wb: &mut [T],
) -> bool {
    let active: Vec<usize> = (0..beta.len()).filter(|&k| k != j && beta[k] != T::zero()).collect();
    if active.is_empty() {
        return false;
    }
    let sub = DenseMatrix::from_fn(active.len(), active.len(), |a, b| w[(active[a], active[b])]);
    let Ok(chol) = Cholesky::new(&sub) else {
        return false;
    };
    let rhs: Vec<T> = active
        .iter()
        .map(|&k| s[(k, j)] - penalty[(k, j)] * beta[k].signum())
        .collect();
    let x = chol.solve(&rhs);
    if active.iter().zip(&x).any(|(&k, &v)| !(v.signum() == beta[k].signum() && v.is_finite())) {
        return false;
    }
    for (&k, &v) in active.iter().zip(&x) {
        beta[k] = v;
    }
    for (a, out) in wb.iter_mut().enumerate() {
        if a != j {
            *out = active.iter().zip(&x).fold(T::zero(), |acc, (&k, &v)| acc + w[(a, k)] * v);
        }
    }
    true
}

/// Covariance iterate and inner solutions implied by a previous `Θ`, with the diagonal reset to
/// that of `s`. `None` when the shapes differ or the result is not positive definite.
fn warm_pair<T: Real>(theta: Option<&SpdMatrix<T>>, s: &DenseMatrix<T>) -> Option<(DenseMatrix<T>, DenseMatrix<T>)> {
    let theta = theta?;
    let p = s.rows();
    if theta.dim() != p {
        return None;
    }
    let mut w = theta.inverse().into_matrix().symmetrized();
    for i in 0..p {
        w[(i, i)] = s[(i, i)];
    }
    Cholesky::new(&w).ok()?;
    let th = theta.as_matrix();
    let betas = DenseMatrix::from_fn(p, p, |k, j| if k == j { T::zero() } else { -th[(k, j)] / th[(j, j)] });
    Some((w, betas))
}

/// Block coordinate descent over columns of the covariance iterate with an inner Lasso per
/// column; sweeps run in index order.
pub fn glasso<T: Real>(problem: &GlassoProblem<T>) -> Result<GlassoSolution<T>> {
    problem.validate()?;
    let p = problem.s.rows();
    if p == 0 {
        return Err(GgmError::EmptyData);
    }
    let penalty = problem.penalty_matrix();
    let any_penalty = penalty.as_slice().iter().any(|&v| v > T::zero());
    let (s, ridge) = stabilized(&problem.s, problem.rho > T::zero() || problem.ridge_fallback)?;

    if !any_penalty || p == 1 {
        let chol = Cholesky::new(&s)?;
        let theta = SpdMatrix::new(chol.inverse())?;
        return Ok(GlassoSolution {
            theta,
            covariance: s,
            iterations: 0,
            converged: true,
            ridge,
        });
    }

    let mean_diag = s.trace() / T::from_usize(p).unwrap();
    let tol = (problem.tol * mean_diag).max(T::tol_floor() * mean_diag);
    let floor = tol * T::lit(1e-2);
    // inner solves tighten as the outer iterate settles
    let mut inner_tol = mean_diag * T::lit(1e-3);

    // column j of `betas` holds the inner Lasso solution for column j (entry j unused)
    let (mut w, mut betas) = warm_pair(problem.warm_start.as_ref(), &s).unwrap_or_else(|| (s.clone(), DenseMatrix::zeros(p, p)));
    let mut wb = vec![T::zero(); p];
    let mut beta = vec![T::zero(); p];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < problem.max_iter {
        iterations += 1;
        let mut max_change = T::zero();
        for j in 0..p {
            for k in 0..p {
                beta[k] = if k == j { T::zero() } else { betas[(k, j)] };
            }
            // wb = W_{-j,-j} β
            for a in 0..p {
                if a == j {
                    continue;
                }
                let row = w.row(a);
                let mut acc = T::zero();
                for b in 0..p {
                    if b != j {
                        acc += row[b] * beta[b];
                    }
                }
                wb[a] = acc;
            }
            // full sweeps alternate with sweeps over the current nonzeros; each time the active
            // set looks settled, try solving it exactly
            let mut sweeps = 0;
            let mut active_only = false;
            while sweeps < 10_000 {
                sweeps += 1;
                let mut delta_max = T::zero();
                for k in 0..p {
                    if k == j || (active_only && beta[k] == T::zero()) {
                        continue;
                    }
                    let vkk = w[(k, k)];
                    let old = beta[k];
                    let z = s[(k, j)] - (wb[k] - vkk * old);
                    let new = soft_threshold(z, penalty[(k, j)]) / vkk;
                    let d = new - old;
                    if d != T::zero() {
                        beta[k] = new;
                        for a in 0..p {
                            if a != j {
                                wb[a] += w[(a, k)] * d;
                            }
                        }
                        delta_max = delta_max.max((d * vkk).abs());
                    }
                }
                if delta_max <= inner_tol {
                    if !active_only {
                        break;
                    }
                    active_only = false;
                } else if !active_only {
                    active_only = !exact_active_solve(&w, &s, &penalty, j, &mut beta, &mut wb);
                }
            }
            for k in 0..p {
                if k == j {
                    continue;
                }
                betas[(k, j)] = beta[k];
                let change = (wb[k] - w[(k, j)]).abs();
                max_change = max_change.max(change);
                w[(k, j)] = wb[k];
                w[(j, k)] = wb[k];
            }
        }
        if max_change <= tol && inner_tol <= floor {
            converged = true;
            break;
        }
        inner_tol = (max_change * T::lit(1e-2)).min(inner_tol).max(floor);
    }

    let mut theta = DenseMatrix::zeros(p, p);
    for j in 0..p {
        let mut q = w[(j, j)];
        for k in 0..p {
            if k != j {
                q -= w[(j, k)] * betas[(k, j)];
            }
        }
        let tjj = T::one() / q;
        theta[(j, j)] = tjj;
        for k in 0..p {
            if k != j {
                theta[(k, j)] = -betas[(k, j)] * tjj;
            }
        }
    }
    // average the two estimates of each off-diagonal, keeping exact zeros when either side is zero
    let mut sym = DenseMatrix::zeros(p, p);
    for i in 0..p {
        sym[(i, i)] = theta[(i, i)];
        for j in 0..i {
            let a = theta[(i, j)];
            let b = theta[(j, i)];
            let v = if a == T::zero() || b == T::zero() {
                T::zero()
            } else {
                T::lit(0.5) * (a + b)
            };
            sym[(i, j)] = v;
            sym[(j, i)] = v;
        }
    }
    let theta = SpdMatrix::new(sym)?;
    Ok(GlassoSolution {
        theta,
        covariance: w,
        iterations,
        converged,
        ridge,
    })
}

/// Largest violation of the graphical Lasso optimality conditions at `theta`:
/// `(Θ⁻¹)_ii = S_ii`; `(Θ⁻¹)_ij = S_ij + ρ_ij·sign(Θ_ij)` on nonzeros; `|(Θ⁻¹)_ij − S_ij| ≤ ρ_ij` on zeros.
pub fn glasso_kkt_residual<T: Real>(problem: &GlassoProblem<T>, theta: &SpdMatrix<T>) -> T {
    let p = problem.s.rows();
    let penalty = problem.penalty_matrix();
    let cov = theta.inverse();
    let mut worst = T::zero();
    for i in 0..p {
        for j in 0..p {
            let diff = cov[(i, j)] - problem.s[(i, j)];
            let v = if i == j {
                diff.abs()
            } else if theta[(i, j)] != T::zero() {
                (diff - penalty[(i, j)] * theta[(i, j)].signum()).abs()
            } else {
                (diff.abs() - penalty[(i, j)]).max(T::zero())
            };
            worst = worst.max(v);
        }
    }
    worst
}

/// `−log det Θ + tr(SΘ) + Σ_{i≠j} ρ_ij |Θ_ij|`.
pub fn glasso_objective<T: Real>(problem: &GlassoProblem<T>, theta: &SpdMatrix<T>) -> T {
    let penalty = problem.penalty_matrix();
    let p = problem.s.rows();
    let mut tr = T::zero();
    let mut pen = T::zero();
    for i in 0..p {
        for j in 0..p {
            tr += problem.s[(i, j)] * theta[(j, i)];
            pen += penalty[(i, j)] * theta[(i, j)].abs();
        }
    }
    tr - theta.log_det() + pen
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unpenalized_diagonal_case_inverts() {
        let s = DenseMatrix::from_diag(&[2.0, 3.0]);
        let sol = glasso(&GlassoProblem::new(s, 0.0)).unwrap();
        assert_relative_eq!(sol.theta[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(sol.theta[(1, 1)], 1.0 / 3.0, epsilon = 1e-14);
        assert_eq!(sol.theta[(0, 1)], 0.0);
    }

    #[test]
    fn two_by_two_soft_thresholds_the_covariance() {
        let s = DenseMatrix::from_rows(&[[1.0, 0.6], [0.6, 1.0]]).unwrap();
        let prob = GlassoProblem::new(s, 0.2);
        let sol = glasso(&prob).unwrap();
        let cov = sol.theta.inverse();
        assert_relative_eq!(cov[(0, 1)], 0.4, epsilon = 1e-9);
        assert_relative_eq!(cov[(0, 0)], 1.0, epsilon = 1e-9);
        assert!(glasso_kkt_residual(&prob, &sol.theta) < 1e-9);
    }

    #[test]
    fn all_ones_weights_cancel_the_penalty() {
        let s = DenseMatrix::from_rows(&[[1.0, 0.3, 0.1], [0.3, 2.0, -0.4], [0.1, -0.4, 1.5]]).unwrap();
        let w = DenseMatrix::from_fn(3, 3, |_, _| 1.0);
        let weighted = glasso(&GlassoProblem::new(s.clone(), 0.7).with_weights(w)).unwrap();
        let plain = glasso(&GlassoProblem::new(s, 0.0)).unwrap();
        let d = weighted.theta.as_matrix().sub(plain.theta.as_matrix()).unwrap();
        assert!(d.max_abs() < 1e-12);
    }

    #[test]
    fn huge_penalty_gives_diagonal_inverse() {
        let s = DenseMatrix::from_rows(&[[1.0, 0.3, 0.1], [0.3, 2.0, -0.4], [0.1, -0.4, 1.5]]).unwrap();
        let sol = glasso(&GlassoProblem::new(s, 10.0)).unwrap();
        assert!(sol.converged);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(sol.theta[(i, j)], 0.0);
                }
            }
        }
        assert_relative_eq!(sol.theta[(1, 1)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn singular_input_needs_a_penalty() {
        let s = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(glasso(&GlassoProblem::new(s.clone(), 0.0)), Err(GgmError::NotPositiveDefinite)));
        let sol = glasso(&GlassoProblem::new(s, 0.1)).unwrap();
        assert!(sol.ridge > 0.0);
    }

    #[test]
    fn objective_at_solution_beats_perturbations() {
        let s = DenseMatrix::from_rows(&[[1.0, 0.5, 0.2], [0.5, 1.2, 0.3], [0.2, 0.3, 0.9]]).unwrap();
        let prob = GlassoProblem::new(s, 0.1);
        let sol = glasso(&prob).unwrap();
        let f0 = glasso_objective(&prob, &sol.theta);
        for (i, j) in [(0, 1), (0, 2), (1, 2), (1, 1)] {
            for eps in [-1e-3, 1e-3] {
                let mut m = sol.theta.as_matrix().clone();
                m[(i, j)] += eps;
                m[(j, i)] = m[(i, j)];
                let t = SpdMatrix::new(m).unwrap();
                assert!(glasso_objective(&prob, &t) >= f0 - 1e-12);
            }
        }
    }
}
