use std::sync::Arc;

use crate::error::{GgmError, Result};
use crate::numkit::{DenseMatrix, SpdMatrix};
use crate::scalar::{soft_threshold, Real};
use crate::solvers::lasso::{lasso_cd, LassoProblem};

/// How the decorrelating matrix `M` is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MStrategy {
    /// Row-wise `min mᵀΣ̂m` subject to `‖Σ̂m − e_i‖_∞ ≤ μ`, by coordinate descent on the
    /// penalized form `½mᵀΣ̂m − m_i + μ‖m‖₁`.
    Constrained,
    /// `M = Σ̂⁻¹` (requires `p ≤ n`).
    ExactInverse,
    /// `M = I`.
    Identity,
}

/// Default `μ` is this multiple of `√(log p / n)`.
pub const DEFAULT_MU_FACTOR: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct DebiasConfig<T> {
    /// Multiplier in `λ = κ·σ̂·√(log p / n)`.
    pub kappa: T,
    pub scaled_lasso_iters: usize,
    /// Fixed Lasso penalty (in the `(1/2n)‖y − Xβ‖²` scaling); skips the scaled-Lasso search.
    pub lambda: Option<T>,
    /// Constraint level for [`MStrategy::Constrained`]; defaults to
    /// `DEFAULT_MU_FACTOR·√(log p / n)`.
    pub mu: Option<T>,
    pub m_strategy: MStrategy,
    pub lasso_tol: T,
    pub lasso_max_iter: usize,
    pub m_max_iter: usize,
}

impl<T: Real> Default for DebiasConfig<T> {
    fn default() -> Self {
        Self {
            kappa: T::one(),
            scaled_lasso_iters: 10,
            lambda: None,
            mu: None,
            m_strategy: MStrategy::Constrained,
            lasso_tol: T::lit(1e-10),
            lasso_max_iter: 10_000,
            m_max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DebiasResult<T> {
    pub beta_check: Vec<T>,
    pub std_err: Vec<T>,
    pub p_values: Vec<T>,
    pub m_matrix: Arc<DenseMatrix<T>>,
    pub beta_lasso: Vec<T>,
    pub sigma_hat: T,
    pub lambda: T,
    /// Rows of `M` that fell back to `e_i/Σ̂_ii`.
    pub m_fallback_rows: Vec<usize>,
}

/// Everything in the de-biasing step that depends on the design only, shared across responses.
#[derive(Debug, Clone)]
pub struct DebiasedDesign<'a, T> {
    x: &'a DenseMatrix<T>,
    cfg: DebiasConfig<T>,
    gram: DenseMatrix<T>,
    m: Arc<DenseMatrix<T>>,
    /// diag(M Σ̂ Mᵀ)
    m_var: Vec<T>,
    m_fallback_rows: Vec<usize>,
}

fn log_ratio<T: Real>(p: usize, n: usize) -> T {
    (T::from_usize(p).unwrap().ln() / T::from_usize(n).unwrap()).max(T::zero())
}

fn constrained_row<T: Real>(gram: &DenseMatrix<T>, i: usize, mu: T, max_iter: usize) -> Option<Vec<T>> {
    let p = gram.rows();
    let mut m = vec![T::zero(); p];
    m[i] = (T::one() - mu).max(T::zero()) / gram[(i, i)];
    // g = Σ̂m
    let mut g: Vec<T> = (0..p).map(|k| gram[(k, i)] * m[i]).collect();
    let tol = T::lit(1e-10).max(T::tol_floor());
    for _ in 0..max_iter {
        let mut delta_max = T::zero();
        for k in 0..p {
            let gkk = gram[(k, k)];
            let old = m[k];
            let target = if k == i { T::one() } else { T::zero() };
            let z = target - (g[k] - gkk * old);
            let new = soft_threshold(z, mu) / gkk;
            let d = new - old;
            if d != T::zero() {
                m[k] = new;
                for (a, ga) in g.iter_mut().enumerate() {
                    *ga += gram[(a, k)] * d;
                }
                delta_max = delta_max.max((d * gkk).abs());
            }
        }
        if !m.iter().all(|v| v.is_finite()) {
            return None;
        }
        if delta_max <= tol {
            return Some(m);
        }
    }
    None
}

impl<'a, T: Real> DebiasedDesign<'a, T> {
    pub fn new(x: &'a DenseMatrix<T>, cfg: DebiasConfig<T>) -> Result<Self> {
        let (n, p) = x.shape();
        if n < 2 || p == 0 {
            return Err(GgmError::BadConfig(format!("de-biased Lasso needs n >= 2 and p >= 1, got n={n}, p={p}")));
        }
        let nn = T::from_usize(n).unwrap();
        let gram = x.t_matmul(x)?.scale(T::one() / nn).symmetrized();
        let scale = gram.diag().into_iter().fold(T::zero(), |m, v| m.max(v));
        for k in 0..p {
            if !(gram[(k, k)] > scale * T::epsilon() * T::lit(16.0)) {
                return Err(GgmError::ZeroVarianceColumn(k));
            }
        }
        let mut fallback = Vec::new();
        let mut constrained = || {
            let mu = cfg.mu.unwrap_or_else(|| T::lit(DEFAULT_MU_FACTOR) * log_ratio::<T>(p, n).sqrt());
            let mut m = DenseMatrix::zeros(p, p);
            for i in 0..p {
                let row = constrained_row(&gram, i, mu, cfg.m_max_iter).unwrap_or_else(|| {
                    fallback.push(i);
                    let mut e = vec![T::zero(); p];
                    e[i] = T::one() / gram[(i, i)];
                    e
                });
                m.row_mut(i).copy_from_slice(&row);
            }
            m
        };
        let m = match cfg.m_strategy {
            MStrategy::Identity => DenseMatrix::identity(p),
            MStrategy::ExactInverse => SpdMatrix::new(gram.clone())
                .map_err(|_| GgmError::RankDeficient)?
                .inverse()
                .into_matrix(),
            MStrategy::Constrained => constrained(),
        };
        let ms = m.matmul(&gram)?;
        let m_var = (0..p)
            .map(|i| crate::numkit::dot(ms.row(i), m.row(i)).max(T::zero()))
            .collect();
        Ok(Self {
            x,
            cfg,
            gram,
            m: Arc::new(m),
            m_var,
            m_fallback_rows: fallback,
        })
    }

    pub fn m_matrix(&self) -> &DenseMatrix<T> {
        &self.m
    }

    pub fn m_fallback_rows(&self) -> &[usize] {
        &self.m_fallback_rows
    }

    pub fn gram(&self) -> &DenseMatrix<T> {
        &self.gram
    }

    fn lasso(&self, xty: &[T], lambda: T, init: Option<Vec<T>>) -> Result<Vec<T>> {
        // (1/2n)‖y − Xβ‖² + λ‖β‖₁  ⇔  quad weight ½ in Gram form
        let mut prob = LassoProblem::new(&self.gram, xty.to_vec(), T::lit(0.5), lambda);
        if let Some(b) = init {
            prob = prob.with_init(b);
        }
        Ok(lasso_cd(&prob, self.cfg.lasso_tol, self.cfg.lasso_max_iter)?.beta)
    }

    fn residual_scale(&self, y: &[T], beta: &[T]) -> Result<T> {
        let fit = self.x.matvec(beta)?;
        let n = T::from_usize(y.len()).unwrap();
        Ok((y.iter().zip(&fit).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n).sqrt())
    }

    /// De-biased Lasso fit of one response.
    pub fn fit(&self, y: &[T]) -> Result<DebiasResult<T>> {
        let (n, p) = self.x.shape();
        if y.len() != n {
            return Err(GgmError::ShapeMismatch("response length differs from design rows".into()));
        }
        let nn = T::from_usize(n).unwrap();
        let xty: Vec<T> = self.x.t_matvec(y)?.into_iter().map(|v| v / nn).collect();

        let (beta, sigma_hat, lambda) = match self.cfg.lambda {
            Some(lam) => {
                let b = self.lasso(&xty, lam, None)?;
                let s = self.residual_scale(y, &b)?;
                (b, s, lam)
            }
            None => {
                let rate = log_ratio::<T>(p, n).sqrt();
                let mut sigma = (y.iter().map(|&v| v * v).sum::<T>() / nn).sqrt();
                let mut beta = vec![T::zero(); p];
                let mut lam = self.cfg.kappa * sigma * rate;
                for _ in 0..self.cfg.scaled_lasso_iters.max(1) {
                    lam = self.cfg.kappa * sigma * rate;
                    beta = self.lasso(&xty, lam, Some(beta))?;
                    let next = self.residual_scale(y, &beta)?;
                    let done = (next - sigma).abs() <= T::lit(1e-8) * sigma.max(T::min_positive_value());
                    sigma = next;
                    if done {
                        break;
                    }
                }
                (beta, sigma, lam)
            }
        };

        // β̌ = β̂ + M Xᵀ(y − Xβ̂)/n, with Xᵀ(y − Xβ̂)/n = c − Σ̂β̂
        let sb = self.gram.matvec(&beta)?;
        let score: Vec<T> = xty.iter().zip(&sb).map(|(&c, &g)| c - g).collect();
        let correction = self.m.matvec(&score)?;
        let beta_check: Vec<T> = beta.iter().zip(&correction).map(|(&b, &c)| b + c).collect();
        let std_err: Vec<T> = self.m_var.iter().map(|&v| sigma_hat * (v / nn).sqrt()).collect();
        let p_values = beta_check
            .iter()
            .zip(&std_err)
            .map(|(&b, &se)| two_sided_p(b, se))
            .collect();
        Ok(DebiasResult {
            beta_check,
            std_err,
            p_values,
            m_matrix: Arc::clone(&self.m),
            beta_lasso: beta,
            sigma_hat,
            lambda,
            m_fallback_rows: self.m_fallback_rows.clone(),
        })
    }
}

/// Two-sided normal tail probability of `estimate / std_err`.
pub fn two_sided_p<T: Real>(estimate: T, std_err: T) -> T {
    if !(std_err > T::zero()) {
        return if estimate == T::zero() { T::one() } else { T::zero() };
    }
    let z = (estimate / std_err).abs().to_f64_lossy();
    let p = statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
    T::lit(p.clamp(0.0, 1.0))
}

/// De-biased Lasso regression of `y` on `x` with normal-approximation p-values.
pub fn debiased_lasso<T: Real>(x: &DenseMatrix<T>, y: &[T], cfg: &DebiasConfig<T>) -> Result<DebiasResult<T>> {
    DebiasedDesign::new(x, cfg.clone())?.fit(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{center_columns, mvn_sample, RngSeed};

    #[test]
    fn orthonormal_design_with_identity_m_returns_ols() {
        // columns orthogonal with XᵀX/n = I
        let x = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]).unwrap();
        let y = [0.7, -0.2, 1.1, 0.4];
        let cfg = DebiasConfig {
            m_strategy: MStrategy::Identity,
            ..Default::default()
        };
        let r = debiased_lasso(&x, &y, &cfg).unwrap();
        let ols: Vec<f64> = x.t_matvec(&y).unwrap().iter().map(|v| v / 4.0).collect();
        for (a, b) in r.beta_check.iter().zip(&ols) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reduces_to_ols_with_exact_inverse_and_no_penalty() {
        let x = center_columns(&mvn_sample(&SpdMatrix::<f64>::identity(4), 40, RngSeed(3)));
        let y: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64) / 5.0 - 1.0).collect();
        let cfg = DebiasConfig {
            lambda: Some(0.0),
            m_strategy: MStrategy::ExactInverse,
            lasso_tol: 1e-13,
            ..Default::default()
        };
        let r = debiased_lasso(&x, &y, &cfg).unwrap();
        let ols = crate::solvers::ols_restricted(&x, &y, &[0, 1, 2, 3]).unwrap();
        for (a, b) in r.beta_check.iter().zip(&ols) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_variance_column_is_rejected() {
        let x = DenseMatrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.5, 0.0]]).unwrap();
        let r = debiased_lasso(&x, &[1.0, 0.0, -1.0], &DebiasConfig::default());
        assert!(matches!(r, Err(GgmError::ZeroVarianceColumn(1))));
    }

    #[test]
    fn constrained_rows_satisfy_the_box_constraint() {
        let x = center_columns(&mvn_sample(&SpdMatrix::<f64>::identity(6), 50, RngSeed(9)));
        let design = DebiasedDesign::new(&x, DebiasConfig::default()).unwrap();
        let mu = DEFAULT_MU_FACTOR * (6f64.ln() / 50.0).sqrt();
        let prod = design.m_matrix().matmul(design.gram()).unwrap();
        for i in 0..6 {
            for k in 0..6 {
                let target = if i == k { 1.0 } else { 0.0 };
                assert!((prod[(i, k)] - target).abs() <= mu + 1e-8);
            }
        }
        assert!(design.m_fallback_rows().is_empty());
    }

    #[test]
    fn p_values_are_probabilities() {
        assert_eq!(two_sided_p(0.0, 1.0), 1.0);
        assert!((two_sided_p(1.959963984540054, 1.0) - 0.05f64).abs() < 1e-9);
        assert_eq!(two_sided_p(1.0, 0.0), 0.0);
        assert!(two_sided_p(100.0f64, 1.0) >= 0.0);
    }
}
