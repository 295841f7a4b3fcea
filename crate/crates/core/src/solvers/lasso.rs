use crate::error::{GgmError, Result};
use crate::numkit::{dot, Cholesky, DenseMatrix};
use crate::scalar::{soft_threshold, Real};

/// Weighted Lasso in Gram form:
/// minimize `σ·(βᵀ G β − 2 βᵀ c) + λ‖β‖₁` over β, optionally restricted to a support.
///
/// With `G = XᵀX/n` and `c = Xᵀy/n` this is `(σ/n)‖y − Xβ‖² + λ‖β‖₁` up to a constant.
#[derive(Debug, Clone)]
pub struct LassoProblem<'a, T> {
    pub gram: &'a DenseMatrix<T>,
    pub xty: Vec<T>,
    pub quad_weight: T,
    pub lambda: T,
    /// Coordinates allowed to be nonzero; `None` means all of them.
    pub support: Option<&'a [usize]>,
    pub init: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct LassoSolution<T> {
    pub beta: Vec<T>,
    pub converged: bool,
    pub sweeps: usize,
    pub kkt_residual: T,
    /// Objective after each full sweep, starting with the initial point.
    pub objective_trace: Vec<T>,
}

impl<'a, T: Real> LassoProblem<'a, T> {
    pub fn new(gram: &'a DenseMatrix<T>, xty: Vec<T>, quad_weight: T, lambda: T) -> Self {
        Self {
            gram,
            xty,
            quad_weight,
            lambda,
            support: None,
            init: None,
        }
    }

    pub fn with_support(mut self, support: &'a [usize]) -> Self {
        self.support = Some(support);
        self
    }

    pub fn with_init(mut self, init: Vec<T>) -> Self {
        self.init = Some(init);
        self
    }

    pub fn dim(&self) -> usize {
        self.gram.rows()
    }

    fn validate(&self) -> Result<()> {
        let p = self.dim();
        if !self.gram.is_square() || self.xty.len() != p {
            return Err(GgmError::ShapeMismatch(format!(
                "gram {:?} with xty of length {}",
                self.gram.shape(),
                self.xty.len()
            )));
        }
        if let Some(s) = self.support {
            if s.iter().any(|&k| k >= p) {
                return Err(GgmError::ShapeMismatch("support index out of range".into()));
            }
        }
        if let Some(init) = &self.init {
            if init.len() != p {
                return Err(GgmError::ShapeMismatch("init has wrong length".into()));
            }
        }
        if self.lambda < T::zero() {
            return Err(GgmError::BadConfig("lambda must be nonnegative".into()));
        }
        Ok(())
    }

    fn active(&self) -> Vec<usize> {
        match self.support {
            Some(s) => s.to_vec(),
            None => (0..self.dim()).collect(),
        }
    }

    /// `σ·(βᵀGβ − 2βᵀc) + λ‖β‖₁`.
    pub fn objective(&self, beta: &[T]) -> T {
        let gb = self.gram.matvec(beta).expect("shape checked");
        let quad = dot(beta, &gb) - T::lit(2.0) * dot(beta, &self.xty);
        self.quad_weight * quad + self.lambda * beta.iter().map(|b| b.abs()).sum::<T>()
    }
}

fn kkt_from_gradient<T: Real>(sigma: T, lambda: T, grad: &[T], beta: &[T], active: &[usize]) -> T {
    let two_sigma = T::lit(2.0) * sigma;
    active.iter().fold(T::zero(), |worst, &i| {
        let g = two_sigma * grad[i];
        let v = if beta[i] != T::zero() {
            (g + lambda * beta[i].signum()).abs()
        } else {
            (g.abs() - lambda).max(T::zero())
        };
        worst.max(v)
    })
}

/// Largest subgradient-condition violation of `beta`, over the coordinates in the support.
pub fn lasso_kkt_residual<T: Real>(problem: &LassoProblem<'_, T>, beta: &[T]) -> T {
    let gb = problem.gram.matvec(beta).expect("shape checked");
    let grad: Vec<T> = gb.iter().zip(&problem.xty).map(|(&a, &c)| a - c).collect();
    kkt_from_gradient(problem.quad_weight, problem.lambda, &grad, beta, &problem.active())
}

/// Cyclic coordinate descent in index order. Stops once the KKT residual is at most `tol`.
///
/// Running out of sweeps is not an error: the last iterate comes back with `converged = false`.
pub fn lasso_cd<T: Real>(problem: &LassoProblem<'_, T>, tol: T, max_iter: usize) -> Result<LassoSolution<T>> {
    problem.validate()?;
    let p = problem.dim();
    let active = problem.active();
    let gram = problem.gram;
    let sigma = problem.quad_weight;
    let lambda = problem.lambda;

    let mut beta = vec![T::zero(); p];
    if let Some(init) = &problem.init {
        for &k in &active {
            beta[k] = init[k];
        }
    }
    if sigma <= T::zero() {
        // no smooth part: the penalty alone is minimized at zero
        return Ok(LassoSolution {
            beta: vec![T::zero(); p],
            converged: true,
            sweeps: 0,
            kkt_residual: T::zero(),
            objective_trace: vec![T::zero()],
        });
    }

    // grad = Gβ − c
    let mut grad: Vec<T> = gram
        .matvec(&beta)?
        .into_iter()
        .zip(&problem.xty)
        .map(|(a, &c)| a - c)
        .collect();
    let thresh = lambda / (T::lit(2.0) * sigma);
    let objective = |beta: &[T], grad: &[T]| {
        let mut q = T::zero();
        let mut l1 = T::zero();
        for &k in &active {
            q += beta[k] * (grad[k] - problem.xty[k]);
            l1 += beta[k].abs();
        }
        sigma * q + lambda * l1
    };

    let mut trace = vec![objective(&beta, &grad)];
    let mut kkt = kkt_from_gradient(sigma, lambda, &grad, &beta, &active);
    let mut sweeps = 0;
    while kkt > tol && sweeps < max_iter {
        for &i in &active {
            let gii = gram[(i, i)];
            let old = beta[i];
            let new = if gii > T::zero() {
                soft_threshold(gii * old - grad[i], thresh) / gii
            } else {
                T::zero()
            };
            let delta = new - old;
            if delta != T::zero() {
                beta[i] = new;
                let row = gram.row(i);
                for &k in &active {
                    grad[k] += row[k] * delta;
                }
            }
        }
        sweeps += 1;
        trace.push(objective(&beta, &grad));
        kkt = kkt_from_gradient(sigma, lambda, &grad, &beta, &active);
    }
    Ok(LassoSolution {
        beta,
        converged: kkt <= tol,
        sweeps,
        kkt_residual: kkt,
        objective_trace: trace,
    })
}

/// Least squares restricted to `support`, from the Gram form `G = XᵀX/n`, `c = Xᵀy/n`.
pub fn ols_from_gram<T: Real>(gram: &DenseMatrix<T>, xty: &[T], support: &[usize]) -> Result<Vec<T>> {
    let p = gram.rows();
    let mut beta = vec![T::zero(); p];
    if support.is_empty() {
        return Ok(beta);
    }
    let sub = gram.select_rows(support).select_columns(support);
    let chol = Cholesky::new(&sub).map_err(|_| GgmError::RankDeficient)?;
    // guard against numerically singular but factorizable blocks
    let d = chol.factor().diag();
    let dmax = d.iter().fold(T::zero(), |m, &v| m.max(v));
    let dmin = d.iter().fold(T::infinity(), |m, &v| m.min(v));
    if dmin <= dmax * T::epsilon().sqrt() * T::lit(10.0) {
        return Err(GgmError::RankDeficient);
    }
    let rhs: Vec<T> = support.iter().map(|&k| xty[k]).collect();
    for (&k, v) in support.iter().zip(chol.solve(&rhs)) {
        beta[k] = v;
    }
    Ok(beta)
}

/// Ordinary least squares of `y` on the columns of `x` listed in `support`; zero elsewhere.
pub fn ols_restricted<T: Real>(x: &DenseMatrix<T>, y: &[T], support: &[usize]) -> Result<Vec<T>> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(GgmError::ShapeMismatch("y length differs from rows of x".into()));
    }
    if support.iter().any(|&k| k >= p) {
        return Err(GgmError::ShapeMismatch("support index out of range".into()));
    }
    if support.len() > n {
        return Err(GgmError::RankDeficient);
    }
    let xs = x.select_columns(support);
    let nn = T::from_usize(n.max(1)).unwrap();
    let gram_s = xs.t_matmul(&xs)?.scale(T::one() / nn);
    let c_s: Vec<T> = xs.t_matvec(y)?.into_iter().map(|v| v / nn).collect();
    let idx: Vec<usize> = (0..support.len()).collect();
    let sub = ols_from_gram(&gram_s, &c_s, &idx)?;
    let mut beta = vec![T::zero(); p];
    for (&k, v) in support.iter().zip(sub) {
        beta[k] = v;
    }
    Ok(beta)
}

/// [`ols_from_gram`], falling back to a `1e-8` ridge on rank deficiency. The flag reports the fallback.
pub fn ols_or_ridge_from_gram<T: Real>(gram: &DenseMatrix<T>, xty: &[T], support: &[usize]) -> Result<(Vec<T>, bool)> {
    match ols_from_gram(gram, xty, support) {
        Ok(b) => Ok((b, false)),
        Err(GgmError::RankDeficient) => {
            let mut g = gram.clone();
            let scale = support.iter().map(|&k| gram[(k, k)]).fold(T::one(), |m, v| m.max(v));
            for &k in support {
                g[(k, k)] += T::lit(1e-8) * scale;
            }
            let sub = g.select_rows(support).select_columns(support);
            let chol = Cholesky::new(&sub)?;
            let rhs: Vec<T> = support.iter().map(|&k| xty[k]).collect();
            let mut beta = vec![T::zero(); gram.rows()];
            for (&k, v) in support.iter().zip(chol.solve(&rhs)) {
                beta[k] = v;
            }
            Ok((beta, true))
        }
        Err(e) => Err(e),
    }
}
