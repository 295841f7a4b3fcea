//! Two-layer estimation: regression matrix `B` (p₁ × p₂) of the responses on the predictors and
//! the precision `Θ` (p₂ × p₂) of the response errors.
//!
//! Pipeline: screening → Lasso/glasso initialization → alternating block descent on
//! `tr(SΘ) − log det Θ + λΣ‖B_j‖₁ + ρ‖Θ‖₁,off` → least-squares refit on the converged support
//! → stability selection of error edges → weighted graphical Lasso.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GgmError, Result};
use crate::numkit::{sample_covariance, DenseMatrix, RngSeed, SpdMatrix};
use crate::scalar::Real;
use crate::screening::{screen_with, SupportSet};
use crate::solvers::{
    glasso, glasso_kkt_residual, lasso_cd, lasso_kkt_residual, ols_or_ridge_from_gram, DebiasConfig, GlassoProblem,
    LassoProblem,
};
use crate::tuning::{grid_search, TuningGrid, TuningOutcome};

/// How the `B` block is refreshed inside one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UpdateMode {
    /// Cycle over columns until `B` stops moving.
    #[default]
    #[serde(rename = "exact2block")]
    Exact2Block,
    /// One Gauss-Seidel pass over the columns per outer iteration (after an exact first iteration).
    #[serde(rename = "p2plus1")]
    P2Plus1,
    /// One Jacobi pass, columns solved concurrently from the previous iterate (after an exact
    /// first iteration).
    #[serde(rename = "parallel", alias = "parallel_columns")]
    ParallelColumns,
}

impl FromStr for UpdateMode {
    type Err = GgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact2block" | "exact_2block" | "exact" => Ok(Self::Exact2Block),
            "p2plus1" | "p2_plus1" => Ok(Self::P2Plus1),
            "parallel" | "parallel_columns" | "parallelcolumns" => Ok(Self::ParallelColumns),
            other => Err(GgmError::BadConfig(format!("unknown update mode '{other}'"))),
        }
    }
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact2Block => "exact2block",
            Self::P2Plus1 => "p2plus1",
            Self::ParallelColumns => "parallel",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct PenaltyConfig<T> {
    /// Penalty of the initial Lasso; `None` means `0.1·√(log p₁ / n)`.
    #[serde(default)]
    pub lambda0: Option<T>,
    pub lambda: T,
    pub rho: T,
    /// Penalty of the final weighted graphical Lasso; `None` means `√(log p₂ / n)`.
    #[serde(default)]
    pub rho_tilde: Option<T>,
    /// Stop once the absolute objective change falls below this (and the column KKT test passes).
    #[serde(default = "defaults::outer_tol")]
    pub outer_tol: T,
    /// Largest column Lasso KKT residual, against the current `Θ`, accepted at termination;
    /// `None` means `10·outer_tol`.
    #[serde(default)]
    pub kkt_tol: Option<T>,
    /// Column cycling stops once no entry of `B` moves by more than this.
    #[serde(default = "defaults::inner_tol")]
    pub inner_tol: T,
    #[serde(default = "defaults::max_outer")]
    pub max_outer: usize,
    #[serde(default = "defaults::max_inner")]
    pub max_inner: usize,
    /// KKT tolerance of each column Lasso.
    #[serde(default = "defaults::lasso_tol")]
    pub lasso_tol: T,
    #[serde(default = "defaults::lasso_max_iter")]
    pub lasso_max_iter: usize,
    #[serde(default)]
    pub mode: UpdateMode,
}

mod defaults {
    use crate::scalar::Real;

    pub fn outer_tol<T: Real>() -> T {
        T::lit(1e-6)
    }
    pub fn inner_tol<T: Real>() -> T {
        T::lit(1e-7)
    }
    pub fn max_outer() -> usize {
        50
    }
    pub fn max_inner() -> usize {
        100
    }
    pub fn lasso_tol<T: Real>() -> T {
        T::lit(1e-9)
    }
    pub fn lasso_max_iter() -> usize {
        10_000
    }
    pub fn n_boot() -> usize {
        50
    }
    pub fn subsample_frac<T: Real>() -> T {
        T::lit(0.5)
    }
    pub fn alpha<T: Real>() -> T {
        T::lit(0.1)
    }
}

impl<T: Real> PenaltyConfig<T> {
    pub fn new(lambda: T, rho: T) -> Self {
        Self {
            lambda0: None,
            lambda,
            rho,
            rho_tilde: None,
            outer_tol: defaults::outer_tol(),
            kkt_tol: None,
            inner_tol: defaults::inner_tol(),
            max_outer: defaults::max_outer(),
            max_inner: defaults::max_inner(),
            lasso_tol: defaults::lasso_tol(),
            lasso_max_iter: defaults::lasso_max_iter(),
            mode: UpdateMode::default(),
        }
    }

    pub fn with_mode(mut self, mode: UpdateMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn kkt_tol(&self) -> T {
        self.kkt_tol.unwrap_or(self.outer_tol * T::lit(10.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kkt_tol.is_some_and(|t| !(t > T::zero())) {
            return Err(GgmError::BadConfig("kkt_tol must be positive".into()));
        }
        let pens = [Some(self.lambda), Some(self.rho), self.lambda0, self.rho_tilde];
        if pens.iter().flatten().any(|&v| !(v >= T::zero())) {
            return Err(GgmError::BadConfig("penalties must be nonnegative".into()));
        }
        if !(self.outer_tol > T::zero() && self.inner_tol > T::zero() && self.lasso_tol > T::zero()) {
            return Err(GgmError::BadConfig("tolerances must be positive".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(GgmError::BadConfig("iteration caps must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda0_for(&self, p1: usize, n: usize) -> T {
        self.lambda0.unwrap_or_else(|| T::lit(0.1) * log_ratio(p1, n))
    }

    /// Defaults to `√(log p₂ / n)`, the top of the default stability path.
    pub fn rho_tilde_for(&self, p2: usize, n: usize) -> T {
        self.rho_tilde.unwrap_or_else(|| log_ratio(p2.max(2), n))
    }
}

/// `√(log p / n)`, zero when `p ≤ 1`.
pub(crate) fn log_ratio<T: Real>(p: usize, n: usize) -> T {
    if p <= 1 || n == 0 {
        return T::zero();
    }
    T::lit(((p as f64).ln() / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct StabilityConfig<T> {
    #[serde(default = "defaults::n_boot")]
    pub n_boot: usize,
    #[serde(default = "defaults::subsample_frac")]
    pub subsample_frac: T,
    /// `None` means 10 log-spaced values over `[0.01, 1]·√(log p₂ / n)`.
    #[serde(default)]
    pub rho_path: Option<Vec<T>>,
    #[serde(default)]
    pub seed: RngSeed,
}

impl<T: Real> Default for StabilityConfig<T> {
    fn default() -> Self {
        Self {
            n_boot: defaults::n_boot(),
            subsample_frac: defaults::subsample_frac(),
            rho_path: None,
            seed: RngSeed::default(),
        }
    }
}

/// Log-spaced path over `[0.01, 1]·√(log p₂ / n)`.
pub fn default_rho_path<T: Real>(p2: usize, n: usize, len: usize) -> Vec<T> {
    let top = log_ratio::<T>(p2.max(2), n);
    (0..len)
        .map(|k| {
            let t = if len > 1 { k as f64 / (len - 1) as f64 } else { 1.0 };
            top * T::lit(10f64.powf(-2.0 + 2.0 * t))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct TwoLayerConfig<T> {
    pub penalty: PenaltyConfig<T>,
    #[serde(default = "defaults::alpha")]
    pub screening_alpha: T,
    #[serde(default)]
    pub stability: StabilityConfig<T>,
}

impl<T: Real> TwoLayerConfig<T> {
    pub fn new(penalty: PenaltyConfig<T>) -> Self {
        Self {
            penalty,
            screening_alpha: defaults::alpha(),
            stability: StabilityConfig::default(),
        }
    }
}

/// Cross moments `XᵀX/n`, `XᵀY/n`, `YᵀY/n` shared by every stage of a fit.
#[derive(Debug, Clone)]
pub struct Moments<'a, T> {
    pub x: &'a DenseMatrix<T>,
    pub y: &'a DenseMatrix<T>,
    pub gram: DenseMatrix<T>,
    pub xty: DenseMatrix<T>,
}

impl<'a, T: Real> Moments<'a, T> {
    pub fn new(x: &'a DenseMatrix<T>, y: &'a DenseMatrix<T>) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(GgmError::ShapeMismatch(format!("x has {} rows, y has {}", x.rows(), y.rows())));
        }
        if x.rows() == 0 {
            return Err(GgmError::EmptyData);
        }
        let inv_n = T::one() / T::from_usize(x.rows()).unwrap();
        Ok(Self {
            x,
            y,
            gram: x.t_matmul(x)?.scale(inv_n).symmetrized(),
            xty: x.t_matmul(y)?.scale(inv_n),
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn p1(&self) -> usize {
        self.x.cols()
    }

    pub fn p2(&self) -> usize {
        self.y.cols()
    }

    pub fn residuals(&self, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.y.sub(&self.x.matmul(b)?)
    }

    /// `(Y − XB)ᵀ(Y − XB)/n`.
    pub fn residual_covariance(&self, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        sample_covariance(&self.residuals(b)?)
    }

    pub fn objective(&self, b: &DenseMatrix<T>, theta: &SpdMatrix<T>, lambda: T, rho: T) -> Result<T> {
        let s = self.residual_covariance(b)?;
        Ok(objective_from_cov(&s, b, theta, lambda, rho))
    }

    fn check_b(&self, b: &DenseMatrix<T>) -> Result<()> {
        if b.shape() != (self.p1(), self.p2()) {
            return Err(GgmError::ShapeMismatch(format!(
                "B is {:?}, expected {:?}",
                b.shape(),
                (self.p1(), self.p2())
            )));
        }
        Ok(())
    }

    /// `XᵀY/n − (XᵀX/n)·B`.
    fn cross_residual(&self, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.xty.sub(&self.gram.matmul(b)?)
    }
}

pub(crate) fn trace_product<T: Real>(s: &DenseMatrix<T>, theta: &DenseMatrix<T>) -> T {
    s.as_slice().iter().zip(theta.transpose().as_slice()).map(|(&a, &b)| a * b).sum()
}

fn l1_off<T: Real>(theta: &DenseMatrix<T>) -> T {
    let p = theta.rows();
    let mut s = T::zero();
    for i in 0..p {
        for j in 0..p {
            if i != j {
                s += theta[(i, j)].abs();
            }
        }
    }
    s
}

fn objective_from_cov<T: Real>(s: &DenseMatrix<T>, b: &DenseMatrix<T>, theta: &SpdMatrix<T>, lambda: T, rho: T) -> T {
    let l1_b = b.as_slice().iter().map(|v| v.abs()).sum::<T>();
    trace_product(s, theta.as_matrix()) - theta.log_det() + lambda * l1_b + rho * l1_off(theta.as_matrix())
}

/// `tr(SΘ) − log det Θ + λ‖B‖₁ + ρ‖Θ‖₁,off` with `S` the residual covariance of `Y − XB`.
pub fn objective<T: Real>(
    b: &DenseMatrix<T>,
    theta: &DenseMatrix<T>,
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    lambda: T,
    rho: T,
) -> Result<T> {
    let theta = SpdMatrix::new(theta.clone())?;
    let m = Moments::new(x, y)?;
    m.check_b(b)?;
    m.objective(b, &theta, lambda, rho)
}

fn check_supports<T: Real>(m: &Moments<'_, T>, supports: &SupportSet<T>) -> Result<()> {
    if supports.per_response.len() != m.p2() || supports.per_response.iter().flatten().any(|&k| k >= m.p1()) {
        return Err(GgmError::ShapeMismatch("support set does not match the data".into()));
    }
    Ok(())
}

/// Graphical Lasso of a residual covariance, ridge-stabilized when `rho = 0` and S is singular.
fn fit_theta<T: Real>(s: DenseMatrix<T>, rho: T, warm: Option<&SpdMatrix<T>>) -> Result<(SpdMatrix<T>, bool)> {
    let mut problem = GlassoProblem::new(s, rho).with_ridge_fallback();
    problem.warm_start = warm.cloned();
    let sol = glasso(&problem)?;
    if !sol.converged {
        warn!("graphical lasso stopped after {} sweeps without converging", sol.iterations);
    }
    Ok((sol.theta, sol.ridge > T::zero()))
}

#[derive(Debug, Clone)]
pub struct Initialization<T> {
    pub b0: DenseMatrix<T>,
    pub theta0: SpdMatrix<T>,
    pub ridge_used: bool,
}

/// Column-wise Lasso `(1/n)‖Y_j − Xβ‖² + λ₀‖β‖₁` restricted to the screened support, then a
/// graphical Lasso of the residual covariance at `rho`.
pub fn initialize<T: Real>(
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    supports: &SupportSet<T>,
    lambda0: T,
    rho: T,
) -> Result<Initialization<T>> {
    let m = Moments::new(x, y)?;
    initialize_with(&m, supports, lambda0, rho, &PenaltyConfig::new(T::zero(), rho))
}

pub(crate) fn initialize_with<T: Real>(
    m: &Moments<'_, T>,
    supports: &SupportSet<T>,
    lambda0: T,
    rho: T,
    cfg: &PenaltyConfig<T>,
) -> Result<Initialization<T>> {
    check_supports(m, supports)?;
    let columns = (0..m.p2())
        .into_par_iter()
        .map(|j| {
            let support = &supports.per_response[j];
            if support.is_empty() {
                return Ok(vec![T::zero(); m.p1()]);
            }
            let problem = LassoProblem::new(&m.gram, m.xty.column(j), T::one(), lambda0).with_support(support);
            Ok(lasso_cd(&problem, cfg.lasso_tol, cfg.lasso_max_iter)?.beta)
        })
        .collect::<Result<Vec<_>>>()?;
    let b0 = DenseMatrix::from_columns(m.p1(), &columns)?;
    let (theta0, ridge_used) = fit_theta(m.residual_covariance(&b0)?, rho, None)?;
    Ok(Initialization {
        b0,
        theta0,
        ridge_used,
    })
}

#[derive(Debug, Clone)]
pub struct BUpdate<T> {
    pub b: DenseMatrix<T>,
    /// Number of single-column Lasso solves.
    pub column_updates: usize,
    /// Passes over the columns.
    pub passes: usize,
    /// Exact2Block: `B` settled within `max_inner` passes; always true for single-pass modes.
    pub converged: bool,
}

/// Lasso target of column `j`: `XᵀY_j/n + (1/θ_jj)·Σ_{i≠j} θ_ij (XᵀY_i/n − (XᵀX/n)B_i)`.
fn column_target<T: Real>(m: &Moments<'_, T>, r: &DenseMatrix<T>, theta: &DenseMatrix<T>, j: usize) -> Vec<T> {
    let p1 = m.p1();
    let tjj = theta[(j, j)];
    let mut c: Vec<T> = (0..p1).map(|k| m.xty[(k, j)]).collect();
    for i in (0..m.p2()).filter(|&i| i != j) {
        let w = theta[(i, j)] / tjj;
        if w != T::zero() {
            for (k, ck) in c.iter_mut().enumerate() {
                *ck += w * r[(k, i)];
            }
        }
    }
    c
}

fn solve_column<T: Real>(
    m: &Moments<'_, T>,
    r: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    theta: &DenseMatrix<T>,
    support: &[usize],
    lambda: T,
    cfg: &PenaltyConfig<T>,
    j: usize,
) -> Result<Vec<T>> {
    if support.is_empty() {
        return Ok(vec![T::zero(); m.p1()]);
    }
    let c = column_target(m, r, theta, j);
    let problem = LassoProblem::new(&m.gram, c, theta[(j, j)], lambda)
        .with_support(support)
        .with_init(b.column(j));
    let sol = lasso_cd(&problem, cfg.lasso_tol, cfg.lasso_max_iter)?;
    if !sol.converged {
        debug!("column {j} lasso stopped at KKT residual {:?}", sol.kkt_residual);
    }
    Ok(sol.beta)
}

/// Writes column `j` of `B` and refreshes the matching column of the cross residual.
fn store_column<T: Real>(m: &Moments<'_, T>, r: &mut DenseMatrix<T>, b: &mut DenseMatrix<T>, j: usize, col: &[T]) -> T {
    let p1 = m.p1();
    let mut change = T::zero();
    for k in 0..p1 {
        change = change.max((col[k] - b[(k, j)]).abs());
    }
    b.set_column(j, col);
    for k in 0..p1 {
        let gk = m.gram.row(k);
        let mut acc = m.xty[(k, j)];
        for (l, &v) in col.iter().enumerate() {
            if v != T::zero() {
                acc -= gk[l] * v;
            }
        }
        r[(k, j)] = acc;
    }
    change
}

/// Refreshes `B` for a fixed `Θ` according to `mode`.
pub fn update_b<T: Real>(
    m: &Moments<'_, T>,
    b_prev: &DenseMatrix<T>,
    theta: &SpdMatrix<T>,
    supports: &SupportSet<T>,
    lambda: T,
    mode: UpdateMode,
    cfg: &PenaltyConfig<T>,
) -> Result<BUpdate<T>> {
    m.check_b(b_prev)?;
    check_supports(m, supports)?;
    if theta.dim() != m.p2() {
        return Err(GgmError::ShapeMismatch("theta does not match the responses".into()));
    }
    let th = theta.as_matrix();
    let p2 = m.p2();
    let mut b = b_prev.clone();
    let mut r = m.cross_residual(&b)?;
    match mode {
        UpdateMode::Exact2Block | UpdateMode::P2Plus1 => {
            let max_passes = if mode == UpdateMode::Exact2Block { cfg.max_inner } else { 1 };
            let mut passes = 0;
            let mut converged = mode == UpdateMode::P2Plus1;
            while passes < max_passes {
                let mut change = T::zero();
                for j in 0..p2 {
                    let col = solve_column(m, &r, &b, th, &supports.per_response[j], lambda, cfg, j)?;
                    change = change.max(store_column(m, &mut r, &mut b, j, &col));
                }
                passes += 1;
                if mode == UpdateMode::Exact2Block && change < cfg.inner_tol {
                    converged = true;
                    break;
                }
            }
            Ok(BUpdate {
                b,
                column_updates: passes * p2,
                passes,
                converged,
            })
        }
        UpdateMode::ParallelColumns => {
            let cols = (0..p2)
                .into_par_iter()
                .map(|j| solve_column(m, &r, b_prev, th, &supports.per_response[j], lambda, cfg, j))
                .collect::<Result<Vec<_>>>()?;
            for (j, col) in cols.iter().enumerate() {
                store_column(m, &mut r, &mut b, j, col);
            }
            Ok(BUpdate {
                b,
                column_updates: p2,
                passes: 1,
                converged: true,
            })
        }
    }
}

/// Result of the alternating search, before refitting.
#[derive(Debug, Clone)]
pub struct AlternateOutcome<T> {
    pub b: DenseMatrix<T>,
    pub theta: SpdMatrix<T>,
    /// Objective after initialization followed by one value per outer iteration.
    pub objective_trace: Vec<T>,
    /// `(‖B‖₀, ‖Θ‖₀)` aligned with `objective_trace`; `‖Θ‖₀` counts the diagonal.
    pub card_trace: Vec<(usize, usize)>,
    pub converged: bool,
    pub iterations: usize,
    pub column_updates: usize,
    pub ridge_used: bool,
}

/// Alternating block coordinate descent from the Lasso/glasso initialization until the
/// absolute objective change drops below `outer_tol` and every column Lasso KKT residual is at
/// most `kkt_tol`.
pub fn alternate<T: Real>(
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    supports: &SupportSet<T>,
    cfg: &PenaltyConfig<T>,
) -> Result<AlternateOutcome<T>> {
    let m = Moments::new(x, y)?;
    alternate_with(&m, supports, cfg)
}

pub(crate) fn alternate_with<T: Real>(
    m: &Moments<'_, T>,
    supports: &SupportSet<T>,
    cfg: &PenaltyConfig<T>,
) -> Result<AlternateOutcome<T>> {
    cfg.validate()?;
    let init = initialize_with(m, supports, cfg.lambda0_for(m.p1(), m.n()), cfg.rho, cfg)?;
    let mut b = init.b0;
    let mut theta = init.theta0;
    let mut ridge_used = init.ridge_used;
    let card = |b: &DenseMatrix<T>, th: &SpdMatrix<T>| (b.count_nonzero(T::zero()), th.as_matrix().count_nonzero(T::zero()));
    let mut trace = vec![m.objective(&b, &theta, cfg.lambda, cfg.rho)?];
    let mut cards = vec![card(&b, &theta)];
    let mut column_updates = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_outer {
        let mode = if iterations == 0 { UpdateMode::Exact2Block } else { cfg.mode };
        let upd = update_b(m, &b, &theta, supports, cfg.lambda, mode, cfg)?;
        column_updates += upd.column_updates;
        b = upd.b;
        let (th, ridged) = fit_theta(m.residual_covariance(&b)?, cfg.rho, Some(&theta))?;
        theta = th;
        ridge_used |= ridged;
        iterations += 1;
        let f = m.objective(&b, &theta, cfg.lambda, cfg.rho)?;
        let prev = *trace.last().unwrap();
        trace.push(f);
        cards.push(card(&b, &theta));
        if (prev - f).abs() < cfg.outer_tol && column_kkt(m, &b, theta.as_matrix(), supports, cfg.lambda)? <= cfg.kkt_tol() {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("alternating search hit max_outer = {}", cfg.max_outer);
    }
    Ok(AlternateOutcome {
        b,
        theta,
        objective_trace: trace,
        card_trace: cards,
        converged,
        iterations,
        column_updates,
        ridge_used,
    })
}

/// Largest column Lasso KKT residual of `b` given `theta`, and the glasso KKT residual of
/// `theta` given `b`.
pub fn stationarity<T: Real>(
    m: &Moments<'_, T>,
    b: &DenseMatrix<T>,
    theta: &SpdMatrix<T>,
    supports: &SupportSet<T>,
    lambda: T,
    rho: T,
) -> Result<(T, T)> {
    m.check_b(b)?;
    let worst = column_kkt(m, b, theta.as_matrix(), supports, lambda)?;
    let g = glasso_kkt_residual(&GlassoProblem::new(m.residual_covariance(b)?, rho), theta);
    Ok((worst, g))
}

fn column_kkt<T: Real>(m: &Moments<'_, T>, b: &DenseMatrix<T>, th: &DenseMatrix<T>, supports: &SupportSet<T>, lambda: T) -> Result<T> {
    let r = m.cross_residual(b)?;
    let mut worst = T::zero();
    for j in 0..m.p2() {
        let support = &supports.per_response[j];
        if support.is_empty() {
            continue;
        }
        let c = column_target(m, &r, th, j);
        let problem = LassoProblem::new(&m.gram, c, th[(j, j)], lambda).with_support(support);
        worst = worst.max(lasso_kkt_residual(&problem, &b.column(j)));
    }
    Ok(worst)
}

/// Least squares per column on the support of `b_infty`. Columns that needed the ridge
/// fallback are listed in the second slot.
pub fn refit<T: Real>(x: &DenseMatrix<T>, y: &DenseMatrix<T>, b_infty: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, Vec<usize>)> {
    let m = Moments::new(x, y)?;
    refit_with(&m, b_infty)
}

pub(crate) fn refit_with<T: Real>(m: &Moments<'_, T>, b_infty: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, Vec<usize>)> {
    m.check_b(b_infty)?;
    let mut out = DenseMatrix::zeros(m.p1(), m.p2());
    let mut ridged = Vec::new();
    for j in 0..m.p2() {
        let support: Vec<usize> = (0..m.p1()).filter(|&k| b_infty[(k, j)] != T::zero()).collect();
        let (beta, flag) = ols_or_ridge_from_gram(&m.gram, &m.xty.column(j), &support)?;
        if flag {
            ridged.push(j);
        }
        out.set_column(j, &beta);
    }
    Ok((out, ridged))
}

/// Edge selection frequencies of the graphical Lasso over random half-samples (without
/// replacement) and a penalty path. Diagonal fixed to 1.
pub fn stability_weights<T: Real>(
    residuals: &DenseMatrix<T>,
    n_boot: usize,
    rho_path: &[T],
    subsample_frac: T,
    seed: RngSeed,
) -> Result<DenseMatrix<T>> {
    let (n, p) = residuals.shape();
    if n_boot == 0 || rho_path.is_empty() {
        return Err(GgmError::BadConfig("need n_boot >= 1 and a nonempty rho path".into()));
    }
    if !(subsample_frac > T::zero() && subsample_frac <= T::one()) {
        return Err(GgmError::BadConfig("subsample_frac must lie in (0, 1]".into()));
    }
    let size = (subsample_frac * T::from_usize(n).unwrap()).floor().to_usize().unwrap_or(0).max(2).min(n);
    if n < 2 {
        return Err(GgmError::EmptyData);
    }
    // largest penalty first so each solve warm-starts from a sparser neighbour
    let mut path = rho_path.to_vec();
    path.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let counts = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed.derive(b as u64).rng();
            let mut rows = sample(&mut rng, n, size).into_vec();
            rows.sort_unstable();
            let sub = crate::numkit::center_columns(&residuals.select_rows(&rows));
            let s = sample_covariance(&sub)?;
            let mut hits = DenseMatrix::<T>::zeros(p, p);
            let mut warm: Option<SpdMatrix<T>> = None;
            for &rho in &path {
                let mut problem = GlassoProblem::new(s.clone(), rho).with_ridge_fallback();
                problem.tol = T::lit(1e-7);
                problem.max_iter = 200;
                problem.warm_start = warm.take();
                let theta = glasso(&problem)?.theta;
                for i in 0..p {
                    for j in 0..p {
                        if i != j && theta[(i, j)] != T::zero() {
                            hits[(i, j)] += T::one();
                        }
                    }
                }
                warm = Some(theta);
            }
            Ok(hits)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = T::from_usize(n_boot * rho_path.len()).unwrap();
    let mut w = DenseMatrix::zeros(p, p);
    for h in &counts {
        w = w.add(h)?;
    }
    let mut w = w.scale(T::one() / total).symmetrized();
    for i in 0..p {
        w[(i, i)] = T::one();
    }
    Ok(w)
}

/// Graphical Lasso of the residual covariance with per-edge penalty `ρ̃·(1 − W_ij)`.
pub fn final_theta<T: Real>(residuals: &DenseMatrix<T>, w_matrix: &DenseMatrix<T>, rho_tilde: T) -> Result<SpdMatrix<T>> {
    let s = sample_covariance(residuals)?;
    let sol = glasso(&GlassoProblem::new(s, rho_tilde).with_weights(w_matrix.clone()).with_ridge_fallback())?;
    if !sol.converged {
        warn!("final graphical lasso stopped after {} sweeps without converging", sol.iterations);
    }
    Ok(sol.theta)
}

#[derive(Debug, Clone)]
pub struct TwoLayerEstimate<T> {
    /// Refitted regression matrix.
    pub b_hat: DenseMatrix<T>,
    /// Stability-weighted precision estimate.
    pub theta_hat: SpdMatrix<T>,
    pub b_infty: DenseMatrix<T>,
    pub theta_infty: SpdMatrix<T>,
    pub supports: SupportSet<T>,
    pub objective_trace: Vec<T>,
    pub card_trace: Vec<(usize, usize)>,
    pub w_matrix: DenseMatrix<T>,
    pub converged: bool,
    pub mode_used: UpdateMode,
    pub lambda: T,
    pub rho: T,
    pub rho_tilde: T,
    pub iterations: usize,
    pub column_updates: usize,
    pub refit_ridge_columns: Vec<usize>,
    pub ridge_used: bool,
    pub tuning: Option<TuningOutcome<T>>,
}

/// Full pipeline: screening, optional BIC grid search for `(λ, ρ)`, alternating search, refit,
/// stability selection and the final weighted graphical Lasso.
pub fn fit_two_layer<T: Real>(
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    cfg: &TwoLayerConfig<T>,
    tuning: Option<&TuningGrid<T>>,
) -> Result<TwoLayerEstimate<T>> {
    let m = Moments::new(x, y)?;
    if m.n() < 2 {
        return Err(GgmError::BadConfig("need at least two observations".into()));
    }
    cfg.penalty.validate()?;
    let supports = screen_with(x, y, cfg.screening_alpha, DebiasConfig::default()).map_err(|e| e.in_stage("screening"))?;
    fit_two_layer_screened(&m, supports, cfg, tuning)
}

pub(crate) fn fit_two_layer_screened<T: Real>(
    m: &Moments<'_, T>,
    supports: SupportSet<T>,
    cfg: &TwoLayerConfig<T>,
    tuning: Option<&TuningGrid<T>>,
) -> Result<TwoLayerEstimate<T>> {
    let mut penalty = cfg.penalty.clone();
    let tuned = match tuning {
        Some(grid) => {
            let out = grid_search(m, &supports, grid, &penalty).map_err(|e| e.in_stage("tuning"))?;
            penalty.lambda = out.lambda_star;
            penalty.rho = out.rho_star;
            Some(out)
        }
        None => None,
    };
    let alt = alternate_with(m, &supports, &penalty).map_err(|e| e.in_stage("alternating search"))?;
    let (b_hat, refit_ridge_columns) = refit_with(m, &alt.b).map_err(|e| e.in_stage("refit"))?;
    let residuals = m.residuals(&b_hat)?;
    let path = match &cfg.stability.rho_path {
        Some(p) => p.clone(),
        None => default_rho_path(m.p2(), m.n(), 10),
    };
    let w = stability_weights(&residuals, cfg.stability.n_boot, &path, cfg.stability.subsample_frac, cfg.stability.seed)
        .map_err(|e| e.in_stage("stability selection"))?;
    let rho_tilde = penalty.rho_tilde_for(m.p2(), m.n());
    let theta_hat = final_theta(&residuals, &w, rho_tilde).map_err(|e| e.in_stage("final graphical lasso"))?;
    Ok(TwoLayerEstimate {
        b_hat,
        theta_hat,
        b_infty: alt.b,
        theta_infty: alt.theta,
        supports,
        objective_trace: alt.objective_trace,
        card_trace: alt.card_trace,
        w_matrix: w,
        converged: alt.converged,
        mode_used: penalty.mode,
        lambda: penalty.lambda,
        rho: penalty.rho,
        rho_tilde,
        iterations: alt.iterations,
        column_updates: alt.column_updates,
        refit_ridge_columns,
        ridge_used: alt.ridge_used,
        tuning: tuned,
    })
}
