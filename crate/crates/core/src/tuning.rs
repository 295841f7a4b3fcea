//! BIC and grid search over `(λ, ρ)`.

use std::cmp::Ordering;
use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GgmError, Result};
use crate::numkit::{DenseMatrix, SpdMatrix};
use crate::scalar::Real;
use crate::screening::SupportSet;
use crate::twolayer::{alternate_with, log_ratio, trace_product, Moments, PenaltyConfig};

/// `−log det Θ + tr(SΘ) + (log n / n)·((‖Θ‖₀ − p₂)/2 + ‖B‖₀)`, with `S` the residual covariance.
pub fn bic<T: Real>(b: &DenseMatrix<T>, theta: &DenseMatrix<T>, x: &DenseMatrix<T>, y: &DenseMatrix<T>) -> Result<T> {
    let theta = SpdMatrix::new(theta.clone())?;
    let m = Moments::new(x, y)?;
    bic_with(&m, b, &theta)
}

pub(crate) fn bic_with<T: Real>(m: &Moments<'_, T>, b: &DenseMatrix<T>, theta: &SpdMatrix<T>) -> Result<T> {
    if b.shape() != (m.p1(), m.p2()) || theta.dim() != m.p2() {
        return Err(GgmError::ShapeMismatch("B or Θ does not match the data".into()));
    }
    let s = m.residual_covariance(b)?;
    let n = T::from_usize(m.n()).unwrap();
    let theta_nnz = T::from_usize(theta.as_matrix().count_nonzero(T::zero())).unwrap();
    let b_nnz = T::from_usize(b.count_nonzero(T::zero())).unwrap();
    let p2 = T::from_usize(m.p2()).unwrap();
    let dof = (theta_nnz - p2) * T::lit(0.5) + b_nnz;
    Ok(trace_product(&s, theta.as_matrix()) - theta.log_det() + n.ln() / n * dof)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct TuningGrid<T> {
    pub lambdas: Vec<T>,
    pub rhos: Vec<T>,
}

fn linspace<T: Real>(hi: T, len: usize) -> Vec<T> {
    if len == 1 {
        return vec![hi];
    }
    (0..len)
        .map(|k| hi * T::from_usize(k).unwrap() / T::from_usize(len - 1).unwrap())
        .collect()
}

impl<T: Real> TuningGrid<T> {
    pub fn new(lambdas: Vec<T>, rhos: Vec<T>) -> Result<Self> {
        let g = Self { lambdas, rhos };
        g.validate()?;
        Ok(g)
    }

    /// `len` evenly spaced values over `[0, 0.5·√(log p₁/n)]` for λ and `[0, 0.5·√(log p₂/n)]` for ρ.
    pub fn default_for(p1: usize, p2: usize, n: usize, len: usize) -> Self {
        let half = T::lit(0.5);
        Self {
            lambdas: linspace(half * log_ratio::<T>(p1.max(2), n), len.max(1)),
            rhos: linspace(half * log_ratio::<T>(p2.max(2), n), len.max(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambdas", &self.lambdas), ("rhos", &self.rhos)] {
            if v.is_empty() {
                return Err(GgmError::BadConfig(format!("tuning grid {name} is empty")));
            }
            if v.iter().any(|&x| !(x >= T::zero())) {
                return Err(GgmError::BadConfig(format!("tuning grid {name} must be nonnegative")));
            }
            if v.windows(2).any(|w| w[0] > w[1]) {
                return Err(GgmError::BadConfig(format!("tuning grid {name} must be sorted ascending")));
            }
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<(T, T)> {
        self.lambdas
            .iter()
            .flat_map(|&l| self.rhos.iter().map(move |&r| (l, r)))
            .collect()
    }
}

/// `−log det Θ + tr(SΘ) + (log n / n)·(‖Θ‖₀ − p)/2` for a single layer.
pub fn bic_precision<T: Real>(s: &DenseMatrix<T>, theta: &SpdMatrix<T>, n: usize) -> T {
    let nn = T::from_usize(n).unwrap();
    let nnz = T::from_usize(theta.as_matrix().count_nonzero(T::zero())).unwrap();
    let p = T::from_usize(theta.dim()).unwrap();
    trace_product(s, theta.as_matrix()) - theta.log_det() + nn.ln() / nn * (nnz - p) * T::lit(0.5)
}

/// Grid given explicitly or derived from the stage dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", bound(deserialize = "T: Real + Deserialize<'de>"))]
pub enum GridSpec<T> {
    /// [`TuningGrid::default_for`] with this many points per axis.
    Default { points: usize },
    Explicit(TuningGrid<T>),
}

impl<T: Real> Default for GridSpec<T> {
    fn default() -> Self {
        GridSpec::Default { points: 6 }
    }
}

impl<T: Real> GridSpec<T> {
    pub fn resolve(&self, p1: usize, p2: usize, n: usize) -> TuningGrid<T> {
        match self {
            GridSpec::Default { points } => TuningGrid::default_for(p1, p2, n, *points),
            GridSpec::Explicit(g) => g.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow<T> {
    pub lambda: T,
    pub rho: T,
    /// NaN when the point failed.
    pub bic: T,
    pub b_nnz: usize,
    pub theta_nnz: usize,
    pub iterations: usize,
    pub converged: bool,
    pub ridge_used: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningOutcome<T> {
    pub lambda_star: T,
    pub rho_star: T,
    /// One row per grid point, λ-major.
    pub table: Vec<BicRow<T>>,
}

impl<T: Real> TuningOutcome<T> {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| GgmError::Parse(e.to_string());
        w.write_record(["lambda", "rho", "bic", "b_nnz", "theta_nnz", "iterations", "converged"])
            .map_err(err)?;
        for r in &self.table {
            w.write_record([
                r.lambda.to_string(),
                r.rho.to_string(),
                r.bic.to_string(),
                r.b_nnz.to_string(),
                r.theta_nnz.to_string(),
                r.iterations.to_string(),
                r.converged.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| GgmError::Parse(e.to_string()))
    }
}

/// Runs the alternating search at every grid point (concurrently) and returns the BIC minimizer.
/// Ties go to the larger `(λ, ρ)` in lexicographic order.
pub fn grid_search<T: Real>(
    m: &Moments<'_, T>,
    supports: &SupportSet<T>,
    grid: &TuningGrid<T>,
    cfg: &PenaltyConfig<T>,
) -> Result<TuningOutcome<T>> {
    grid.validate()?;
    let table: Vec<BicRow<T>> = grid
        .points()
        .into_par_iter()
        .map(|(lambda, rho)| {
            let mut c = cfg.clone();
            c.lambda = lambda;
            c.rho = rho;
            let run = alternate_with(m, supports, &c).and_then(|alt| Ok((bic_with(m, &alt.b, &alt.theta)?, alt)));
            match run {
                Ok((bic, alt)) => BicRow {
                    lambda,
                    rho,
                    bic,
                    b_nnz: alt.b.count_nonzero(T::zero()),
                    theta_nnz: alt.theta.as_matrix().count_nonzero(T::zero()),
                    iterations: alt.iterations,
                    converged: alt.converged,
                    ridge_used: alt.ridge_used,
                },
                Err(e) => {
                    warn!("grid point (lambda = {lambda}, rho = {rho}) failed: {e}");
                    BicRow {
                        lambda,
                        rho,
                        bic: T::nan(),
                        b_nnz: 0,
                        theta_nnz: 0,
                        iterations: 0,
                        converged: false,
                        ridge_used: false,
                    }
                }
            }
        })
        .collect();
    let best = table
        .iter()
        .filter(|r| r.bic.is_finite())
        .min_by(|a, b| {
            a.bic
                .partial_cmp(&b.bic)
                .unwrap_or(Ordering::Equal)
                .then_with(|| (b.lambda, b.rho).partial_cmp(&(a.lambda, a.rho)).unwrap_or(Ordering::Equal))
        })
        .ok_or(GgmError::TuningFailed)?;
    Ok(TuningOutcome {
        lambda_star: best.lambda,
        rho_star: best.rho,
        table: table.clone(),
    })
}
