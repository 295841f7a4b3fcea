//! Per-response screening of predictors by de-biased Lasso p-values under a Bonferroni budget.

use std::io::Write;

use log::warn;
use rayon::prelude::*;

use crate::error::{GgmError, Result};
use crate::numkit::{write_matrix_csv, DenseMatrix};
use crate::scalar::Real;
use crate::solvers::{DebiasConfig, DebiasedDesign};

/// Screened candidate predictors of every response.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet<T> {
    /// Sorted predictor indices kept for each response.
    pub per_response: Vec<Vec<usize>>,
    pub alpha: T,
    /// `alpha / (p₁·p₂)`.
    pub alpha_star: T,
    /// `p₂ × p₁`; row `j` holds the p-values of response `j`. Failed rows are NaN.
    pub p_values: DenseMatrix<T>,
    /// Responses whose regression failed and were kept unscreened.
    pub failed: Vec<usize>,
}

impl<T: Real> SupportSet<T> {
    /// Every predictor kept for every response.
    pub fn full(p1: usize, p2: usize) -> Self {
        Self {
            per_response: vec![(0..p1).collect(); p2],
            alpha: T::from_usize(p1 * p2).unwrap(),
            alpha_star: T::one(),
            p_values: DenseMatrix::zeros(p2, p1),
            failed: Vec::new(),
        }
    }

    /// Applies the rule `p ≤ α/(p₁p₂)` to a `p₂ × p₁` p-value matrix. NaN rows are kept in full.
    pub fn from_p_values(p_values: DenseMatrix<T>, alpha: T) -> Self {
        let (p2, p1) = p_values.shape();
        let alpha_star = if p1 * p2 == 0 {
            T::zero()
        } else {
            alpha / T::from_usize(p1 * p2).unwrap()
        };
        let mut failed = Vec::new();
        let per_response = (0..p2)
            .map(|j| {
                let row = p_values.row(j);
                if row.iter().any(|v| v.is_nan()) {
                    failed.push(j);
                    return (0..p1).collect();
                }
                // a zero budget keeps nothing, even p-values that underflowed to zero
                if alpha_star <= T::zero() {
                    return Vec::new();
                }
                (0..p1).filter(|&k| row[k] <= alpha_star).collect()
            })
            .collect();
        Self {
            per_response,
            alpha,
            alpha_star,
            p_values,
            failed,
        }
    }

    /// The same p-values thresholded at another level.
    pub fn with_alpha(&self, alpha: T) -> Self {
        Self::from_p_values(self.p_values.clone(), alpha)
    }

    pub fn num_predictors(&self) -> usize {
        self.p_values.cols()
    }

    pub fn num_responses(&self) -> usize {
        self.per_response.len()
    }

    pub fn total_kept(&self) -> usize {
        self.per_response.iter().map(Vec::len).sum()
    }

    /// `p₁ × p₂` indicator of kept (predictor, response) pairs.
    pub fn mask(&self) -> DenseMatrix<T> {
        let mut m = DenseMatrix::zeros(self.num_predictors(), self.num_responses());
        for (j, s) in self.per_response.iter().enumerate() {
            for &k in s {
                m[(k, j)] = T::one();
            }
        }
        m
    }

    /// CSV dump of the p-value matrix (`p₂` rows, `p₁` columns).
    pub fn write_p_values<W: Write>(&self, out: W) -> Result<()> {
        write_matrix_csv(&self.p_values, out).map_err(|e| GgmError::Parse(e.to_string()))
    }
}

/// Screens with the default de-biasing settings.
pub fn screen<T: Real>(x: &DenseMatrix<T>, y: &DenseMatrix<T>, alpha: T) -> Result<SupportSet<T>> {
    screen_with(x, y, alpha, DebiasConfig::default())
}

/// Runs a de-biased Lasso of every response column on `x` (in parallel) and keeps predictor
/// `k` for response `j` iff its p-value is at most `alpha/(p₁p₂)`.
///
/// A response whose regression fails keeps every predictor and is listed in `failed`.
pub fn screen_with<T: Real>(
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    alpha: T,
    cfg: DebiasConfig<T>,
) -> Result<SupportSet<T>> {
    if x.rows() != y.rows() {
        return Err(GgmError::ShapeMismatch(format!("x has {} rows, y has {}", x.rows(), y.rows())));
    }
    if !(alpha >= T::zero()) {
        return Err(GgmError::BadConfig("alpha must be nonnegative".into()));
    }
    let (p1, p2) = (x.cols(), y.cols());
    let design = DebiasedDesign::new(x, cfg)?;
    let rows: Vec<Vec<T>> = (0..p2)
        .into_par_iter()
        .map(|j| match design.fit(&y.column(j)) {
            Ok(r) if r.p_values.iter().all(|v| !v.is_nan()) => r.p_values,
            Ok(_) => {
                warn!("screening response {j}: NaN p-values, keeping all predictors");
                vec![T::nan(); p1]
            }
            Err(e) => {
                warn!("screening response {j} failed ({e}), keeping all predictors");
                vec![T::nan(); p1]
            }
        })
        .collect();
    let mut p_values = DenseMatrix::zeros(p2, p1);
    for (j, r) in rows.iter().enumerate() {
        p_values.row_mut(j).copy_from_slice(r);
    }
    Ok(SupportSet::from_p_values(p_values, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv() -> DenseMatrix<f64> {
        DenseMatrix::from_rows(&[[1e-9, 0.5, 0.01], [0.2, 1e-300, 0.0]]).unwrap()
    }

    #[test]
    fn zero_alpha_keeps_nothing() {
        let s = SupportSet::from_p_values(pv(), 0.0);
        assert!(s.per_response.iter().all(Vec::is_empty));
    }

    #[test]
    fn full_budget_keeps_everything() {
        let s = SupportSet::from_p_values(pv(), 6.0);
        assert_eq!(s.alpha_star, 1.0);
        assert!(s.per_response.iter().all(|r| r.len() == 3));
    }

    #[test]
    fn threshold_rule() {
        let s = SupportSet::from_p_values(pv(), 0.1);
        assert_eq!(s.per_response, vec![vec![0, 2], vec![1, 2]]);
        assert_eq!(s.with_alpha(0.01).per_response, vec![vec![0], vec![1, 2]]);
        assert_eq!(s.alpha_star * 6.0, 0.1);
    }

    #[test]
    fn nan_rows_fail_open() {
        let mut p = pv();
        p[(1, 0)] = f64::NAN;
        let s = SupportSet::from_p_values(p, 0.1);
        assert_eq!(s.failed, vec![1]);
        assert_eq!(s.per_response[1], vec![0, 1, 2]);
    }
}
