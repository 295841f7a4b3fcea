//! Support-recovery metrics and structural diagnostics of ground-truth models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GgmError, Result};
use crate::numkit::{eig_extremes, Cholesky, DenseMatrix};
use crate::scalar::Real;
use crate::simgen::GroundTruth;

/// Magnitudes at or below this count as zero.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sen: f64,
    pub spe: f64,
    pub mcc: f64,
    pub rel_fnorm: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MetricsReport {
    /// Builds the rate metrics from a confusion table. `rel_fnorm` is left at 0.
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let (tpf, fpf, tnf, fnf) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
        let den = (tpf + fpf) * (tpf + fnf) * (tnf + fpf) * (tnf + fnf);
        let mcc = if den == 0.0 {
            0.0
        } else {
            (tpf * tnf - fpf * fnf) / den.sqrt()
        };
        Self {
            sen: ratio(tp, tp + fn_),
            spe: ratio(tn, tn + fp),
            mcc,
            rel_fnorm: 0.0,
            tp,
            fp,
            tn,
            fn_,
        }
    }
}

/// Compares nonzero patterns of `estimate` and `truth`.
///
/// With `off_diagonal_only` the matrices must be square and only the strict upper triangle is
/// compared. `rel_fnorm` always uses the whole matrices; when the truth is zero it is the
/// absolute norm of the estimate.
pub fn support_metrics<T: Real>(
    estimate: &DenseMatrix<T>,
    truth: &DenseMatrix<T>,
    off_diagonal_only: bool,
) -> Result<MetricsReport> {
    if estimate.shape() != truth.shape() {
        return Err(GgmError::ShapeMismatch(format!(
            "estimate {:?} vs truth {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    if off_diagonal_only && !truth.is_square() {
        return Err(GgmError::ShapeMismatch("off-diagonal comparison needs square matrices".into()));
    }
    let thr = T::lit(SUPPORT_THRESHOLD);
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    let (rows, cols) = truth.shape();
    for i in 0..rows {
        let j0 = if off_diagonal_only { i + 1 } else { 0 };
        for j in j0..cols {
            let e = estimate[(i, j)].abs() > thr;
            let t = truth[(i, j)].abs() > thr;
            match (e, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
    }
    let mut report = MetricsReport::from_counts(tp, fp, tn, fn_);
    let diff = estimate.sub(truth)?.frobenius_norm().to_f64_lossy();
    let norm = truth.frobenius_norm().to_f64_lossy();
    report.rel_fnorm = if norm > 0.0 { diff / norm } else { diff };
    Ok(report)
}

fn max_row_abs_sum<T: Real>(m: &DenseMatrix<T>) -> T {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<T>())
        .fold(T::zero(), T::max)
}

fn max_col_abs_sum<T: Real>(m: &DenseMatrix<T>) -> T {
    max_row_abs_sum(&m.transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityReport<T> {
    /// `v(Θ^m)` per layer.
    pub precision: Vec<T>,
    /// `(s, t) → (v_in, v_out)` of `B^{st}`.
    pub coeff: BTreeMap<(usize, usize), (T, T)>,
}

/// Maximum absolute row sums of every `Θ^m`, and maximum column (incoming) and row (outgoing)
/// absolute sums of every `B^{st}`.
pub fn node_capacities<T: Real>(truth: &GroundTruth<T>) -> CapacityReport<T> {
    CapacityReport {
        precision: truth.precisions.iter().map(|th| max_row_abs_sum(th.as_matrix())).collect(),
        coeff: truth
            .coeff
            .iter()
            .map(|(&k, b)| (k, (max_col_abs_sum(b), max_row_abs_sum(b))))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop4Check<T> {
    pub bound: T,
    pub lambda_min_actual: T,
}

impl<T: Real> Prop4Check<T> {
    pub fn holds(&self, slack: T) -> bool {
        self.lambda_min_actual >= self.bound - slack
    }
}

/// Lower bound on the smallest eigenvalue of the covariance of the stacked first two layers,
/// `v(Θ¹)⁻¹ v(Θ²)⁻¹ [1 + (v_in(B¹²) + v_out(B¹²))/2]⁻²`, next to the actual value.
///
/// The actual value is `1/λ_max` of the joint precision
/// `[[Θ¹ + BΘ²Bᵀ, −BΘ²], [−Θ²Bᵀ, Θ²]]`.
pub fn prop4_bound<T: Real>(truth: &GroundTruth<T>) -> Result<Prop4Check<T>> {
    if truth.num_layers() < 2 {
        return Err(GgmError::BadConfig("need at least two layers".into()));
    }
    let th1 = truth.precisions[0].as_matrix();
    let th2 = truth.precisions[1].as_matrix();
    let b = truth.coeff(0, 1);
    let caps = node_capacities(truth);
    let (v_in, v_out) = caps.coeff[&(0, 1)];
    let half = T::lit(0.5);
    let factor = T::one() + (v_in + v_out) * half;
    let bound = T::one() / (caps.precision[0] * caps.precision[1] * factor * factor);

    let (p1, p2) = (th1.rows(), th2.rows());
    let b_th2 = b.matmul(th2)?;
    let top_left = th1.add(&b_th2.matmul(&b.transpose())?)?;
    let neg = b_th2.scale(-T::one());
    let joint = DenseMatrix::from_fn(p1 + p2, p1 + p2, |i, j| match (i < p1, j < p1) {
        (true, true) => top_left[(i, j)],
        (true, false) => neg[(i, j - p1)],
        (false, true) => neg[(j, i - p1)],
        (false, false) => th2[(i - p1, j - p1)],
    });
    let (_, hi) = eig_extremes(&joint)?;
    Ok(Prop4Check {
        bound,
        lambda_min_actual: T::one() / hi,
    })
}

/// Largest dimension for which the incoherence margin is computed.
pub const INCOHERENCE_LIMIT: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport<T> {
    /// Strict diagonal dominance with absolute off-diagonal sums.
    pub diag_dominant: bool,
    /// `min_i (|θ_ii| − Σ_{j≠i} |θ_ij|)`.
    pub dominance_margin: T,
    /// `ψⁱ = θ_ii − Σ_{j≠i} θ_ij` with signed entries.
    pub psi: Vec<T>,
    /// `1 − max_{e ∉ S} ‖H_{eS} H_{SS}⁻¹‖₁` with `H = Θ⁻¹ ⊗ Θ⁻¹` and `S` the support of `Θ`
    /// (diagonal included). `None` unless requested.
    pub incoherence_margin: Option<T>,
}

pub fn structure_checks<T: Real>(theta: &DenseMatrix<T>, with_incoherence: bool) -> Result<StructureReport<T>> {
    if !theta.is_square() {
        return Err(GgmError::ShapeMismatch("theta must be square".into()));
    }
    let p = theta.rows();
    let mut psi = Vec::with_capacity(p);
    let mut margin = T::infinity();
    for i in 0..p {
        let mut signed = T::zero();
        let mut abs = T::zero();
        for j in (0..p).filter(|&j| j != i) {
            signed += theta[(i, j)];
            abs += theta[(i, j)].abs();
        }
        psi.push(theta[(i, i)] - signed);
        margin = margin.min(theta[(i, i)].abs() - abs);
    }
    if p == 0 {
        margin = T::zero();
    }
    let incoherence_margin = if with_incoherence {
        if p > INCOHERENCE_LIMIT {
            return Err(GgmError::TooLarge {
                p,
                limit: INCOHERENCE_LIMIT,
            });
        }
        Some(incoherence(theta)?)
    } else {
        None
    };
    Ok(StructureReport {
        diag_dominant: p == 0 || margin > T::zero(),
        dominance_margin: margin,
        psi,
        incoherence_margin,
    })
}

fn incoherence<T: Real>(theta: &DenseMatrix<T>) -> Result<T> {
    let p = theta.rows();
    let sigma = Cholesky::new(theta)?.inverse();
    let thr = T::lit(SUPPORT_THRESHOLD);
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).collect();
    let (support, off): (Vec<_>, Vec<_>) = pairs.into_iter().partition(|&(i, j)| theta[(i, j)].abs() > thr);
    if off.is_empty() {
        return Ok(T::one());
    }
    let h = |(i, j): (usize, usize), (k, l): (usize, usize)| sigma[(i, k)] * sigma[(j, l)];
    let s = support.len();
    let h_ss = DenseMatrix::from_fn(s, s, |a, b| h(support[a], support[b]));
    let h_ss_inv = Cholesky::new(&h_ss)?.inverse();
    let mut worst = T::zero();
    for &e in &off {
        let row: Vec<T> = support.iter().map(|&f| h(e, f)).collect();
        let norm = h_ss_inv.t_matvec(&row)?.iter().map(|v| v.abs()).sum::<T>();
        worst = worst.max(norm);
    }
    Ok(T::one() - worst)
}
