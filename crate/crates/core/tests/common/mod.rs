#![allow(dead_code)]

use layered_ggm::numkit::{DenseMatrix, RngSeed, SpdMatrix};
use nalgebra::DMatrix;
use rand::Rng;

pub fn to_na(m: &DenseMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

pub fn from_na(m: &DMatrix<f64>) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn eigenvalues(m: &DenseMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = to_na(m).symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

pub fn eigen_logdet(m: &DenseMatrix<f64>) -> f64 {
    eigenvalues(m).iter().map(|v| v.ln()).sum()
}

pub fn inverse(m: &DenseMatrix<f64>) -> DenseMatrix<f64> {
    from_na(&to_na(m).try_inverse().expect("invertible"))
}

/// Random SPD matrix `AAᵀ/p + shift·I`.
pub fn random_spd(p: usize, shift: f64, seed: u64) -> DenseMatrix<f64> {
    let mut rng = RngSeed(seed).rng();
    let a = DenseMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    let mut s = a.matmul(&a.transpose()).unwrap().scale(1.0 / p as f64);
    for i in 0..p {
        s[(i, i)] += shift;
    }
    s.symmetrized()
}

pub fn uniform_matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> DenseMatrix<f64> {
    let mut rng = RngSeed(seed).rng();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// `σ(βᵀGβ − 2βᵀc) + λ‖β‖₁`.
pub fn lasso_value(g: &DenseMatrix<f64>, c: &[f64], sigma: f64, lambda: f64, beta: &[f64]) -> f64 {
    let p = c.len();
    let mut quad = 0.0;
    for i in 0..p {
        for j in 0..p {
            quad += beta[i] * g[(i, j)] * beta[j];
        }
    }
    let lin: f64 = beta.iter().zip(c).map(|(b, c)| b * c).sum();
    sigma * (quad - 2.0 * lin) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Exact Lasso minimizer by enumerating every sign pattern in `{−1, 0, 1}^p`: on a fixed pattern
/// the stationarity equations are linear, and the best candidate is the global minimizer.
pub fn lasso_by_enumeration(g: &DenseMatrix<f64>, c: &[f64], sigma: f64, lambda: f64) -> Vec<f64> {
    let p = c.len();
    let mut best = (lasso_value(g, c, sigma, lambda, &vec![0.0; p]), vec![0.0; p]);
    for code in 0..3usize.pow(p as u32) {
        let signs: Vec<i32> = (0..p).map(|k| (code / 3usize.pow(k as u32)) % 3).map(|d| d as i32 - 1).collect();
        let active: Vec<usize> = (0..p).filter(|&k| signs[k] != 0).collect();
        if active.is_empty() {
            continue;
        }
        let gaa = DMatrix::from_fn(active.len(), active.len(), |a, b| g[(active[a], active[b])]);
        let rhs = nalgebra::DVector::from_fn(active.len(), |a, _| {
            c[active[a]] - lambda * signs[active[a]] as f64 / (2.0 * sigma)
        });
        let Some(sol) = gaa.lu().solve(&rhs) else { continue };
        let consistent = active.iter().enumerate().all(|(a, &k)| sol[a] * signs[k] as f64 > 0.0);
        if !consistent {
            continue;
        }
        let mut beta = vec![0.0; p];
        for (a, &k) in active.iter().enumerate() {
            beta[k] = sol[a];
        }
        let v = lasso_value(g, c, sigma, lambda, &beta);
        if v < best.0 {
            best = (v, beta);
        }
    }
    best.1
}

/// `−log det Θ + tr(SΘ) + Σ_{i≠j} pen_ij |Θ_ij|` via nalgebra, `+∞` outside the SPD cone.
pub fn glasso_value(s: &DenseMatrix<f64>, pen: &DenseMatrix<f64>, theta: &DMatrix<f64>) -> f64 {
    let p = s.rows();
    let Some(ch) = theta.clone().cholesky() else { return f64::INFINITY };
    let logdet: f64 = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut tr = 0.0;
    let mut l1 = 0.0;
    for i in 0..p {
        for j in 0..p {
            tr += s[(i, j)] * theta[(j, i)];
            if i != j {
                l1 += pen[(i, j)] * theta[(i, j)].abs();
            }
        }
    }
    tr - logdet + l1
}

/// Proximal gradient with backtracking for the graphical Lasso (diagonal unpenalized).
/// Slow and simple: no coordinate structure is shared with the crate's solver.
pub fn glasso_reference(s: &DenseMatrix<f64>, pen: &DenseMatrix<f64>) -> DenseMatrix<f64> {
    let p = s.rows();
    let mut theta = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 / s[(i, i)] } else { 0.0 });
    let mut f = glasso_value(s, pen, &theta);
    let mut step = 1.0;
    for _ in 0..200_000 {
        let inv = theta.clone().try_inverse().unwrap();
        let grad = DMatrix::from_fn(p, p, |i, j| s[(i, j)] - inv[(i, j)]);
        let mut t = step * 2.0;
        let (next, fnext) = loop {
            let z = &theta - &grad * t;
            let cand = DMatrix::from_fn(p, p, |i, j| {
                if i == j {
                    z[(i, j)]
                } else {
                    let thr = t * pen[(i, j)];
                    z[(i, j)].signum() * (z[(i, j)].abs() - thr).max(0.0)
                }
            });
            let fc = glasso_value(s, pen, &cand);
            let d = &cand - &theta;
            let model = f + grad.dot(&d) + d.norm_squared() / (2.0 * t) - glasso_l1(pen, &theta) + glasso_l1(pen, &cand);
            if fc.is_finite() && fc <= model + 1e-15 {
                break (cand, fc);
            }
            t *= 0.5;
            assert!(t > 1e-20, "reference solver stalled");
        };
        step = t;
        let change = (&next - &theta).amax();
        theta = next;
        f = fnext;
        if change < 1e-13 {
            break;
        }
    }
    from_na(&theta)
}

fn glasso_l1(pen: &DenseMatrix<f64>, theta: &DMatrix<f64>) -> f64 {
    let p = theta.nrows();
    let mut l1 = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                l1 += pen[(i, j)] * theta[(i, j)].abs();
            }
        }
    }
    l1
}

pub fn spd(m: DenseMatrix<f64>) -> SpdMatrix<f64> {
    SpdMatrix::new(m).unwrap()
}

/// MCC from a confusion table, written out directly.
pub fn mcc(tp: f64, fp: f64, tn: f64, fn_: f64) -> f64 {
    (tp * tn - fp * fn_) / ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt()
}
