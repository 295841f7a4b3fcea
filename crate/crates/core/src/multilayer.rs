//! `M`-layer estimation as `M − 1` independent two-layer fits (each layer regressed on the
//! column-stacked super layer of all earlier layers) plus a graphical Lasso of the bottom layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{GgmError, Result};
use crate::numkit::{sample_covariance, save_matrix, DenseMatrix, SpdMatrix};
use crate::scalar::Real;
use crate::simgen::LayeredDataset;
use crate::solvers::{glasso, GlassoProblem};
use crate::tuning::{bic_precision, GridSpec};
use crate::twolayer::{fit_two_layer, TwoLayerConfig, TwoLayerEstimate};

/// One two-layer subproblem, or the bottom layer when `design` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    /// 0-based index of the response layer.
    pub target: usize,
    /// `[X⁰ | … | X^{target−1}]`, layer-major.
    pub design: Option<DenseMatrix<T>>,
    pub response: DenseMatrix<T>,
    /// Column counts of the stacked source layers.
    pub source_dims: Vec<usize>,
}

/// Stages for targets `M−1, …, 1` followed by the bottom-layer stage.
pub fn decompose<T: Real>(data: &LayeredDataset<T>) -> Result<Vec<Stage<T>>> {
    let m = data.num_layers();
    if m < 2 {
        return Err(GgmError::BadConfig("need at least two layers".into()));
    }
    let dims = data.layer_dims();
    let mut stages = Vec::with_capacity(m);
    for t in (1..m).rev() {
        let parts: Vec<&DenseMatrix<T>> = data.layers[..t].iter().collect();
        stages.push(Stage {
            target: t,
            design: Some(DenseMatrix::hstack(&parts)?),
            response: data.layers[t].clone(),
            source_dims: dims[..t].to_vec(),
        });
    }
    stages.push(Stage {
        target: 0,
        design: None,
        response: data.layers[0].clone(),
        source_dims: Vec::new(),
    });
    Ok(stages)
}

/// Splits a stacked regression matrix into `(s, target) → B^{s,target}` row blocks.
pub fn split_blocks<T: Real>(
    b: &DenseMatrix<T>,
    source_dims: &[usize],
    target: usize,
) -> Result<BTreeMap<(usize, usize), DenseMatrix<T>>> {
    if source_dims.iter().sum::<usize>() != b.rows() {
        return Err(GgmError::ShapeMismatch("source dims do not add up to the rows of B".into()));
    }
    let mut out = BTreeMap::new();
    let mut r0 = 0;
    for (s, &p) in source_dims.iter().enumerate() {
        out.insert((s, target), b.block(r0, 0, p, b.cols()));
        r0 += p;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MultiLayerEstimate<T> {
    pub coeff_hat: BTreeMap<(usize, usize), DenseMatrix<T>>,
    /// Precision estimate per layer (bottom layer included).
    pub precision_hat: BTreeMap<usize, SpdMatrix<T>>,
    /// Two-layer estimate per target layer.
    pub per_stage: BTreeMap<usize, TwoLayerEstimate<T>>,
    pub bottom_theta: SpdMatrix<T>,
    pub bottom_rho: T,
}

/// Graphical Lasso of the bottom layer; `rho = None` picks ρ on the default grid by BIC.
pub fn fit_bottom_layer<T: Real>(x: &DenseMatrix<T>, rho: Option<T>, grid: &GridSpec<T>) -> Result<(SpdMatrix<T>, T)> {
    let s = sample_covariance(x)?;
    let n = x.rows();
    let candidates = match rho {
        Some(r) => vec![r],
        None => grid.resolve(x.cols(), x.cols(), n).rhos,
    };
    let fits = candidates
        .par_iter()
        .map(|&r| {
            let theta = glasso(&GlassoProblem::new(s.clone(), r).with_ridge_fallback())?.theta;
            let score = bic_precision(&s, &theta, n);
            Ok((score, r, theta))
        })
        .collect::<Result<Vec<_>>>()?;
    // ties go to the larger penalty
    let (_, r, theta) = fits
        .into_iter()
        .reduce(|best, cur| if cur.0 <= best.0 { cur } else { best })
        .expect("at least one candidate");
    Ok((theta, r))
}

/// Fits every stage independently (concurrently) and assembles the per-block estimates.
///
/// Stage `t` uses the stability seed `cfg.stability.seed.derive(t)`, so a stage's result does not
/// depend on which other stages run. `grid = None` uses the penalties in `cfg` as given.
pub fn fit_multilayer<T: Real>(
    data: &LayeredDataset<T>,
    cfg: &TwoLayerConfig<T>,
    grid: Option<&GridSpec<T>>,
    bottom_rho: Option<T>,
) -> Result<MultiLayerEstimate<T>> {
    let stages = decompose(data)?;
    let default_grid = GridSpec::default();
    let results = stages
        .par_iter()
        .filter(|s| s.design.is_some())
        .map(|stage| {
            let x = stage.design.as_ref().expect("filtered");
            let mut c = cfg.clone();
            c.stability.seed = cfg.stability.seed.derive(stage.target as u64);
            let g = grid.map(|g| g.resolve(x.cols(), stage.response.cols(), x.rows()));
            fit_two_layer(x, &stage.response, &c, g.as_ref())
                .map(|est| (stage.target, est))
                .map_err(|e| e.in_stage(format!("stage {}", stage.target + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (bottom_theta, rho0) = fit_bottom_layer(&data.layers[0], bottom_rho, grid.unwrap_or(&default_grid))
        .map_err(|e| e.in_stage("bottom layer"))?;

    let mut coeff_hat = BTreeMap::new();
    let mut precision_hat = BTreeMap::new();
    let mut per_stage = BTreeMap::new();
    for (stage, (t, est)) in stages.iter().zip(results) {
        debug_assert_eq!(stage.target, t);
        coeff_hat.extend(split_blocks(&est.b_hat, &stage.source_dims, t)?);
        precision_hat.insert(t, est.theta_hat.clone());
        per_stage.insert(t, est);
    }
    precision_hat.insert(0, bottom_theta.clone());
    Ok(MultiLayerEstimate {
        coeff_hat,
        precision_hat,
        per_stage,
        bottom_theta,
        bottom_rho: rho0,
    })
}

/// Writes `B_<s>_<t>.csv`, `Theta_<m>.csv` (1-based layers) and `estimate.json`.
pub fn write_estimate<T: Real>(dir: &Path, est: &MultiLayerEstimate<T>) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| GgmError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files = Vec::new();
    for (&(s, t), b) in &est.coeff_hat {
        let name = format!("B_{}_{}.csv", s + 1, t + 1);
        save_matrix(b, &dir.join(&name))?;
        files.push(name);
    }
    for (&m, th) in &est.precision_hat {
        let name = format!("Theta_{}.csv", m + 1);
        save_matrix(th.as_matrix(), &dir.join(&name))?;
        files.push(name);
    }
    let stages: Vec<_> = est
        .per_stage
        .iter()
        .map(|(t, e)| {
            serde_json::json!({
                "layer": t + 1,
                "lambda": e.lambda.to_f64_lossy(),
                "rho": e.rho.to_f64_lossy(),
                "rho_tilde": e.rho_tilde.to_f64_lossy(),
                "iterations": e.iterations,
                "converged": e.converged,
                "mode": e.mode_used.to_string(),
            })
        })
        .collect();
    let manifest = serde_json::json!({
        "layers": est.precision_hat.len(),
        "files": files,
        "stages": stages,
        "bottom_rho": est.bottom_rho.to_f64_lossy(),
    });
    let path = dir.join("estimate.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json")).map_err(io(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngSeed;

    fn dataset(dims: &[usize], n: usize) -> LayeredDataset<f64> {
        LayeredDataset {
            layers: dims
                .iter()
                .enumerate()
                .map(|(m, &p)| DenseMatrix::from_fn(n, p, |i, j| ((i * 7 + j * 3 + m) % 5) as f64))
                .collect(),
            n,
            seed: RngSeed(0),
            centered: false,
        }
    }

    #[test]
    fn two_layers_give_one_stage() {
        let d = dataset(&[3, 4], 6);
        let s = decompose(&d).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].design.as_ref().unwrap(), &d.layers[0]);
        assert_eq!(s[0].response, d.layers[1]);
        assert!(s[1].design.is_none());
    }

    #[test]
    fn three_layers_stack_layer_major() {
        let d = dataset(&[2, 3, 4], 5);
        let s = decompose(&d).unwrap();
        assert_eq!(s[0].target, 2);
        let x = s[0].design.as_ref().unwrap();
        assert_eq!(x.cols(), 5);
        assert_eq!(x.block(0, 2, 5, 3), d.layers[1]);
        assert_eq!(s[1].design.as_ref().unwrap().cols(), 2);
        assert_eq!(decompose(&d).unwrap(), s);
    }

    #[test]
    fn split_round_trip() {
        let b = DenseMatrix::from_fn(5, 2, |i, j| (i * 2 + j) as f64);
        let blocks = split_blocks(&b, &[2, 3], 2).unwrap();
        let parts: Vec<&DenseMatrix<f64>> = blocks.values().collect();
        assert_eq!(DenseMatrix::vstack(&parts).unwrap(), b);
    }
}
