//! Synthetic layered models: sparse regression matrices, conditioned sparse precision matrices,
//! data drawn from the structural equations, and nonparanormal perturbations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{GgmError, Result};
use crate::numkit::{
    center_columns, eig_extremes, load_matrix, mvn_sample, save_matrix, DenseMatrix, RngSeed, SpdMatrix,
};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// `B` entries nonzero w.p. `5/p₁`, `Θ_ε` off-diagonals w.p. `5/p₂`.
    TwoLayerA,
    /// `B` entries nonzero w.p. `30/p₁`, `Θ_ε` off-diagonals w.p. `5/p₂`.
    TwoLayerB,
    /// Three layers; `B_XZ`, `B_YZ` scaled by the signal strength.
    ThreeLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer1Cov {
    #[default]
    Identity,
    /// Precision drawn like the other layers with edge probability `5/p₁` and condition number `p₁`.
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NpnKind {
    Truncated,
    Shrunken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecipe {
    pub family: ModelFamily,
    /// `(p₁, p₂)` or `(p₁, p₂, p₃)`.
    pub dims: Vec<usize>,
    pub n: usize,
    #[serde(default = "default_signal")]
    pub signal_strength: f64,
    /// Overrides the nonzero probability of every regression matrix.
    #[serde(default)]
    pub coeff_prob: Option<f64>,
    /// Overrides the off-diagonal edge probability of every response-layer precision.
    #[serde(default)]
    pub precision_prob: Option<f64>,
    /// Overrides the condition number of every response-layer precision.
    #[serde(default)]
    pub cond_number: Option<f64>,
    #[serde(default)]
    pub layer1_cov: Layer1Cov,
    /// Nonparanormal perturbation of the response-layer errors.
    #[serde(default)]
    pub perturbation: Option<NpnKind>,
}

fn default_signal() -> f64 {
    1.0
}

impl ModelRecipe {
    pub fn two_layer_a(p1: usize, p2: usize, n: usize) -> Self {
        Self::base(ModelFamily::TwoLayerA, vec![p1, p2], n)
    }

    pub fn two_layer_b(p1: usize, p2: usize, n: usize) -> Self {
        Self::base(ModelFamily::TwoLayerB, vec![p1, p2], n)
    }

    pub fn three_layer(p1: usize, p2: usize, p3: usize, n: usize, signal_strength: f64) -> Self {
        Self {
            signal_strength,
            ..Self::base(ModelFamily::ThreeLayer, vec![p1, p2, p3], n)
        }
    }

    fn base(family: ModelFamily, dims: Vec<usize>, n: usize) -> Self {
        Self {
            family,
            dims,
            n,
            signal_strength: 1.0,
            coeff_prob: None,
            precision_prob: None,
            cond_number: None,
            layer1_cov: Layer1Cov::Identity,
            perturbation: None,
        }
    }

    pub fn with_perturbation(mut self, kind: NpnKind) -> Self {
        self.perturbation = Some(kind);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.family {
            ModelFamily::TwoLayerA | ModelFamily::TwoLayerB => 2,
            ModelFamily::ThreeLayer => 3,
        };
        if self.dims.len() != want {
            return Err(GgmError::BadConfig(format!(
                "{:?} needs {want} layer dimensions, got {}",
                self.family,
                self.dims.len()
            )));
        }
        if self.dims.contains(&0) {
            return Err(GgmError::BadConfig("layer dimensions must be positive".into()));
        }
        if self.n < 2 {
            return Err(GgmError::BadConfig("n must be at least 2".into()));
        }
        for p in [self.coeff_prob, self.precision_prob].into_iter().flatten() {
            if !(0.0..=1.0).contains(&p) {
                return Err(GgmError::BadConfig(format!("edge probability {p} outside [0, 1]")));
            }
        }
        if !(self.signal_strength > 0.0) {
            return Err(GgmError::BadConfig("signal_strength must be positive".into()));
        }
        if let Some(c) = self.cond_number {
            if !(c > 1.0) {
                return Err(GgmError::BadConfig("cond_number must exceed 1".into()));
            }
        }
        Ok(())
    }
}

/// True parameters of a layered model. Layers are indexed from 0 (the bottom layer).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<T> {
    pub layer_dims: Vec<usize>,
    /// `(s, t) → B^{st}` of size `p_s × p_t`, for every `s < t`.
    pub coeff: BTreeMap<(usize, usize), DenseMatrix<T>>,
    /// `Θ^m` for every layer; for layers above the bottom these are error precisions.
    pub precisions: Vec<SpdMatrix<T>>,
}

impl<T: Real> GroundTruth<T> {
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn coeff(&self, s: usize, t: usize) -> &DenseMatrix<T> {
        &self.coeff[&(s, t)]
    }

    /// `[B^{0t}; …; B^{t−1,t}]`: the regression matrix of layer `t` on the stacked super layer.
    pub fn stacked_coeff(&self, t: usize) -> Result<DenseMatrix<T>> {
        let blocks: Vec<&DenseMatrix<T>> = (0..t).map(|s| self.coeff(s, t)).collect();
        DenseMatrix::vstack(&blocks)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_layers();
        if self.precisions.len() != m {
            return Err(GgmError::ShapeMismatch("one precision per layer".into()));
        }
        for (k, th) in self.precisions.iter().enumerate() {
            if th.dim() != self.layer_dims[k] {
                return Err(GgmError::ShapeMismatch(format!("precision {k} has wrong size")));
            }
        }
        for t in 1..m {
            for s in 0..t {
                let b = self
                    .coeff
                    .get(&(s, t))
                    .ok_or_else(|| GgmError::ShapeMismatch(format!("missing B^({s},{t})")))?;
                if b.shape() != (self.layer_dims[s], self.layer_dims[t]) {
                    return Err(GgmError::ShapeMismatch(format!("B^({s},{t}) has wrong shape")));
                }
            }
        }
        Ok(())
    }
}

/// Centered observations of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredDataset<T> {
    pub layers: Vec<DenseMatrix<T>>,
    pub n: usize,
    pub seed: RngSeed,
    pub centered: bool,
}

impl<T: Real> LayeredDataset<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.cols()).collect()
    }
}

fn uniform_magnitude<R: Rng>(rng: &mut R, low: f64, high: f64) -> f64 {
    let mag = rng.random_range(low..high);
    if rng.random_bool(0.5) {
        -mag
    } else {
        mag
    }
}

/// Each entry independently nonzero with probability `prob`; nonzeros uniform on
/// `(−high, −low) ∪ (low, high)`, then multiplied by `scale`.
pub fn gen_sparse_coeff<T: Real>(
    p_s: usize,
    p_t: usize,
    prob: f64,
    magnitude_low: f64,
    magnitude_high: f64,
    scale: f64,
    seed: RngSeed,
) -> Result<DenseMatrix<T>> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(GgmError::BadConfig(format!("probability {prob} outside [0, 1]")));
    }
    if !(0.0 < magnitude_low && magnitude_low < magnitude_high) {
        return Err(GgmError::BadConfig("need 0 < magnitude_low < magnitude_high".into()));
    }
    let mut rng = seed.rng();
    let mut b = DenseMatrix::zeros(p_s, p_t);
    for i in 0..p_s {
        for j in 0..p_t {
            if rng.random_bool(prob) {
                b[(i, j)] = T::lit(scale * uniform_magnitude(&mut rng, magnitude_low, magnitude_high));
            }
        }
    }
    Ok(b)
}

#[derive(Debug, Clone)]
pub struct PrecisionDraw<T> {
    pub theta: SpdMatrix<T>,
    /// Shared diagonal value δ.
    pub diagonal: T,
    pub achieved_condition: T,
}

/// Sparse precision `A + δI`: symmetric off-diagonal draw `A` with edge probability
/// `edge_prob`, and the common diagonal δ chosen so that `λ_max/λ_min = cond_number`.
///
/// When no edge is drawn the matrix is the identity and the achieved condition number is 1.
pub fn gen_precision<T: Real>(
    p: usize,
    edge_prob: f64,
    cond_number: f64,
    magnitude_low: f64,
    magnitude_high: f64,
    seed: RngSeed,
) -> Result<PrecisionDraw<T>> {
    if !(cond_number > 1.0) {
        return Err(GgmError::BadConfig(format!("condition number {cond_number} must exceed 1")));
    }
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(GgmError::BadConfig(format!("probability {edge_prob} outside [0, 1]")));
    }
    if !(0.0 < magnitude_low && magnitude_low < magnitude_high) {
        return Err(GgmError::BadConfig("need 0 < magnitude_low < magnitude_high".into()));
    }
    let mut rng = seed.rng();
    let mut a = DenseMatrix::<T>::zeros(p, p);
    for i in 0..p {
        for j in i + 1..p {
            if rng.random_bool(edge_prob) {
                let v = T::lit(uniform_magnitude(&mut rng, magnitude_low, magnitude_high));
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
    }
    if a.max_abs() == T::zero() {
        return Ok(PrecisionDraw {
            theta: SpdMatrix::identity(p),
            diagonal: T::one(),
            achieved_condition: T::one(),
        });
    }
    let (lo, hi) = eig_extremes(&a)?;
    let c = T::lit(cond_number);
    // (hi + δ)/(lo + δ) = c
    let delta = (hi - c * lo) / (c - T::one());
    if !(delta + lo > T::zero()) {
        return Err(GgmError::BadConfig("condition number not attainable".into()));
    }
    for i in 0..p {
        a[(i, i)] = delta;
    }
    Ok(PrecisionDraw {
        theta: SpdMatrix::new(a)?,
        diagonal: delta,
        achieved_condition: (hi + delta) / (lo + delta),
    })
}

const MAG_LOW: f64 = 0.5;
const MAG_HIGH: f64 = 1.0;

fn prob(k: f64, p: usize) -> f64 {
    (k / p as f64).min(1.0)
}

/// Draws the ground truth described by `recipe`.
pub fn build_truth<T: Real>(recipe: &ModelRecipe, seed: RngSeed) -> Result<GroundTruth<T>> {
    recipe.validate()?;
    let dims = recipe.dims.clone();
    let p1 = dims[0];
    let layer1 = match recipe.layer1_cov {
        Layer1Cov::Identity => SpdMatrix::identity(p1),
        Layer1Cov::Generated => {
            if p1 < 2 {
                SpdMatrix::identity(p1)
            } else {
                gen_precision(p1, prob(5.0, p1), p1 as f64, MAG_LOW, MAG_HIGH, seed.derive(100))?.theta
            }
        }
    };
    let response_precision = |m: usize| -> Result<SpdMatrix<T>> {
        let p = dims[m];
        if p < 2 {
            return Ok(SpdMatrix::identity(p));
        }
        let cond = recipe.cond_number.unwrap_or(p as f64);
        let ep = recipe.precision_prob.unwrap_or_else(|| prob(5.0, p));
        Ok(gen_precision(p, ep, cond, MAG_LOW, MAG_HIGH, seed.derive(100 + m as u64))?.theta)
    };
    let mut coeff = BTreeMap::new();
    let mut precisions = vec![layer1];
    match recipe.family {
        ModelFamily::TwoLayerA | ModelFamily::TwoLayerB => {
            let k = if recipe.family == ModelFamily::TwoLayerA { 5.0 } else { 30.0 };
            let bp = recipe.coeff_prob.unwrap_or_else(|| prob(k, p1));
            coeff.insert((0, 1), gen_sparse_coeff(p1, dims[1], bp, MAG_LOW, MAG_HIGH, 1.0, seed.derive(1))?);
            precisions.push(response_precision(1)?);
        }
        ModelFamily::ThreeLayer => {
            let (p2, p3) = (dims[1], dims[2]);
            let bxy = recipe.coeff_prob.unwrap_or_else(|| prob(5.0, p1));
            let bz = recipe.coeff_prob.unwrap_or_else(|| prob(5.0, p1 + p2));
            let s = recipe.signal_strength;
            coeff.insert((0, 1), gen_sparse_coeff(p1, p2, bxy, MAG_LOW, MAG_HIGH, 1.0, seed.derive(1))?);
            coeff.insert((0, 2), gen_sparse_coeff(p1, p3, bz, MAG_LOW, MAG_HIGH, s, seed.derive(2))?);
            coeff.insert((1, 2), gen_sparse_coeff(p2, p3, bz, MAG_LOW, MAG_HIGH, s, seed.derive(3))?);
            precisions.push(response_precision(1)?);
            precisions.push(response_precision(2)?);
        }
    }
    let truth = GroundTruth {
        layer_dims: dims,
        coeff,
        precisions,
    };
    truth.validate()?;
    Ok(truth)
}

/// Samples `n` observations from the structural equations and centers every layer.
pub fn gen_dataset<T: Real>(truth: &GroundTruth<T>, n: usize, seed: RngSeed) -> Result<LayeredDataset<T>> {
    gen_dataset_with(truth, n, seed, None)
}

/// [`gen_dataset`] with an optional nonparanormal perturbation of every response layer's errors.
///
/// Perturbed error columns are rescaled back to their original sample standard deviation so the
/// error precision stays comparable with the ground truth.
pub fn gen_dataset_with<T: Real>(
    truth: &GroundTruth<T>,
    n: usize,
    seed: RngSeed,
    perturbation: Option<NpnKind>,
) -> Result<LayeredDataset<T>> {
    truth.validate()?;
    if n == 0 {
        return Err(GgmError::EmptyData);
    }
    let mut raw: Vec<DenseMatrix<T>> = Vec::with_capacity(truth.num_layers());
    for (t, theta) in truth.precisions.iter().enumerate() {
        let sigma = theta.inverse();
        let mut layer = mvn_sample(&sigma, n, seed.derive(t as u64));
        if t > 0 {
            if let Some(kind) = perturbation {
                layer = perturb_errors(&layer, kind)?;
            }
            for (s, xs) in raw.iter().enumerate() {
                let contrib = xs.matmul(truth.coeff(s, t))?;
                layer = layer.add(&contrib)?;
            }
        }
        raw.push(layer);
    }
    Ok(LayeredDataset {
        layers: raw.iter().map(center_columns).collect(),
        n,
        seed,
        centered: true,
    })
}

fn column_sd<T: Real>(col: &[T]) -> T {
    let n = T::from_usize(col.len()).unwrap();
    let mean = col.iter().copied().sum::<T>() / n;
    (col.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n).sqrt()
}

fn perturb_errors<T: Real>(e: &DenseMatrix<T>, kind: NpnKind) -> Result<DenseMatrix<T>> {
    let mut out = npn_transform(e, kind)?;
    for j in 0..e.cols() {
        let sd = column_sd(&e.column(j));
        for i in 0..e.rows() {
            out[(i, j)] *= sd;
        }
    }
    Ok(out)
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks<T: Real>(col: &[T]) -> Vec<f64> {
    let n = col.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && col[order[j + 1]] == col[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Truncation level `1/(4 n^{1/4} √(π log n))` of the truncated transform.
pub fn npn_truncation_level(n: usize) -> f64 {
    let nf = n as f64;
    1.0 / (4.0 * nf.powf(0.25) * (std::f64::consts::PI * nf.ln()).sqrt())
}

/// Columnwise nonparanormal transform: ranks → empirical CDF (shrunken by `n/(n+1)` or clamped
/// to `[δ_n, 1 − δ_n]`) → standard normal quantile → centered, unit sample variance.
pub fn npn_transform<T: Real>(data: &DenseMatrix<T>, kind: NpnKind) -> Result<DenseMatrix<T>> {
    let (n, p) = data.shape();
    if n < 2 {
        return Err(GgmError::BadConfig("nonparanormal transform needs n >= 2".into()));
    }
    let normal = Normal::standard();
    let nf = n as f64;
    let delta = npn_truncation_level(n);
    let mut out = DenseMatrix::zeros(n, p);
    for j in 0..p {
        let ranks = average_ranks(&data.column(j));
        let q: Vec<f64> = ranks
            .iter()
            .map(|&r| {
                let u = match kind {
                    NpnKind::Shrunken => r / (nf + 1.0),
                    NpnKind::Truncated => (r / nf).clamp(delta, 1.0 - delta),
                };
                normal.inverse_cdf(u)
            })
            .collect();
        let mean = q.iter().sum::<f64>() / nf;
        let sd = (q.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf).sqrt();
        for (i, v) in q.iter().enumerate() {
            out[(i, j)] = if sd > 0.0 { T::lit((v - mean) / sd) } else { T::zero() };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub family: Option<ModelFamily>,
    pub dims: Vec<usize>,
    pub n: usize,
    pub seed: RngSeed,
    pub centered: bool,
    pub layer_files: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GgmError + '_ {
    move |source| GgmError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `layer_<m>.csv` per layer plus `manifest.json`.
pub fn write_dataset<T: Real>(dir: &Path, data: &LayeredDataset<T>, family: Option<ModelFamily>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    for (m, layer) in data.layers.iter().enumerate() {
        let name = format!("layer_{}.csv", m + 1);
        save_matrix(layer, &dir.join(&name))?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        family,
        dims: data.layer_dims(),
        n: data.n,
        seed: data.seed,
        centered: data.centered,
        layer_files: files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| GgmError::Parse(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_dataset<T: Real>(dir: &Path) -> Result<LayeredDataset<T>> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| GgmError::Parse(e.to_string()))?;
    let layers = manifest
        .layer_files
        .iter()
        .map(|f| load_matrix::<T>(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    if layers.iter().any(|l| l.rows() != manifest.n) {
        return Err(GgmError::ShapeMismatch("layer row counts disagree with manifest".into()));
    }
    let layers = if manifest.centered {
        layers
    } else {
        layers.iter().map(center_columns).collect()
    };
    Ok(LayeredDataset {
        layers,
        n: manifest.n,
        seed: manifest.seed,
        centered: true,
    })
}

/// Writes `B_<s>_<t>.csv` and `Theta_<m>.csv` (1-based layer numbers) plus `truth.json`.
pub fn write_truth<T: Real>(dir: &Path, truth: &GroundTruth<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = BTreeMap::new();
    for (&(s, t), b) in &truth.coeff {
        let name = format!("B_{}_{}.csv", s + 1, t + 1);
        save_matrix(b, &dir.join(&name))?;
        files.insert(name.clone(), name);
    }
    for (m, th) in truth.precisions.iter().enumerate() {
        let name = format!("Theta_{}.csv", m + 1);
        save_matrix(th.as_matrix(), &dir.join(&name))?;
        files.insert(name.clone(), name);
    }
    let manifest = serde_json::json!({
        "dims": truth.layer_dims,
        "files": files.keys().collect::<Vec<_>>(),
    });
    let path = dir.join("truth.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::sample_covariance;

    #[test]
    fn zero_probability_gives_zero_matrix() {
        let b: DenseMatrix<f64> = gen_sparse_coeff(5, 7, 0.0, 0.5, 1.0, 1.0, RngSeed(1)).unwrap();
        assert_eq!(b.count_nonzero(0.0), 0);
    }

    #[test]
    fn full_probability_respects_magnitude_band() {
        let b: DenseMatrix<f64> = gen_sparse_coeff(6, 6, 1.0, 0.999, 1.0, 2.0, RngSeed(2)).unwrap();
        assert!(b.as_slice().iter().all(|v| (1.998..=2.0).contains(&v.abs())));
    }

    #[test]
    fn nonzero_count_is_binomial() {
        let p = 200;
        let prob = 5.0 / 200.0;
        let sd = (40_000.0f64 * prob * (1.0 - prob)).sqrt();
        for s in 0..5 {
            let b: DenseMatrix<f64> = gen_sparse_coeff(p, p, prob, 0.5, 1.0, 1.0, RngSeed(s)).unwrap();
            let k = b.count_nonzero(0.0) as f64;
            assert!((k - 1000.0).abs() <= 3.0 * sd, "count {k}");
        }
    }

    #[test]
    fn precision_hits_the_condition_number() {
        let d: PrecisionDraw<f64> = gen_precision(4, 0.8, 4.0, 0.5, 1.0, RngSeed(3)).unwrap();
        let (lo, hi) = eig_extremes(d.theta.as_matrix()).unwrap();
        assert!((hi / lo - 4.0).abs() < 1e-6);
        let th = d.theta.as_matrix();
        assert!((0..4).all(|i| th[(i, i)] == d.diagonal));
    }

    #[test]
    fn empty_graph_precision_is_identity() {
        let d: PrecisionDraw<f64> = gen_precision(5, 0.0, 10.0, 0.5, 1.0, RngSeed(4)).unwrap();
        assert_eq!(d.theta.as_matrix(), &DenseMatrix::identity(5));
        assert_eq!(d.achieved_condition, 1.0);
        assert!(matches!(
            gen_precision::<f64>(5, 0.3, 1.0, 0.5, 1.0, RngSeed(4)),
            Err(GgmError::BadConfig(_))
        ));
    }

    #[test]
    fn datasets_are_deterministic_and_centered() {
        let recipe = ModelRecipe::two_layer_a(6, 8, 40);
        let truth: GroundTruth<f64> = build_truth(&recipe, RngSeed(5)).unwrap();
        let a = gen_dataset(&truth, 40, RngSeed(6)).unwrap();
        assert_eq!(a, gen_dataset(&truth, 40, RngSeed(6)).unwrap());
        for layer in &a.layers {
            for j in 0..layer.cols() {
                let m: f64 = layer.column(j).iter().sum::<f64>() / 40.0;
                assert!(m.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoupled_identity_model_has_unit_variances() {
        let truth = GroundTruth::<f64> {
            layer_dims: vec![3, 4],
            coeff: [((0, 1), DenseMatrix::zeros(3, 4))].into_iter().collect(),
            precisions: vec![SpdMatrix::identity(3), SpdMatrix::identity(4)],
        };
        let d = gen_dataset(&truth, 100, RngSeed(8)).unwrap();
        for layer in &d.layers {
            let c = sample_covariance(layer).unwrap();
            for v in c.diag() {
                assert!((0.8..=1.2).contains(&v), "variance {v}");
            }
        }
    }

    #[test]
    fn three_layer_truth_has_all_blocks() {
        let truth: GroundTruth<f64> = build_truth(&ModelRecipe::three_layer(5, 6, 7, 50, 2.0), RngSeed(1)).unwrap();
        assert_eq!(truth.coeff.len(), 3);
        assert_eq!(truth.stacked_coeff(2).unwrap().shape(), (11, 7));
        let b = truth.coeff(0, 2);
        assert!(b.as_slice().iter().all(|&v| v == 0.0 || (1.0..=2.0).contains(&v.abs())));
    }

    #[test]
    fn npn_shrunken_has_unit_variance_and_keeps_order() {
        let data = DenseMatrix::from_fn(25, 2, |i, j| ((i * 17 + j * 5) % 23) as f64 * 0.37 - 2.0);
        let out = npn_transform(&data, NpnKind::Shrunken).unwrap();
        for j in 0..2 {
            let col = out.column(j);
            let var = col.iter().map(|v| v * v).sum::<f64>() / 25.0;
            assert!((var - 1.0).abs() < 1e-8);
            let orig = data.column(j);
            for a in 0..25 {
                for b in 0..25 {
                    if orig[a] < orig[b] {
                        assert!(col[a] < col[b]);
                    }
                }
            }
        }
    }

    #[test]
    fn npn_truncated_respects_clamp() {
        let n = 100;
        let data = DenseMatrix::from_fn(n, 1, |i, _| (i as f64).powi(3));
        let delta = npn_truncation_level(n);
        let normal = Normal::standard();
        let u: Vec<f64> = (1..=n).map(|r| (r as f64 / n as f64).clamp(delta, 1.0 - delta)).collect();
        assert!(u.iter().all(|&v| (delta..=1.0 - delta).contains(&v)));
        let q: Vec<f64> = u.iter().map(|&v| normal.inverse_cdf(v)).collect();
        let m = q.iter().sum::<f64>() / n as f64;
        let sd = (q.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        let out = npn_transform(&data, NpnKind::Truncated).unwrap();
        for (i, qi) in q.iter().enumerate() {
            assert!((out[(i, 0)] - (qi - m) / sd).abs() < 1e-12);
        }
    }
}
