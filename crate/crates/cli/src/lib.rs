//! Replicated simulation studies: configuration, the replication runner and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use layered_ggm::evalkit::{support_metrics, MetricsReport};
use layered_ggm::multilayer::{decompose, fit_multilayer, MultiLayerEstimate};
use layered_ggm::numkit::RngSeed;
use layered_ggm::simgen::{build_truth, gen_dataset_with, GroundTruth, LayeredDataset, ModelRecipe};
use layered_ggm::screening::screen;
use layered_ggm::tuning::{grid_search, GridSpec, TuningGrid, TuningOutcome};
use layered_ggm::twolayer::{Moments, PenaltyConfig, TwoLayerConfig, UpdateMode};
use layered_ggm::{GgmError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

fn default_replications() -> usize {
    10
}

fn default_alpha() -> f64 {
    0.1
}

fn default_n_boot() -> usize {
    50
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_grid_points() -> usize {
    6
}

/// Penalty settings. `lambda` and `rho` together fix the penalties; otherwise they are tuned by
/// BIC over `lambdas × rhos`, or over the default grid with `grid_points` values per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySection {
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub lambda0: Option<f64>,
    #[serde(default)]
    pub rho_tilde: Option<f64>,
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub rhos: Option<Vec<f64>>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Bottom-layer graphical Lasso penalty; chosen by BIC when absent.
    #[serde(default)]
    pub bottom_rho: Option<f64>,
    #[serde(default)]
    pub outer_tol: Option<f64>,
    #[serde(default)]
    pub max_outer: Option<usize>,
}

impl Default for PenaltySection {
    fn default() -> Self {
        Self {
            lambda: None,
            rho: None,
            lambda0: None,
            rho_tilde: None,
            lambdas: None,
            rhos: None,
            grid_points: default_grid_points(),
            bottom_rho: None,
            outer_tol: None,
            max_outer: None,
        }
    }
}

impl PenaltySection {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_some() != self.rho.is_some() {
            return Err(GgmError::BadConfig("give both lambda and rho, or neither".into()));
        }
        if self.lambdas.is_some() != self.rhos.is_some() {
            return Err(GgmError::BadConfig("give both lambdas and rhos, or neither".into()));
        }
        if self.lambda.is_some() && self.lambdas.is_some() {
            return Err(GgmError::BadConfig("fixed penalties and an explicit grid are exclusive".into()));
        }
        if self.grid_points == 0 {
            return Err(GgmError::BadConfig("grid_points must be positive".into()));
        }
        if let (Some(l), Some(r)) = (&self.lambdas, &self.rhos) {
            TuningGrid::new(l.clone(), r.clone())?;
        }
        self.penalty(UpdateMode::default()).validate()
    }

    pub fn penalty(&self, mode: UpdateMode) -> PenaltyConfig<f64> {
        let mut p = PenaltyConfig::new(self.lambda.unwrap_or(0.0), self.rho.unwrap_or(0.0)).with_mode(mode);
        p.lambda0 = self.lambda0;
        p.rho_tilde = self.rho_tilde;
        if let Some(t) = self.outer_tol {
            p.outer_tol = t;
        }
        if let Some(m) = self.max_outer {
            p.max_outer = m;
        }
        p
    }

    /// `None` when the penalties are fixed.
    pub fn grid(&self) -> Option<GridSpec<f64>> {
        if self.lambda.is_some() {
            return None;
        }
        Some(match (&self.lambdas, &self.rhos) {
            (Some(l), Some(r)) => GridSpec::Explicit(TuningGrid {
                lambdas: l.clone(),
                rhos: r.clone(),
            }),
            _ => GridSpec::Default { points: self.grid_points },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub recipe: ModelRecipe,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub penalties: PenaltySection,
    #[serde(default = "default_alpha")]
    pub screening_alpha: f64,
    #[serde(default)]
    pub mode: UpdateMode,
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; `None` leaves the choice to the runtime.
    #[serde(default)]
    pub threads: Option<usize>,
}

/// Model A at (30, 60, 100).
impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::new(ModelRecipe::two_layer_a(30, 60, 100))
    }
}

impl ExperimentConfig {
    pub fn new(recipe: ModelRecipe) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            recipe,
            replications: default_replications(),
            base_seed: 0,
            penalties: PenaltySection::default(),
            screening_alpha: default_alpha(),
            mode: UpdateMode::default(),
            n_boot: default_n_boot(),
            output_dir: default_output_dir(),
            threads: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| GgmError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| GgmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(GgmError::BadConfig(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.replications == 0 {
            return Err(GgmError::BadConfig("replications must be at least 1".into()));
        }
        if self.n_boot == 0 {
            return Err(GgmError::BadConfig("n_boot must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(GgmError::BadConfig("threads must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.screening_alpha) {
            return Err(GgmError::BadConfig("screening_alpha must lie in [0, 1]".into()));
        }
        self.recipe.validate()?;
        self.penalties.validate()
    }

    pub fn seed_of(&self, replication: usize) -> u64 {
        self.base_seed.wrapping_add(replication as u64)
    }

    pub fn two_layer_config(&self, seed: u64) -> TwoLayerConfig<f64> {
        let mut c = TwoLayerConfig::new(self.penalties.penalty(self.mode));
        c.screening_alpha = self.screening_alpha;
        c.stability.n_boot = self.n_boot;
        c.stability.seed = RngSeed(seed).derive(2);
        c
    }
}

/// Ground truth and data of replication seed `seed`.
pub fn simulate(recipe: &ModelRecipe, seed: u64) -> Result<(GroundTruth<f64>, LayeredDataset<f64>)> {
    let truth = build_truth(recipe, RngSeed(seed))?;
    let data = gen_dataset_with(&truth, recipe.n, RngSeed(seed).derive(1), recipe.perturbation)?;
    Ok((truth, data))
}

/// Fits a dataset with the penalties, mode and stability settings of `cfg`.
pub fn fit_dataset(cfg: &ExperimentConfig, data: &LayeredDataset<f64>, seed: u64) -> Result<MultiLayerEstimate<f64>> {
    let grid = cfg.penalties.grid();
    fit_multilayer(data, &cfg.two_layer_config(seed), grid.as_ref(), cfg.penalties.bottom_rho)
}

/// Screening plus the BIC grid search for every two-layer stage, without the final fits.
/// Uses the default grid when the config fixes the penalties.
pub fn tune_dataset(cfg: &ExperimentConfig, data: &LayeredDataset<f64>) -> Result<Vec<(usize, TuningOutcome<f64>)>> {
    let spec = cfg.penalties.grid().unwrap_or(GridSpec::Default {
        points: cfg.penalties.grid_points,
    });
    let penalty = cfg.penalties.penalty(cfg.mode);
    decompose(data)?
        .into_par_iter()
        .filter_map(|stage| stage.design.map(|x| (stage.target, x, stage.response)))
        .map(|(t, x, y)| {
            let grid = spec.resolve(x.cols(), y.cols(), x.rows());
            let supports = screen(&x, &y, cfg.screening_alpha)?;
            let m = Moments::new(&x, &y)?;
            Ok((t, grid_search(&m, &supports, &grid, &penalty)?))
        })
        .collect()
}

/// One table for all layers, 1-based `layer` column first.
pub fn write_bic_table<'a>(path: &Path, tables: impl IntoIterator<Item = (usize, &'a TuningOutcome<f64>)>) -> Result<()> {
    let mut rows = Vec::new();
    for (t, tuning) in tables {
        for r in &tuning.table {
            rows.push(vec![
                (t + 1).to_string(),
                r.lambda.to_string(),
                r.rho.to_string(),
                r.bic.to_string(),
                r.b_nnz.to_string(),
                r.theta_nnz.to_string(),
                r.iterations.to_string(),
                r.converged.to_string(),
            ]);
        }
    }
    write_csv(
        path,
        &["layer", "lambda", "rho", "bic", "b_nnz", "theta_nnz", "iterations", "converged"],
        rows,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub replication: usize,
    pub seed: u64,
    /// `B_<s>_<t>` or `Theta_<m>`, 1-based layers.
    pub block: String,
    pub report: MetricsReport,
}

/// Metrics of every regression block and of every precision block with a nontrivial truth.
pub fn score(truth: &GroundTruth<f64>, est: &MultiLayerEstimate<f64>) -> Result<Vec<(String, MetricsReport)>> {
    let mut out = Vec::new();
    for (&(s, t), b) in &truth.coeff {
        let hat = est
            .coeff_hat
            .get(&(s, t))
            .ok_or_else(|| GgmError::ShapeMismatch(format!("no estimate for block ({s}, {t})")))?;
        out.push((format!("B_{}_{}", s + 1, t + 1), support_metrics(hat, b, false)?));
    }
    for (m, theta) in truth.precisions.iter().enumerate() {
        let th = theta.as_matrix();
        let p = th.rows();
        let has_edges = (0..p).any(|i| (0..p).any(|j| i != j && th[(i, j)] != 0.0));
        if m == 0 && !has_edges {
            continue;
        }
        let hat = est
            .precision_hat
            .get(&m)
            .ok_or_else(|| GgmError::ShapeMismatch(format!("no precision estimate for layer {m}")))?;
        out.push((format!("Theta_{}", m + 1), support_metrics(hat.as_matrix(), th, true)?));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ReplicationResult {
    pub replication: usize,
    pub seed: u64,
    pub blocks: Vec<(String, MetricsReport)>,
    pub estimate: MultiLayerEstimate<f64>,
}

pub fn run_replication(cfg: &ExperimentConfig, replication: usize) -> Result<ReplicationResult> {
    let seed = cfg.seed_of(replication);
    let (truth, data) = simulate(&cfg.recipe, seed)?;
    let estimate = fit_dataset(cfg, &data, seed)?;
    Ok(ReplicationResult {
        replication,
        seed,
        blocks: score(&truth, &estimate)?,
        estimate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (`n − 1` divisor); zero for a single value.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    /// Successful replications in index order.
    pub results: Vec<ReplicationResult>,
    pub failures: Vec<(usize, String)>,
}

impl ExperimentOutcome {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.results
            .iter()
            .flat_map(|r| {
                r.blocks.iter().map(move |(block, report)| MetricsRow {
                    replication: r.replication,
                    seed: r.seed,
                    block: block.clone(),
                    report: report.clone(),
                })
            })
            .collect()
    }

    /// `block → metric → (mean, sd)` over the successful replications.
    pub fn summary(&self) -> BTreeMap<String, BTreeMap<&'static str, MeanSd>> {
        let mut by_block: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
        for row in self.rows() {
            by_block.entry(row.block).or_default().push(row.report);
        }
        by_block
            .into_iter()
            .map(|(block, reports)| {
                let pick = |f: fn(&MetricsReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
                let metrics = BTreeMap::from([
                    ("sen", pick(|r| r.sen)),
                    ("spe", pick(|r| r.spe)),
                    ("mcc", pick(|r| r.mcc)),
                    ("rel_fnorm", pick(|r| r.rel_fnorm)),
                ]);
                (block, metrics)
            })
            .collect()
    }

    pub fn mean(&self, block: &str, metric: &str) -> Option<f64> {
        self.summary().get(block)?.get(metric).map(|m| m.mean)
    }
}

/// Runs every replication (replication `r` uses seed `base_seed + r`) on a pool of
/// `cfg.threads` workers. Failed replications are logged and skipped; half or more failing is an
/// error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let run = || {
        (0..cfg.replications)
            .into_par_iter()
            .map(|r| (r, run_replication(cfg, r)))
            .collect::<Vec<_>>()
    };
    let all = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| GgmError::BadConfig(e.to_string()))?
            .install(run),
        None => run(),
    };
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in all {
        match res {
            Ok(v) => results.push(v),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push((r, e.to_string()));
            }
        }
    }
    failure_gate(failures.len(), cfg.replications)?;
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        results,
        failures,
    })
}

/// An experiment fails as a whole once half or more of its replications failed.
pub fn failure_gate(failed: usize, total: usize) -> Result<()> {
    if total == 0 || 2 * failed >= total {
        return Err(GgmError::ExperimentFailed { failed, total });
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GgmError {
    let path = path.to_path_buf();
    move |source| GgmError::Io { path, source }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> GgmError {
    let path = path.to_path_buf();
    move |e| GgmError::Csv {
        path: path.clone(),
        message: e.to_string(),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(header).map_err(&err)?;
    for r in rows {
        w.write_record(&r).map_err(&err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `metrics.csv`, `summary.json`, `trace.csv` (replication 0, or the first success) and
/// `bic_table.csv` when tuning ran.
pub fn emit_report(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    let rows = outcome.rows();
    if rows.is_empty() {
        return Err(GgmError::BadConfig("no metrics to report".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let metrics = rows
        .iter()
        .map(|r| {
            let m = &r.report;
            vec![
                r.replication.to_string(),
                r.seed.to_string(),
                r.block.clone(),
                m.sen.to_string(),
                m.spe.to_string(),
                m.mcc.to_string(),
                m.rel_fnorm.to_string(),
                m.tp.to_string(),
                m.fp.to_string(),
                m.tn.to_string(),
                m.fn_.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("metrics.csv"),
        &["replication", "seed", "block", "sen", "spe", "mcc", "rel_fnorm", "tp", "fp", "tn", "fn"],
        metrics,
    )?;

    let failures: Vec<_> = outcome
        .failures
        .iter()
        .map(|(r, e)| serde_json::json!({ "replication": r, "error": e }))
        .collect();
    let summary = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "replications": outcome.config.replications,
        "succeeded": outcome.results.len(),
        "base_seed": outcome.config.base_seed,
        "sd_convention": "sample standard deviation, n - 1 divisor",
        "failures": failures,
        "blocks": outcome.summary(),
    });
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("json") + "\n").map_err(io_err(&path))?;

    let first = &outcome.results[0];
    let mut trace = Vec::new();
    for (t, stage) in &first.estimate.per_stage {
        for (k, (f, (bn, tn))) in stage.objective_trace.iter().zip(&stage.card_trace).enumerate() {
            trace.push(vec![(t + 1).to_string(), k.to_string(), f.to_string(), bn.to_string(), tn.to_string()]);
        }
    }
    write_csv(&dir.join("trace.csv"), &["layer", "iteration", "objective", "b_nnz", "theta_nnz"], trace)?;
    let tables: Vec<_> = first
        .estimate
        .per_stage
        .iter()
        .filter_map(|(&t, s)| s.tuning.as_ref().map(|o| (t, o)))
        .collect();
    if !tables.is_empty() {
        write_bic_table(&dir.join("bic_table.csv"), tables)?;
    }
    Ok(())
}

/// Process exit code of an error: 3 for numerical failures, 2 otherwise.
pub fn exit_code(err: &GgmError) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}
