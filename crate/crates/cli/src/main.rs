use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layered_ggm::multilayer::write_estimate;
use layered_ggm::simgen::{read_dataset, write_dataset, write_truth};
use layered_ggm::twolayer::UpdateMode;
use layered_ggm::{GgmError, Result};
use layered_ggm_cli::{
    emit_report, exit_code, fit_dataset, run_experiment, simulate, tune_dataset, write_bic_table, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "layered-ggm", version, about = "Multi-layer Gaussian graphical model estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a ground truth and a dataset from the config's recipe.
    Generate(Common),
    /// Fit a single dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Directory written by `generate` (manifest.json plus layer files).
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a replicated simulation study.
    Experiment(Common),
    /// BIC grid search over (lambda, rho) for every stage of a dataset.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to LAYERED_GGM_THREADS, then the config.
    #[arg(long)]
    threads: Option<usize>,
    /// exact2block, p2plus1 or parallel.
    #[arg(long)]
    mode: Option<UpdateMode>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, need_config: bool) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None if need_config => return Err(GgmError::BadConfig("--config is required".into())),
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.base_seed = s;
        }
        let env_threads = match std::env::var("LAYERED_GGM_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| GgmError::BadConfig(format!("LAYERED_GGM_THREADS='{v}' is not a count")))?,
            ),
            Err(_) => None,
        };
        if let Some(t) = self.threads.or(env_threads) {
            cfg.threads = Some(t);
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn with_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        Some(t) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| GgmError::BadConfig(e.to_string()))?
            .install(f)),
        None => Ok(f()),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json") + "\n").map_err(|source| GgmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.resolve(true)?;
            let (truth, data) = simulate(&cfg.recipe, cfg.base_seed)?;
            write_truth(&cfg.output_dir.join("truth"), &truth)?;
            write_dataset(&cfg.output_dir.join("data"), &data, Some(cfg.recipe.family))?;
            log::info!("wrote {}", cfg.output_dir.display());
        }
        Command::Fit { common, data } => {
            let cfg = common.resolve(false)?;
            let dataset = read_dataset::<f64>(&data)?;
            let est = with_pool(cfg.threads, || fit_dataset(&cfg, &dataset, cfg.base_seed))??;
            write_estimate(&cfg.output_dir, &est)?;
        }
        Command::Experiment(common) => {
            let cfg = common.resolve(true)?;
            let outcome = run_experiment(&cfg)?;
            emit_report(&outcome, &cfg.output_dir)?;
            for (r, e) in &outcome.failures {
                eprintln!("replication {r} failed: {e}");
            }
        }
        Command::Tune { common, data } => {
            let cfg = common.resolve(false)?;
            let dataset = read_dataset::<f64>(&data)?;
            let tables = with_pool(cfg.threads, || tune_dataset(&cfg, &dataset))??;
            fs::create_dir_all(&cfg.output_dir).map_err(|source| GgmError::Io {
                path: cfg.output_dir.clone(),
                source,
            })?;
            write_bic_table(&cfg.output_dir.join("bic_table.csv"), tables.iter().map(|(t, o)| (*t, o)))?;
            let chosen: Vec<_> = tables
                .iter()
                .map(|(t, o)| serde_json::json!({ "layer": t + 1, "lambda": o.lambda_star, "rho": o.rho_star }))
                .collect();
            write_json(&cfg.output_dir.join("tuning.json"), &serde_json::json!({ "stages": chosen }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
