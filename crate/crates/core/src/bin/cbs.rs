use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cbs_core::baselines::StrategyKind;
use cbs_core::config::{RunConfig, CONFIG_SCHEMA_VERSION};
use cbs_core::datagen::{generate, WorldConfig};
use cbs_core::error::{CbsError, Result};
use cbs_core::features::{load_features, save_features, FeatureStore};
use cbs_core::learner::{MemoryBuffer, PrototypeClassifier};
use cbs_core::protocol::{
    discovery_ratio, imbalance_ratio, per_class_counts, run_with_state, select_for_session,
    selected_vs_full_kl, Oracle, RunReport, SessionContext, SessionPlan,
};
use cbs_core::selection::cbs_select;
use cbs_core::sweep::{
    reports_to_csv, sweep, write_atomic, write_summary, SweepOptions, SweepSpec,
};

static VERSION: LazyLock<String> = LazyLock::new(|| {
    format!(
        "{} (config schema {CONFIG_SCHEMA_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
});

#[derive(Parser)]
#[command(
    name = "cbs",
    version,
    about = "Class-balanced selection and incremental-learning simulation on feature vectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: features CSV plus session plan.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_features: PathBuf,
        #[arg(long)]
        out_plan: PathBuf,
        /// Overrides the seed in the world config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Select samples from one pool.
    Select {
        #[arg(long)]
        features: PathBuf,
        /// Number of classes (clusters) in the pool.
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "cbs")]
        strategy: StrategyKind,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the multi-session protocol with one strategy.
    Simulate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "cbs")]
        strategy: StrategyKind,
        /// Overrides the plan's budget.
        #[arg(long)]
        budget: Option<usize>,
        /// Overrides the plan's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        use_unlabeled_distributions: bool,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the final memory buffer.
        #[arg(long)]
        buffer_out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run every strategy × budget × seed combination.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<StrategyKind>,
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Worker threads (0 = one per core).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Flatten run reports to CSV or re-emit them as JSON.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file with run configuration overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, `key=value`; repeatable. Applied after CBS_* variables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_env(std::env::vars())?;
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().version(VERSION.as_str()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Generate {
            config,
            out_features,
            out_plan,
            seed,
        } => {
            let mut world = WorldConfig::load(&config)?;
            if let Some(seed) = seed {
                world.seed = seed;
            }
            let (store, plan) = generate(&world)?;
            save_features(&store, &out_features)?;
            write_text(&out_plan, &plan.to_json()?)?;
            eprintln!(
                "generated {} samples in {} sessions",
                store.len(),
                plan.sessions.len()
            );
        }
        Command::Select {
            features,
            classes,
            budget,
            seed,
            strategy,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let store = load_features(&features)?.l2_normalize()?;
            write_text(
                &out,
                &select(&store, classes, budget, seed, strategy, &cfg)?,
            )?;
        }
        Command::Simulate {
            plan,
            features,
            strategy,
            budget,
            seed,
            use_unlabeled_distributions,
            out,
            buffer_out,
            config,
        } => {
            let mut cfg = config.resolve()?;
            cfg.use_unlabeled_distributions |= use_unlabeled_distributions;
            let mut plan = SessionPlan::load(&plan)?;
            if let Some(b) = budget {
                plan.budget = b;
            }
            if let Some(s) = seed {
                plan.seed = s;
            }
            let store = load_features(&features)?;
            let mut output = run_with_state(&plan, &store, strategy, &cfg)?;
            output.report.stamp_now();
            write_text(&out, &output.report.to_json()?)?;
            if let Some(path) = buffer_out {
                write_text(&path, &output.buffer.to_json()?)?;
            }
            eprintln!("avg accuracy {:.4}", output.report.avg);
        }
        Command::Sweep {
            plan,
            features,
            strategies,
            budgets,
            seeds,
            out_dir,
            workers,
            config,
        } => {
            let cfg = config.resolve()?;
            let plan = SessionPlan::load(&plan)?;
            let store = load_features(&features)?;
            let spec = SweepSpec {
                strategies,
                budgets,
                seeds,
            };
            let outcome = sweep(
                &plan,
                &store,
                &spec,
                &cfg,
                &SweepOptions {
                    workers,
                    cell_dir: Some(out_dir.join("cells")),
                },
            )?;
            write_summary(&outcome, &spec, &out_dir)?;
            let failures = outcome.failures();
            if !failures.is_empty() {
                for f in &failures {
                    eprintln!("cell {} failed: {}", f.key.file_name(), f.error);
                }
                eprintln!("{} of {} cells failed", failures.len(), outcome.cells.len());
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report {
            inputs,
            format,
            out,
        } => {
            let reports: Vec<RunReport> =
                inputs.iter().map(RunReport::load).collect::<Result<_>>()?;
            let text = match format {
                Format::Csv => reports_to_csv(&reports)?,
                Format::Json if reports.len() == 1 => reports[0].to_json()?,
                Format::Json => serde_json::to_string_pretty(&reports)?,
            };
            match out {
                Some(path) => write_text(&path, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn select(
    store: &FeatureStore,
    classes: usize,
    budget: usize,
    seed: u64,
    strategy: StrategyKind,
    cfg: &RunConfig,
) -> Result<String> {
    let oracle = Oracle::from_store(store)?;
    let (selection, mut diagnostics) = if strategy == StrategyKind::Cbs {
        let outcome = cbs_select(store, classes, budget, seed, 0, &cfg.selection_params())?;
        let diag = json!({
            "strategy": strategy,
            "seed": seed,
            "budget": outcome.budget,
            "clustering": outcome.clustering,
        });
        (outcome.selection, diag)
    } else {
        let class_space: BTreeSet<_> = (0..classes as u32).collect();
        let clf = PrototypeClassifier::new(store.dim(), cfg.temperature)?;
        let buffer = MemoryBuffer::new();
        let selection = select_for_session(
            strategy,
            &SessionContext {
                pool: store,
                class_space: &class_space,
                budget,
                seed,
                session: 0,
                config: cfg,
                classifier: &clf,
                buffer: &buffer,
                oracle: &oracle,
            },
        )?;
        (selection, json!({ "strategy": strategy, "seed": seed }))
    };
    if store.has_labels() {
        let space: Vec<u32> = store
            .ids()
            .iter()
            .filter_map(|&id| oracle.label(id).ok())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let counts = per_class_counts(&selection.ids, &space, &oracle)?;
        let ratio = imbalance_ratio(&counts);
        diagnostics["per_class_counts"] = json!(counts);
        diagnostics["imbalance_ratio"] = if ratio.is_finite() {
            json!(ratio)
        } else {
            json!(null)
        };
        diagnostics["undiscovered_class"] = json!(!ratio.is_finite());
        diagnostics["discovery_ratio"] = json!(discovery_ratio(&counts));
        diagnostics["per_class_kl"] = json!(selected_vs_full_kl(
            &selection.ids,
            store,
            &oracle,
            cfg.var_floor
        )?);
    }
    Ok(serde_json::to_string_pretty(&json!({
        "ids": selection.ids,
        "per_cluster": selection.per_cluster,
        "discarded": selection.discarded,
        "diagnostics": diagnostics,
    }))?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CbsError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    write_atomic(path, text.as_bytes())
}
