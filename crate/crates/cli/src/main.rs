use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use elicit_core::catalog::{build_cav_training_set, load_catalog, load_tags};
use elicit_core::cav::{save_cavs, train_cav, CavTrainConfig};
use elicit_sim::env::{write_environment, CAVS_FILE};
use elicit_sim::experiment::{run_experiment, EnvironmentConfig, ExperimentConfig};
use elicit_sim::report::{rereport, write_reports};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "elicit", version, about = "Preference elicitation with soft attributes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON, same fields as ExperimentConfig).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an environment and write catalog, CAV, user and tag files.
    GenEnv {
        #[command(flatten)]
        common: Common,
    },
    /// Train CAVs from a tag file and a catalog.
    TrainCav {
        #[arg(long)]
        tags: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        /// CavTrainConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Response noise σ_g stored with every CAV.
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run an experiment and write traces and aggregate CSVs.
    Run {
        #[command(flatten)]
        common: Common,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Re-aggregate stored traces (runs.json files or directories).
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Serve interactive sessions over HTTP.
    Serve {
        /// Directory with catalog.jsonl (and optional cavs.jsonl, prior.json) or one subdirectory per set.
        #[arg(long, default_value = ".")]
        data_dir: PathBuf,
        /// Port; falls back to $PORT, then 8080.
        #[arg(long)]
        port: Option<u16>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn gen_env(common: Common) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref(), None)?;
    if let Some(s) = common.seed {
        match &mut cfg.environment {
            EnvironmentConfig::Synthetic(c) => c.seed = s,
            EnvironmentConfig::Recsim(c) => c.seed = s,
            EnvironmentConfig::Files { .. } => {}
        }
    }
    if matches!(cfg.environment, EnvironmentConfig::Files { .. }) {
        bail!("gen-env needs a synthetic or recsim environment config");
    }
    let env = cfg.environment.build(cfg.n_users)?;
    print_paths(&write_environment(&env, &common.out)?);
    Ok(())
}

fn train(tags: &Path, catalog: &Path, config: Option<&Path>, sigma: f64, out: &Path) -> Result<()> {
    let catalog = load_catalog(catalog)?;
    let tags = load_tags(tags)?;
    let cfg: CavTrainConfig = match config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => CavTrainConfig::default(),
    };
    let mut cavs = Vec::new();
    for tag in tags.tag_ids() {
        let data = build_cav_training_set(&tags, &catalog, tag)?;
        if !data.has_both_labels() {
            eprintln!("skipping `{tag}`: needs positive and negative examples");
            continue;
        }
        cavs.push(train_cav(tag, &data, &cfg, sigma)?);
    }
    if cavs.is_empty() {
        bail!("no tag could be trained");
    }
    std::fs::create_dir_all(out)?;
    let path = out.join(CAVS_FILE);
    save_cavs(&cavs, &path)?;
    print_paths(&[path]);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenEnv { common } => gen_env(common),
        Command::TrainCav {
            tags,
            catalog,
            config,
            sigma,
            out,
        } => train(&tags, &catalog, config.as_deref(), sigma, &out),
        Command::Run { common, workers } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let result = run_experiment(&cfg, workers)?;
            print_paths(&write_reports(&result, &common.out)?);
            Ok(())
        }
        Command::Report { inputs, out } => {
            print_paths(&rereport(&inputs, &out)?);
            Ok(())
        }
        Command::Serve { data_dir, port } => {
            let state = elicit_service::AppState::open(&data_dir)?;
            let port = port.unwrap_or_else(elicit_service::port_from_env);
            eprintln!("serving {} catalog set(s) on port {port}", state.set_names().len());
            tokio::runtime::Runtime::new()?.block_on(elicit_service::serve(state, port))?;
            Ok(())
        }
    }
}
