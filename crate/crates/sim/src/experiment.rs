//! Experiment configuration, single-session runs and parallel experiments.

use crate::env::{gen_recsim_env, gen_synthetic_env, Environment, RecsimEnvConfig, SimUser, SyntheticEnvConfig};
use crate::metrics::{cosine_metric, ndcg_metric, query_ndcg_metric};
use crate::{io_err, Result, SimError};
use elicit_core::acquisition::AcquisitionConfig;
use elicit_core::belief::PosteriorMethod;
use elicit_core::catalog::load_catalog;
use elicit_core::cav::{load_cavs, make_uncertainty_suite, sample_cav, CavBelief};
use elicit_core::optimizer::OptimizerConfig;
use elicit_core::response::{simulate_response, QueryType, QueryWire, ResponseModel, ResponseWire, Semantics};
use elicit_core::rng::{derive_seed, rng_from_seed, str_key};
use elicit_core::session::{Elicitor, ElicitorConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentConfig {
    Synthetic(SyntheticEnvConfig),
    Recsim(RecsimEnvConfig),
    /// Files written by `gen-env`: a catalog, a CAV file and a users file.
    Files {
        catalog: PathBuf,
        cavs: PathBuf,
        users: PathBuf,
    },
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self::Synthetic(SyntheticEnvConfig::default())
    }
}

impl EnvironmentConfig {
    /// Builds the environment with at least `n_users` users.
    pub fn build(&self, n_users: usize) -> Result<Environment> {
        match self {
            EnvironmentConfig::Synthetic(c) => gen_synthetic_env(c, n_users),
            EnvironmentConfig::Recsim(c) => Ok(gen_recsim_env(c)?.env),
            EnvironmentConfig::Files { catalog, cavs, users } => {
                let catalog = load_catalog(catalog)?;
                let cavs = load_cavs(cavs)?;
                let text = std::fs::read_to_string(users).map_err(io_err(users))?;
                let users = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(SimUser::from_json)
                    .collect::<Result<Vec<_>>>()?;
                Ok(Environment {
                    catalog: Arc::new(catalog),
                    cavs,
                    users,
                    tags: None,
                })
            }
        }
    }
}

/// How CAV uncertainty enters a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CavUncertainty {
    /// Users and the RS share the point CAVs.
    #[default]
    Off,
    /// Users draw a CAV from `P_g` per query; the RS models `P_g`.
    Modeled,
    /// Users draw from `P_g`; the RS treats the mean CAV as exact.
    Mismodeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub environment: EnvironmentConfig,
    pub query_type: QueryType,
    pub response_model: ResponseModel,
    pub posterior: PosteriorMethod,
    pub acquisition: AcquisitionConfig,
    /// `slate_size` and `query_type` here are overridden by the top-level fields.
    pub optimizer: OptimizerConfig,
    pub n_queries: usize,
    pub slate_size: usize,
    pub n_users: usize,
    pub n_seeds: usize,
    pub cav_uncertainty: CavUncertainty,
    /// `[σ_lo, σ_hi]` for the log-spread CAV uncertainty suite.
    pub uncertainty_range: [f64; 2],
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            environment: EnvironmentConfig::default(),
            query_type: QueryType::Ipa,
            response_model: ResponseModel::default(),
            posterior: PosteriorMethod::default(),
            acquisition: AcquisitionConfig::default(),
            optimizer: OptimizerConfig::default(),
            n_queries: 10,
            slate_size: 5,
            n_users: 10,
            n_seeds: 5,
            cav_uncertainty: CavUncertainty::Off,
            uncertainty_range: [0.01, 1.0],
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 {
            return Err(SimError::Config("n_queries must be at least 1".into()));
        }
        if self.n_users == 0 || self.n_seeds == 0 {
            return Err(SimError::Config("n_users and n_seeds must be at least 1".into()));
        }
        let [lo, hi] = self.uncertainty_range;
        if self.cav_uncertainty != CavUncertainty::Off && !(lo > 0.0 && lo <= hi) {
            return Err(SimError::Config(format!("uncertainty_range needs 0 < lo ≤ hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// FNV hash of the compact JSON form, as 16 hex digits.
    pub fn hash(&self) -> String {
        format!("{:016x}", str_key(&serde_json::to_string(self).expect("config serializes")))
    }

    pub fn elicitor_config(&self) -> ElicitorConfig {
        ElicitorConfig {
            model: self.response_model.clone(),
            posterior: self.posterior.clone(),
            acquisition: self.acquisition.clone(),
            optimizer: OptimizerConfig {
                slate_size: self.slate_size,
                query_type: self.query_type,
                ..self.optimizer.clone()
            },
        }
    }

    /// Seed of the `(user, seed_index)` session; independent of `n_seeds`.
    pub fn session_seed(&self, user: usize, seed_index: usize) -> u64 {
        derive_seed(self.seed, &[user as u64, seed_index as u64])
    }
}

/// The RS's semantics and the per-tag distributions users draw CAVs from.
#[derive(Debug, Clone)]
pub struct SessionSemantics {
    pub semantics: Arc<Semantics>,
    /// `None` means users answer with the RS's point CAVs.
    pub user_cavs: Option<Vec<CavBelief>>,
}

impl SessionSemantics {
    pub fn build(env: &Environment, cfg: &ExperimentConfig) -> Result<Self> {
        let [lo, hi] = cfg.uncertainty_range;
        let suite = || make_uncertainty_suite(&env.cavs, lo, hi, derive_seed(cfg.seed, &[0x5E7]));
        Ok(match cfg.cav_uncertainty {
            CavUncertainty::Off => Self {
                semantics: Arc::new(Semantics::from_cavs(&env.cavs)?),
                user_cavs: None,
            },
            CavUncertainty::Modeled => {
                let s = suite()?;
                Self {
                    semantics: Arc::new(Semantics::from_beliefs(&s)?),
                    user_cavs: Some(s),
                }
            }
            CavUncertainty::Mismodeled => Self {
                semantics: Arc::new(Semantics::from_cavs(&env.cavs)?),
                user_cavs: Some(suite()?),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub step: usize,
    pub query: QueryWire,
    pub response: ResponseWire,
    pub cosine: f64,
    pub ndcg: f64,
    pub query_ndcg: f64,
    /// Excluded from report files so identical runs stay byte-identical.
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub user: usize,
    pub seed_index: usize,
    pub seed: u64,
    /// Metrics of the prior, before any query.
    pub initial_cosine: f64,
    pub initial_ndcg: f64,
    /// Set when some posterior mean was zero and its cosine reported as 0.
    pub degenerate_cosine: bool,
    pub trace: Vec<QueryRecord>,
}

impl RunRecord {
    /// Cosine after `k` queries (`k = 0` is the prior).
    pub fn cosine_at(&self, k: usize) -> f64 {
        if k == 0 {
            self.initial_cosine
        } else {
            self.trace[k - 1].cosine
        }
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        if k == 0 {
            self.initial_ndcg
        } else {
            self.trace[k - 1].ndcg
        }
    }

    pub fn final_cosine(&self) -> f64 {
        self.cosine_at(self.trace.len())
    }

    pub fn final_ndcg(&self) -> f64 {
        self.ndcg_at(self.trace.len())
    }
}

/// One seeded elicitation session against `user`.
pub fn run_session(
    env: &Environment,
    semantics: &SessionSemantics,
    user_index: usize,
    cfg: &ExperimentConfig,
    seed_index: usize,
) -> Result<RunRecord> {
    let user = env.user(user_index)?;
    let seed = cfg.session_seed(user_index, seed_index);
    let wrap = |step: usize| {
        move |source: elicit_core::Error| SimError::Session {
            user: user_index,
            seed_index,
            step,
            source,
        }
    };
    let mut elicitor = Elicitor::new(
        env.catalog.clone(),
        semantics.semantics.clone(),
        user.prior.clone(),
        cfg.elicitor_config(),
        derive_seed(seed, &[1]),
    )
    .map_err(wrap(0))?;
    let catalog = env.catalog.as_ref();
    let truth = &user.truth.utility;
    let mean = elicitor.belief().mean();
    let (initial_cosine, mut degenerate) = cosine_metric(&mean, truth);
    let initial_ndcg = ndcg_metric(&mean, truth, catalog, cfg.slate_size);
    let mut trace = Vec::with_capacity(cfg.n_queries);
    for step in 1..=cfg.n_queries {
        let start = Instant::now();
        let query = elicitor.propose().map_err(wrap(step))?;
        let cav = match (query.tag(), &semantics.user_cavs) {
            (None, _) => None,
            (Some(t), None) => Some(semantics.semantics.get(t).mean_vector().clone()),
            (Some(t), Some(beliefs)) => Some(sample_cav(&beliefs[t], derive_seed(seed, &[step as u64, 11]))),
        };
        let mut rng = rng_from_seed(derive_seed(seed, &[step as u64, 10]));
        let response = simulate_response(
            &query,
            &user.truth,
            cav.as_ref(),
            &semantics.semantics,
            catalog,
            &cfg.response_model,
            &mut rng,
        )
        .map_err(wrap(step))?;
        elicitor.observe(query.clone(), response).map_err(wrap(step))?;
        let mean = elicitor.belief().mean();
        let (cosine, flag) = cosine_metric(&mean, truth);
        degenerate |= flag;
        trace.push(QueryRecord {
            step,
            query: query.to_wire(catalog, &semantics.semantics),
            response: response.to_wire(catalog),
            cosine,
            ndcg: ndcg_metric(&mean, truth, catalog, cfg.slate_size),
            query_ndcg: query_ndcg_metric(query.slate(), truth, catalog),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(RunRecord {
        config_hash: cfg.hash(),
        user: user_index,
        seed_index,
        seed,
        initial_cosine,
        initial_ndcg,
        degenerate_cosine: degenerate,
        trace,
    })
}

/// Per-query mean and standard deviation across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub query: usize,
    pub n: usize,
    pub cosine_mean: f64,
    pub cosine_std: f64,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    /// Absent at query 0, where nothing has been shown yet.
    pub query_ndcg_mean: Option<f64>,
    pub query_ndcg_std: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    elicit_core::stats::mean_std(values)
}

pub fn aggregate(runs: &[RunRecord]) -> Vec<AggregateRow> {
    let n_queries = runs.iter().map(|r| r.trace.len()).min().unwrap_or(0);
    (0..=n_queries)
        .map(|k| {
            let (cosine_mean, cosine_std) = mean_std(&runs.iter().map(|r| r.cosine_at(k)).collect::<Vec<_>>());
            let (ndcg_mean, ndcg_std) = mean_std(&runs.iter().map(|r| r.ndcg_at(k)).collect::<Vec<_>>());
            let q = (k > 0).then(|| mean_std(&runs.iter().map(|r| r.trace[k - 1].query_ndcg).collect::<Vec<_>>()));
            AggregateRow {
                query: k,
                n: runs.len(),
                cosine_mean,
                cosine_std,
                ndcg_mean,
                ndcg_std,
                query_ndcg_mean: q.map(|v| v.0),
                query_ndcg_std: q.map(|v| v.1),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Ordered by `(user, seed_index)`.
    pub runs: Vec<RunRecord>,
    pub aggregate: Vec<AggregateRow>,
}

/// Runs every `(user, seed)` session of an experiment on a pool of
/// `workers` threads (all cores when `None`).
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let env = cfg.environment.build(cfg.n_users)?;
    run_experiment_in(&env, cfg, workers)
}

/// [`run_experiment`] on a prebuilt environment.
pub fn run_experiment_in(env: &Environment, cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentResult> {
    cfg.validate()?;
    if env.users.len() < cfg.n_users {
        return Err(SimError::Config(format!(
            "experiment needs {} users but the environment has {}",
            cfg.n_users,
            env.users.len()
        )));
    }
    let semantics = SessionSemantics::build(env, cfg)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.n_users).flat_map(|u| (0..cfg.n_seeds).map(move |s| (u, s))).collect();
    let run_all = || {
        jobs.par_iter()
            .map(|&(u, s)| run_session(env, &semantics, u, cfg, s))
            .collect::<Result<Vec<_>>>()
    };
    let runs = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| SimError::Config(e.to_string()))?
            .install(run_all)?,
        None => run_all()?,
    };
    Ok(ExperimentResult {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        aggregate: aggregate(&runs),
        runs,
    })
}
