//! Session configuration, state and the append-only event log.

use crate::error::ApiError;
use elicit_core::acquisition::AcquisitionConfig;
use elicit_core::belief::{BeliefSnapshot, McmcConfig, McmcMode, PosteriorMethod};
use elicit_core::catalog::{load_catalog, load_prior, GaussianUserPrior, ItemCatalog};
use elicit_core::cav::load_cavs;
use elicit_core::optimizer::{OptimizerConfig, OptimizerKind};
use elicit_core::response::{Query, QueryType, QueryWire, Response, ResponseModel, ResponseWire, Semantics};
use elicit_core::rng::str_key;
use elicit_core::session::{Elicitor, ElicitorConfig};
use elicit_core::Vector;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const CAVS_FILE: &str = "cavs.jsonl";
pub const PRIOR_FILE: &str = "prior.json";
pub const SESSIONS_DIR: &str = "sessions";
/// Name of the catalog set stored directly in the data directory.
pub const DEFAULT_SET: &str = "default";

/// A catalog with its tag semantics and the prior new sessions start from.
#[derive(Debug)]
pub struct CatalogSet {
    pub name: String,
    pub catalog: Arc<ItemCatalog>,
    pub semantics: Arc<Semantics>,
    pub prior: GaussianUserPrior,
}

impl CatalogSet {
    /// Without a stored prior, sessions start from an isotropic unit prior
    /// centred on the mean item embedding.
    pub fn new(name: impl Into<String>, catalog: ItemCatalog, semantics: Semantics, prior: Option<GaussianUserPrior>) -> elicit_core::Result<Self> {
        let prior = match prior {
            Some(p) => p,
            None => GaussianUserPrior::isotropic(catalog.mean_embedding(), 1.0)?,
        };
        Ok(Self {
            name: name.into(),
            catalog: Arc::new(catalog),
            semantics: Arc::new(semantics),
            prior,
        })
    }

    /// Loads `catalog.jsonl` plus optional `cavs.jsonl` and `prior.json` from `dir`.
    pub fn load(name: &str, dir: &Path) -> elicit_core::Result<Self> {
        let catalog = load_catalog(&dir.join(CATALOG_FILE))?;
        let cavs = dir.join(CAVS_FILE);
        let semantics = if cavs.exists() { Semantics::from_cavs(&load_cavs(&cavs)?)? } else { Semantics::default() };
        let prior = dir.join(PRIOR_FILE);
        let prior = if prior.exists() { Some(load_prior(&prior)?) } else { None };
        Self::new(name, catalog, semantics, prior)
    }
}

/// Catalog sets under `data_dir`: the directory itself (as `default`) and
/// every immediate subdirectory holding a catalog file.
pub fn discover_sets(data_dir: &Path) -> elicit_core::Result<BTreeMap<String, Arc<CatalogSet>>> {
    let mut sets = BTreeMap::new();
    if data_dir.join(CATALOG_FILE).exists() {
        sets.insert(DEFAULT_SET.to_string(), Arc::new(CatalogSet::load(DEFAULT_SET, data_dir)?));
    }
    let Ok(entries) = fs::read_dir(data_dir) else {
        return Ok(sets);
    };
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.join(CATALOG_FILE).is_file()).collect();
    dirs.sort();
    for dir in dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        sets.insert(name.clone(), Arc::new(CatalogSet::load(&name, &dir)?));
    }
    Ok(sets)
}

/// The subset of experiment settings a client chooses per session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub catalog: String,
    pub query_type: QueryType,
    pub slate_size: usize,
    pub acquisition: AcquisitionConfig,
    pub optimizer: OptimizerConfig,
    pub posterior: PosteriorMethod,
    pub response_model: ResponseModel,
    /// Length of the recommendation list returned with each update.
    pub top_k: usize,
    /// Derived from the session id when absent.
    pub seed: Option<u64>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            catalog: DEFAULT_SET.into(),
            query_type: QueryType::Ipa,
            slate_size: 5,
            acquisition: AcquisitionConfig {
                n_user_samples: 200,
                ..Default::default()
            },
            optimizer: OptimizerConfig {
                kind: OptimizerKind::RandomSearch,
                n_candidates: 50,
                ..Default::default()
            },
            posterior: PosteriorMethod::Mcmc(McmcConfig {
                mode: McmcMode::Iterative,
                ..Default::default()
            }),
            response_model: ResponseModel::default(),
            top_k: 5,
            seed: None,
        }
    }
}

impl SessionConfig {
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
}

/// One line of a session's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Create {
        session_id: String,
        config: SessionConfig,
        seed: u64,
        at: u64,
    },
    Query {
        step: usize,
        query: QueryWire,
        at: u64,
    },
    Response {
        step: usize,
        response: ResponseWire,
        at: u64,
    },
}

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Appends one event as a single newline-terminated write.
fn append(path: &Path, event: &Event) -> Result<(), ApiError> {
    let mut line = serde_json::to_string(event).map_err(ApiError::internal)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(ApiError::internal)?;
    f.write_all(line.as_bytes()).map_err(ApiError::internal)?;
    f.sync_data().map_err(ApiError::internal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub id: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub id: String,
    /// Utility of the item under the belief mean.
    pub score: f64,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// A query as shown to a person: items with metadata and the tag to judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub step: usize,
    #[serde(rename = "type")]
    pub kind: QueryType,
    pub slate: Vec<ItemView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub query: QueryWire,
    pub response: ResponseWire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedView {
    pub session_id: String,
    pub seed: u64,
    pub recommendations: Vec<Recommendation>,
}

/// Change between the belief before and after an answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    /// Euclidean distance between the old and new belief means.
    pub mean_shift: f64,
    /// Cosine between the old and new belief means.
    pub mean_cosine: f64,
    /// Items that entered the recommendation list.
    pub entered: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateView {
    pub step: usize,
    pub belief: BeliefSnapshot,
    pub recommendations: Vec<Recommendation>,
    pub deltas: Deltas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub seed: u64,
    pub config: SessionConfig,
    pub created_at: u64,
    pub updated_at: u64,
    pub step: usize,
    pub history: Vec<HistoryEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_query: Option<QueryView>,
    pub belief: BeliefSnapshot,
    pub recommendations: Vec<Recommendation>,
}

/// Live state of one session. Every mutation is logged before it is applied.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub config: SessionConfig,
    pub seed: u64,
    pub set: Arc<CatalogSet>,
    pub elicitor: Elicitor,
    pub pending: Option<Query>,
    pub created_at: u64,
    pub updated_at: u64,
    log: PathBuf,
}

impl Session {
    pub fn log_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.ndjson"))
    }

    fn build(id: String, config: SessionConfig, seed: u64, set: Arc<CatalogSet>, at: u64, log: PathBuf) -> Result<Self, ApiError> {
        let elicitor = Elicitor::new(set.catalog.clone(), set.semantics.clone(), set.prior.clone(), config.elicitor_config(), seed)
            .map_err(ApiError::bad_request)?;
        Ok(Self {
            id,
            config,
            seed,
            set,
            elicitor,
            pending: None,
            created_at: at,
            updated_at: at,
            log,
        })
    }

    /// Validates the config, writes the create event and returns the session.
    pub fn create(id: String, config: SessionConfig, set: Arc<CatalogSet>, log_dir: &Path) -> Result<Self, ApiError> {
        let seed = config.seed.unwrap_or_else(|| str_key(&id));
        let at = now_ms();
        let log = Self::log_path(log_dir, &id);
        let session = Self::build(id.clone(), config.clone(), seed, set, at, log)?;
        append(
            &session.log,
            &Event::Create {
                session_id: id,
                config,
                seed,
                at,
            },
        )?;
        Ok(session)
    }

    /// Rebuilds a session from its event log.
    pub fn replay(path: &Path, sets: &BTreeMap<String, Arc<CatalogSet>>) -> Result<Self, ApiError> {
        let text = fs::read_to_string(path).map_err(ApiError::internal)?;
        let mut session: Option<Session> = None;
        for (k, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let event: Event = serde_json::from_str(line).map_err(|e| ApiError::internal(format!("{}:{}: {e}", path.display(), k + 1)))?;
            match (event, session.as_mut()) {
                (Event::Create { session_id, config, seed, at }, None) => {
                    let set = sets
                        .get(&config.catalog)
                        .cloned()
                        .ok_or_else(|| ApiError::internal(format!("{}: unknown catalog set `{}`", path.display(), config.catalog)))?;
                    session = Some(Self::build(session_id, config, seed, set, at, path.to_path_buf())?);
                }
                (Event::Query { query, at, .. }, Some(s)) => {
                    s.pending = Some(Query::from_wire(&query, &s.set.catalog, &s.set.semantics).map_err(ApiError::internal)?);
                    s.updated_at = at;
                }
                (Event::Response { response, at, .. }, Some(s)) => {
                    let query = s.pending.take().ok_or_else(|| ApiError::internal(format!("{}: response without query", path.display())))?;
                    let response = Response::from_wire(&response, &s.set.catalog).map_err(ApiError::internal)?;
                    s.elicitor.observe(query, response).map_err(ApiError::internal)?;
                    s.updated_at = at;
                }
                _ => return Err(ApiError::internal(format!("{}:{}: out-of-order event", path.display(), k + 1))),
            }
        }
        session.ok_or_else(|| ApiError::internal(format!("{}: empty event log", path.display())))
    }

    pub fn step(&self) -> usize {
        self.elicitor.step()
    }

    /// The pending query, proposing and logging a new one if there is none.
    pub fn next_query(&mut self) -> Result<QueryView, ApiError> {
        if self.pending.is_none() {
            let query = self.elicitor.propose().map_err(ApiError::internal)?;
            let at = now_ms();
            append(
                &self.log,
                &Event::Query {
                    step: self.step(),
                    query: query.to_wire(&self.set.catalog, &self.set.semantics),
                    at,
                },
            )?;
            self.pending = Some(query);
            self.updated_at = at;
        }
        Ok(self.query_view(self.pending.as_ref().expect("pending query")))
    }

    /// Applies an answer to the pending query. Nothing changes on error.
    pub fn submit(&mut self, wire: &ResponseWire) -> Result<UpdateView, ApiError> {
        let Some(query) = self.pending.clone() else {
            return Err(if self.step() > 0 {
                ApiError::conflict("already_answered", "the last query was already answered; fetch the next query first")
            } else {
                ApiError::conflict("no_pending_query", "no query is pending; fetch one first")
            });
        };
        let response = Response::from_wire(wire, &self.set.catalog).map_err(ApiError::invalid_response)?;
        query.outcome_index(&response).map_err(ApiError::invalid_response)?;
        let before = self.elicitor.belief().mean();
        let old_top = self.elicitor.recommend(self.config.top_k);
        let mut next = self.elicitor.clone();
        next.observe(query, response.clone()).map_err(ApiError::invalid_response)?;
        let at = now_ms();
        append(
            &self.log,
            &Event::Response {
                step: self.step(),
                response: response.to_wire(&self.set.catalog),
                at,
            },
        )?;
        self.elicitor = next;
        self.pending = None;
        self.updated_at = at;
        let after = self.elicitor.belief().mean();
        let denom = before.norm() * after.norm();
        let top = self.elicitor.recommend(self.config.top_k);
        Ok(UpdateView {
            step: self.step(),
            belief: self.elicitor.belief().snapshot(None),
            recommendations: self.recommendations(),
            deltas: Deltas {
                mean_shift: (&after - &before).norm(),
                mean_cosine: if denom > 0.0 { before.dot(&after) / denom } else { 0.0 },
                entered: top
                    .iter()
                    .filter(|i| !old_top.contains(i))
                    .map(|&i| self.set.catalog.id(i).to_string())
                    .collect(),
            },
        })
    }

    pub fn recommendations(&self) -> Vec<Recommendation> {
        let mean: Vector = self.elicitor.belief().mean();
        self.elicitor
            .recommend(self.config.top_k)
            .into_iter()
            .map(|i| {
                let item = self.set.catalog.item(i);
                Recommendation {
                    id: item.id.clone(),
                    score: mean.dot(&item.embedding),
                    metadata: item.metadata.clone(),
                }
            })
            .collect()
    }

    pub fn query_view(&self, q: &Query) -> QueryView {
        let catalog = &self.set.catalog;
        let tag = q.tag().map(|t| self.set.semantics.name(t).to_string());
        let prompt = match (q.query_type(), &tag) {
            (QueryType::Item, _) => "Which item do you prefer?".to_string(),
            (QueryType::Attribute, Some(t)) => format!("Compared with these items, do you want something more or less {t}?"),
            (_, Some(t)) => format!("Pick your favourite item, then say whether you want it more or less {t}."),
            (_, None) => String::new(),
        };
        QueryView {
            step: self.step(),
            kind: q.query_type(),
            slate: q
                .slate()
                .iter()
                .map(|&i| ItemView {
                    id: catalog.id(i).to_string(),
                    metadata: catalog.item(i).metadata.clone(),
                })
                .collect(),
            tag,
            prompt,
        }
    }

    pub fn view(&self) -> SessionView {
        let catalog = &self.set.catalog;
        SessionView {
            session_id: self.id.clone(),
            seed: self.seed,
            config: self.config.clone(),
            created_at: self.created_at,
            updated_at: self.updated_at,
            step: self.step(),
            history: self
                .elicitor
                .history()
                .entries()
                .iter()
                .map(|(q, r)| HistoryEntry {
                    query: q.to_wire(catalog, &self.set.semantics),
                    response: r.to_wire(catalog),
                })
                .collect(),
            pending_query: self.pending.as_ref().map(|q| self.query_view(q)),
            belief: self.elicitor.belief().snapshot(None),
            recommendations: self.recommendations(),
        }
    }

    pub fn created_view(&self) -> CreatedView {
        CreatedView {
            session_id: self.id.clone(),
            seed: self.seed,
            recommendations: self.recommendations(),
        }
    }
}
