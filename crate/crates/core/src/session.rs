//! The elicitation loop shared by the simulator and the service: propose a
//! query, observe the answer, update the belief. Every random choice is
//! derived from the session seed and the step index, so replaying the same
//! (query, response) sequence reproduces the same beliefs exactly.

use crate::acquisition::{AcqContext, AcquisitionConfig};
use crate::belief::{update_belief, PosteriorMethod, PosteriorTarget, UserBelief};
use crate::catalog::{GaussianUserPrior, ItemCatalog};
use crate::optimizer::{select_query, OptimizerConfig};
use crate::response::{History, Query, Response, ResponseModel, Semantics};
use crate::rng::derive_seed;
use crate::{Result, Vector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ElicitorConfig {
    pub model: ResponseModel,
    pub posterior: PosteriorMethod,
    pub acquisition: AcquisitionConfig,
    pub optimizer: OptimizerConfig,
}

impl ElicitorConfig {
    pub fn validate(&self, catalog: &ItemCatalog, semantics: &Semantics) -> Result<()> {
        self.acquisition.validate()?;
        self.optimizer.validate(catalog, semantics.len())?;
        if let PosteriorMethod::Mcmc(m) = &self.posterior {
            m.validate()?;
        }
        Ok(())
    }
}

const PROPOSE_ACQ: u64 = 1;
const PROPOSE_OPT: u64 = 2;
const UPDATE: u64 = 3;

/// One user's elicitation state.
#[derive(Debug, Clone)]
pub struct Elicitor {
    catalog: Arc<ItemCatalog>,
    semantics: Arc<Semantics>,
    prior: GaussianUserPrior,
    cfg: ElicitorConfig,
    seed: u64,
    history: History,
    target: PosteriorTarget,
    belief: UserBelief,
}

impl Elicitor {
    pub fn new(
        catalog: Arc<ItemCatalog>,
        semantics: Arc<Semantics>,
        prior: GaussianUserPrior,
        cfg: ElicitorConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate(&catalog, &semantics)?;
        let history = History::new();
        let target = PosteriorTarget::new(&prior, &history, &catalog, &semantics, &cfg.model)?;
        Ok(Self {
            belief: UserBelief::Prior(prior.clone()),
            catalog,
            semantics,
            prior,
            cfg,
            seed,
            history,
            target,
        })
    }

    pub fn belief(&self) -> &UserBelief {
        &self.belief
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn config(&self) -> &ElicitorConfig {
        &self.cfg
    }

    pub fn catalog(&self) -> &ItemCatalog {
        &self.catalog
    }

    pub fn semantics(&self) -> &Semantics {
        &self.semantics
    }

    pub fn prior(&self) -> &GaussianUserPrior {
        &self.prior
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> usize {
        self.history.len()
    }

    /// The optimizer's query for the current step.
    pub fn propose(&self) -> Result<Query> {
        let step = self.step() as u64;
        let acq = AcquisitionConfig {
            rng_seed: derive_seed(self.seed, &[step, PROPOSE_ACQ]),
            ..self.cfg.acquisition.clone()
        };
        let ctx = AcqContext::from_belief(&self.belief, &self.catalog, &self.semantics, &self.cfg.model, &acq)?;
        select_query(
            &self.belief,
            &ctx,
            &self.cfg.optimizer,
            derive_seed(self.seed, &[step, PROPOSE_OPT]),
        )
    }

    /// Records an answer and updates the belief.
    pub fn observe(&mut self, query: Query, response: Response) -> Result<()> {
        query.validate(&self.catalog, &self.semantics)?;
        let step = self.step() as u64;
        let mut target = self.target.clone();
        target.push_entry(&query, &response, &self.catalog, &self.semantics, &self.cfg.model)?;
        let belief = update_belief(
            &self.cfg.posterior,
            &self.prior,
            &target,
            Some(&self.belief),
            derive_seed(self.seed, &[step, UPDATE]),
        )?;
        self.history.push(query, response)?;
        self.target = target;
        self.belief = belief;
        Ok(())
    }

    /// Top-`k` items under the belief mean, ties to the lowest id.
    pub fn recommend(&self, k: usize) -> Vec<usize> {
        top_k(&self.belief.mean(), &self.catalog, k)
    }
}

/// Items ranked by `utility·x` descending, ties to the lowest id, truncated to `k`.
pub fn top_k(utility: &Vector, catalog: &ItemCatalog, k: usize) -> Vec<usize> {
    let scores: Vec<f64> = (0..catalog.len()).map(|i| utility.dot(catalog.embedding(i))).collect();
    let mut idx: Vec<usize> = (0..catalog.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| catalog.id(a).cmp(catalog.id(b)))
    });
    idx.truncate(k);
    idx
}
