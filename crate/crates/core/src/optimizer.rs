//! Query selection: random and Thompson baselines, sequential greedy,
//! random search, and continuous relaxation with projection.

use crate::acquisition::{
    frozen_eps, peu_differentiable, score_candidates, AcqContext, BeliefSample, ContinuousCav, ContinuousQuery,
    QueryScore,
};
use crate::belief::UserBelief;
use crate::catalog::ItemCatalog;
use crate::linalg::{covariance_of, gaussian_kl};
use crate::response::{Query, QueryType, TagSemantics};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::{Error, Matrix, Result, Vector};
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Random,
    Thompson,
    SequentialGreedy,
    #[default]
    RandomSearch,
    Relaxation,
}

impl OptimizerKind {
    pub const NAMES: [&'static str; 5] = ["random", "thompson", "sequential_greedy", "random_search", "relaxation"];
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "thompson" => Ok(Self::Thompson),
            "sequential_greedy" => Ok(Self::SequentialGreedy),
            "random_search" => Ok(Self::RandomSearch),
            "relaxation" => Ok(Self::Relaxation),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected one of: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxationOrder {
    #[default]
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelaxationConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub hessian_reg: f64,
    pub init_random_trials: usize,
    pub order: RelaxationOrder,
}

impl Default for RelaxationConfig {
    fn default() -> Self {
        Self {
            steps: 2,
            learning_rate: 1e-3,
            hessian_reg: 1e-4,
            init_random_trials: 20,
            order: RelaxationOrder::First,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub slate_size: usize,
    pub n_candidates: usize,
    pub query_type: QueryType,
    pub relaxation: RelaxationConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::RandomSearch,
            slate_size: 5,
            n_candidates: 100,
            query_type: QueryType::Ipa,
            relaxation: RelaxationConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, catalog: &ItemCatalog, n_tags: usize) -> Result<()> {
        if self.slate_size == 0 || self.slate_size > catalog.len() {
            return Err(Error::Config(format!(
                "slate_size must lie in 1..={}, got {}",
                catalog.len(),
                self.slate_size
            )));
        }
        if self.n_candidates == 0 || self.relaxation.init_random_trials == 0 {
            return Err(Error::Config("candidate counts must be positive".into()));
        }
        if self.query_type.needs_tag() && n_tags == 0 {
            return Err(Error::Config("attribute and IpA queries need at least one tag".into()));
        }
        let r = &self.relaxation;
        if !(r.learning_rate >= 0.0) || !(r.hessian_reg > 0.0) {
            return Err(Error::Config("relaxation rates must be positive".into()));
        }
        Ok(())
    }
}

fn random_query_with(catalog: &ItemCatalog, n_tags: usize, cfg: &OptimizerConfig, rng: &mut Rng) -> Result<Query> {
    let slate = index::sample(rng, catalog.len(), cfg.slate_size).into_vec();
    let tag = cfg.query_type.needs_tag().then(|| rng.random_range(0..n_tags));
    Query::new(cfg.query_type, slate, tag)
}

/// Uniform slate without replacement, uniform tag.
pub fn random_query(catalog: &ItemCatalog, n_tags: usize, cfg: &OptimizerConfig, seed: u64) -> Result<Query> {
    cfg.validate(catalog, n_tags)?;
    random_query_with(catalog, n_tags, cfg, &mut rng_from_seed(seed))
}

/// One utility draw from the belief.
pub fn draw_utility(belief: &UserBelief, rng: &mut Rng) -> Vector {
    match belief {
        UserBelief::Prior(p) => p.sample(rng),
        UserBelief::Particles(p) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let w = p.weights();
            let idx = w
                .iter()
                .position(|x| {
                    acc += x;
                    u < acc
                })
                .unwrap_or(w.len() - 1);
            p.particles()[idx].clone()
        }
        UserBelief::Laplace(l) => {
            let d = l.mean.len();
            let eps = Vector::from_fn(d, |_, _| rng.sample(rand_distr::StandardNormal));
            crate::linalg::affine_draw(&l.mean, &l.scale, &eps)
        }
    }
}

/// Sequential Thompson sampling: each position takes the best unchosen item
/// under a fresh utility draw.
pub fn thompson_slate(
    belief: &UserBelief,
    catalog: &ItemCatalog,
    n_tags: usize,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<Query> {
    cfg.validate(catalog, n_tags)?;
    let mut rng = rng_from_seed(seed);
    let mut slate: Vec<usize> = Vec::with_capacity(cfg.slate_size);
    for _ in 0..cfg.slate_size {
        let phi = draw_utility(belief, &mut rng);
        let (best, _) = catalog
            .argmax_by((0..catalog.len()).filter(|i| !slate.contains(i)), |i| phi.dot(catalog.embedding(i)))
            .expect("slate_size ≤ catalog size");
        slate.push(best);
    }
    let tag = cfg.query_type.needs_tag().then(|| rng.random_range(0..n_tags));
    Query::new(cfg.query_type, slate, tag)
}

/// First index with the maximal blended score.
fn best_of(scores: &[QueryScore]) -> usize {
    let mut best = 0;
    for (k, s) in scores.iter().enumerate() {
        if s.blended > scores[best].blended {
            best = k;
        }
    }
    best
}

/// Greedy slate construction alternating tag and item choices.
pub fn sequential_greedy(ctx: &AcqContext, cfg: &OptimizerConfig) -> Result<Query> {
    let catalog = ctx.catalog;
    cfg.validate(catalog, ctx.semantics.len())?;
    let mut order: Vec<usize> = (0..catalog.len()).collect();
    order.sort_by(|a, b| catalog.id(*a).cmp(catalog.id(*b)));
    let (first, _) = crate::acquisition::eu_star_for_mean(&ctx.mean, catalog);
    let mut slate = vec![first];
    let mut tag = cfg.query_type.needs_tag().then_some(0);
    loop {
        if let Some(t) = tag.as_mut() {
            let cands: Vec<Query> = (0..ctx.semantics.len())
                .map(|g| Query::new(cfg.query_type, slate.clone(), Some(g)))
                .collect::<Result<_>>()?;
            *t = best_of(&score_candidates(&cands, ctx)?);
        }
        if slate.len() == cfg.slate_size {
            break;
        }
        let items: Vec<usize> = order.iter().copied().filter(|i| !slate.contains(i)).collect();
        let cands: Vec<Query> = items
            .iter()
            .map(|&i| {
                let mut s = slate.clone();
                s.push(i);
                Query::new(cfg.query_type, s, tag)
            })
            .collect::<Result<_>>()?;
        slate.push(items[best_of(&score_candidates(&cands, ctx)?)]);
    }
    Query::new(cfg.query_type, slate, tag)
}

/// `n` seeded random candidates.
pub fn random_candidates(catalog: &ItemCatalog, n_tags: usize, cfg: &OptimizerConfig, n: usize, seed: u64) -> Result<Vec<Query>> {
    (0..n)
        .map(|k| random_query_with(catalog, n_tags, cfg, &mut rng_from_seed(derive_seed(seed, &[k as u64]))))
        .collect()
}

/// Best candidate under the candidate-scaled BPER score, with its score.
pub fn best_candidate(candidates: &[Query], ctx: &AcqContext) -> Result<(Query, QueryScore, Vec<QueryScore>)> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate queries".into()));
    }
    let scores = score_candidates(candidates, ctx)?;
    let k = best_of(&scores);
    Ok((candidates[k].clone(), scores[k], scores))
}

/// Best of `n_candidates` random queries.
pub fn random_search(ctx: &AcqContext, cfg: &OptimizerConfig, seed: u64) -> Result<Query> {
    cfg.validate(ctx.catalog, ctx.semantics.len())?;
    let cands = random_candidates(ctx.catalog, ctx.semantics.len(), cfg, cfg.n_candidates, seed)?;
    Ok(best_candidate(&cands, ctx)?.0)
}

/// The relaxed objective `γ·PEU_diff/s_ig + (1 − γ)·RQ/s_rq` and its gradient.
pub struct RelaxedObjective<'a> {
    pub sample: &'a BeliefSample,
    pub mean: &'a Vector,
    pub ctx: &'a AcqContext<'a>,
    pub eps: Vec<Vector>,
    pub ig_scale: f64,
    pub rq_scale: f64,
    pub template: ContinuousQuery,
}

impl RelaxedObjective<'_> {
    pub fn eval(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let q = self.template.with_params(params);
        let gamma = self.ctx.cfg.gamma;
        let peu = peu_differentiable(&q, self.sample, self.ctx.model, self.ctx.catalog.max_norm(), &self.eps)?;
        let rq: f64 = q.items.iter().map(|x| self.mean.dot(x)).sum();
        let value = gamma * peu.value / self.ig_scale + (1.0 - gamma) * rq / self.rq_scale;
        let d = q.dim();
        let mut grad: Vec<f64> = peu.grad.iter().map(|g| gamma * g / self.ig_scale).collect();
        for k in 0..q.items.len() {
            for a in 0..d {
                grad[k * d + a] += (1.0 - gamma) * self.mean[a] / self.rq_scale;
            }
        }
        Ok((value, grad))
    }

    /// Hessian by central differences of the analytic gradient.
    pub fn hessian(&self, params: &[f64]) -> Result<Matrix> {
        let n = params.len();
        let h = 1e-5;
        let mut hess = Matrix::zeros(n, n);
        let mut p = params.to_vec();
        for c in 0..n {
            p[c] = params[c] + h;
            let (_, gp) = self.eval(&p)?;
            p[c] = params[c] - h;
            let (_, gm) = self.eval(&p)?;
            p[c] = params[c];
            for r in 0..n {
                hess[(r, c)] = (gp[r] - gm[r]) / (2.0 * h);
            }
        }
        Ok((&hess + hess.transpose()) * 0.5)
    }
}

/// One relaxation update; second order falls back to first order when the
/// regularized system is singular or does not yield an ascent direction.
fn relaxation_step(obj: &RelaxedObjective, params: &[f64], cfg: &RelaxationConfig) -> Result<Vec<f64>> {
    let (_, grad) = obj.eval(params)?;
    let first = || params.iter().zip(&grad).map(|(p, g)| p + cfg.learning_rate * g).collect();
    if cfg.order == RelaxationOrder::First {
        return Ok(first());
    }
    let n = params.len();
    let system = Matrix::identity(n, n) * cfg.hessian_reg - obj.hessian(params)?;
    let g = Vector::from_column_slice(&grad);
    match system.lu().solve(&g) {
        Some(delta) if delta.iter().all(|v| v.is_finite()) && delta.dot(&g) > 0.0 => {
            Ok(params.iter().zip(delta.iter()).map(|(p, d)| p + d).collect())
        }
        _ => Ok(first()),
    }
}

/// Nearest distinct catalog items, position by position.
pub fn project_items(items: &[Vector], catalog: &ItemCatalog) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(items.len());
    for x in items {
        let (best, _) = catalog
            .argmax_by((0..catalog.len()).filter(|i| !out.contains(i)), |i| -(catalog.embedding(i) - x).norm())
            .expect("slate_size ≤ catalog size");
        out.push(best);
    }
    out
}

/// Tag closest to the relaxed CAV: Euclidean for vectors, KL for Gaussians.
pub fn project_tag(cav: &ContinuousCav, tags: &[TagSemantics]) -> usize {
    let dist = |t: &TagSemantics| match (cav, t) {
        (ContinuousCav::Uncertain { mean, chol, .. }, TagSemantics::Uncertain(b)) => {
            gaussian_kl(mean, &covariance_of(chol), &b.mean, &b.covariance())
        }
        (ContinuousCav::Fixed { vector, .. }, other) => (vector - other.mean_vector()).norm(),
        (ContinuousCav::Uncertain { mean, .. }, other) => (mean - other.mean_vector()).norm(),
    };
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, t) in tags.iter().enumerate() {
        let d = dist(t);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Random-search initialization, a few gradient steps on the relaxed
/// objective, then projection back to a catalog query.
pub fn relax_and_project(ctx: &AcqContext, cfg: &OptimizerConfig, seed: u64) -> Result<Query> {
    cfg.validate(ctx.catalog, ctx.semantics.len())?;
    let rc = &cfg.relaxation;
    let cands = random_candidates(ctx.catalog, ctx.semantics.len(), cfg, rc.init_random_trials, seed)?;
    let (init, score, _) = best_candidate(&cands, ctx)?;
    if rc.steps == 0 || (rc.order == RelaxationOrder::First && rc.learning_rate == 0.0) {
        return Ok(init);
    }
    let template = ContinuousQuery::from_query(&init, ctx.catalog, ctx.semantics);
    let obj = RelaxedObjective {
        sample: &ctx.sample,
        mean: &ctx.mean,
        ctx,
        eps: frozen_eps(template.dim(), ctx.cfg.n_cav_samples, derive_seed(seed, &[0xE5])),
        ig_scale: score.ig_scale,
        rq_scale: score.rq_scale,
        template: template.clone(),
    };
    let mut params = template.params();
    for _ in 0..rc.steps {
        params = relaxation_step(&obj, &params, rc)?;
    }
    let relaxed = template.with_params(&params);
    let slate = project_items(&relaxed.items, ctx.catalog);
    let tag = relaxed.cav.as_ref().map(|c| project_tag(c, ctx.semantics.tags()));
    Query::new(cfg.query_type, slate, tag)
}

/// Dispatches to the configured optimizer.
pub fn select_query(belief: &UserBelief, ctx: &AcqContext, cfg: &OptimizerConfig, seed: u64) -> Result<Query> {
    let n_tags = ctx.semantics.len();
    match cfg.kind {
        OptimizerKind::Random => random_query(ctx.catalog, n_tags, cfg, seed),
        OptimizerKind::Thompson => thompson_slate(belief, ctx.catalog, n_tags, cfg, seed),
        OptimizerKind::SequentialGreedy => sequential_greedy(ctx, cfg),
        OptimizerKind::RandomSearch => random_search(ctx, cfg, seed),
        OptimizerKind::Relaxation => relax_and_project(ctx, cfg, seed),
    }
}

/// Dispatch by policy name.
pub fn select_query_named(name: &str, belief: &UserBelief, ctx: &AcqContext, cfg: &OptimizerConfig, seed: u64) -> Result<Query> {
    let cfg = OptimizerConfig {
        kind: name.parse()?,
        ..cfg.clone()
    };
    select_query(belief, ctx, &cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(n: usize) -> ItemCatalog {
        ItemCatalog::from_embeddings((0..n).map(|i| (format!("i{i:02}"), Vector::from_vec(vec![i as f64, 1.0]))))
            .unwrap()
    }

    #[test]
    fn full_slate_is_permutation() {
        let c = catalog(6);
        let cfg = OptimizerConfig {
            slate_size: 6,
            query_type: QueryType::Item,
            ..Default::default()
        };
        let mut s = random_query(&c, 0, &cfg, 9).unwrap().slate().to_vec();
        s.sort();
        assert_eq!(s, (0..6).collect::<Vec<_>>());
        assert_eq!(random_query(&c, 0, &cfg, 9).unwrap(), random_query(&c, 0, &cfg, 9).unwrap());
    }

    #[test]
    fn unknown_policy_names_options() {
        let err = "greedy".parse::<OptimizerKind>().unwrap_err().to_string();
        for n in OptimizerKind::NAMES {
            assert!(err.contains(n));
        }
    }

    #[test]
    fn thompson_point_mass_is_top_k() {
        let c = catalog(5);
        let belief = UserBelief::Particles(
            crate::belief::ParticleBelief::uniform(vec![Vector::from_vec(vec![1.0, 0.0])], 0).unwrap(),
        );
        let cfg = OptimizerConfig {
            slate_size: 3,
            query_type: QueryType::Item,
            ..Default::default()
        };
        assert_eq!(thompson_slate(&belief, &c, 0, &cfg, 1).unwrap().slate(), &[4, 3, 2]);
    }

    #[test]
    fn projection_resolves_duplicates() {
        let c = catalog(4);
        let items = vec![Vector::from_vec(vec![1.1, 1.0]), Vector::from_vec(vec![0.95, 1.0])];
        assert_eq!(project_items(&items, &c), vec![1, 0]);
    }
}
