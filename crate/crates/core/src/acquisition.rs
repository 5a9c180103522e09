//! Acquisition functions scoring candidate queries against a belief.
//!
//! Everything here works on a [`BeliefSample`]: a weighted set of utility
//! vectors standing in for the belief. Particle beliefs contribute their
//! particles directly; Gaussian beliefs are represented by seeded draws.

use crate::belief::UserBelief;
use crate::catalog::ItemCatalog;
use crate::linalg::{pack_lower, unpack_lower};
use crate::response::{target_item, AttributeModel, Query, QueryType, ResponseModel, Semantics, SlateKernel};
use crate::rng::{derive_seed, rng_from_seed, str_key};
use crate::stats::{entropy, mean_std, norm_cdf, norm_pdf};
use crate::{Error, Matrix, Result, Vector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    Random,
    Entropy,
    MutualInformation,
    #[default]
    Evoi,
}

impl FromStr for AcquisitionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "entropy" => Ok(Self::Entropy),
            "mutual_information" => Ok(Self::MutualInformation),
            "evoi" => Ok(Self::Evoi),
            other => Err(Error::Config(format!(
                "unknown acquisition function `{other}` (expected one of: random, entropy, mutual_information, evoi)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeuMethod {
    #[default]
    Exact,
    Sampled,
}

/// How IG and RQ are put on a common scale before blending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScaling {
    /// Divide by the standard deviation across the candidate set.
    #[default]
    CandidateStd,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub kind: AcquisitionKind,
    /// Weight on information gain; `1 − gamma` goes to recommendation quality.
    pub gamma: f64,
    /// Utility samples `m` representing the belief.
    pub n_user_samples: usize,
    /// CAV draws `n` per uncertain tag.
    pub n_cav_samples: usize,
    pub rng_seed: u64,
    pub peu: PeuMethod,
    /// Maximize entropy and MI when selecting (minimize when false).
    pub maximize_information: bool,
    pub scaling: ScoreScaling,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            kind: AcquisitionKind::Evoi,
            gamma: 0.5,
            n_user_samples: 500,
            n_cav_samples: 16,
            rng_seed: 0,
            peu: PeuMethod::Exact,
            maximize_information: true,
            scaling: ScoreScaling::CandidateStd,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.n_user_samples == 0 || self.n_cav_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// Weighted utility vectors standing in for a belief.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefSample {
    particles: Vec<Vector>,
    weights: Vec<f64>,
}

impl BeliefSample {
    pub fn new(particles: Vec<Vector>, weights: Vec<f64>) -> Result<Self> {
        if particles.is_empty() || particles.len() != weights.len() {
            return Err(Error::Config("belief sample needs matching, non-empty particles and weights".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config("belief sample weights must be nonnegative with positive sum".into()));
        }
        Ok(Self {
            particles,
            weights: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(particles: Vec<Vector>) -> Result<Self> {
        let n = particles.len();
        Self::new(particles, vec![1.0; n])
    }

    pub fn point_mass(phi: Vector) -> Self {
        Self {
            particles: vec![phi],
            weights: vec![1.0],
        }
    }

    /// Particle beliefs with at most `m` particles are used as-is; larger
    /// sets are resampled down to `m`; Gaussian beliefs are drawn `m` times.
    pub fn from_belief(belief: &UserBelief, m: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(derive_seed(seed, &[0xB5]));
        match belief {
            UserBelief::Particles(p) if p.len() <= m => Self::new(p.particles().to_vec(), p.weights()),
            UserBelief::Particles(p) => {
                let w = p.weights();
                let u0: f64 = rng.random::<f64>() / m as f64;
                let mut picks = Vec::with_capacity(m);
                let (mut cum, mut i) = (w[0], 0);
                for j in 0..m {
                    let u = u0 + j as f64 / m as f64;
                    while cum <= u && i + 1 < w.len() {
                        i += 1;
                        cum += w[i];
                    }
                    picks.push(p.particles()[i].clone());
                }
                Self::uniform(picks)
            }
            UserBelief::Prior(p) => Self::uniform((0..m).map(|_| p.sample(&mut rng)).collect()),
            UserBelief::Laplace(l) => {
                let d = l.mean.len();
                Self::uniform(
                    (0..m)
                        .map(|_| {
                            let eps = Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
                            crate::linalg::affine_draw(&l.mean, &l.scale, &eps)
                        })
                        .collect(),
                )
            }
        }
    }

    pub fn particles(&self) -> &[Vector] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn mean(&self) -> Vector {
        let mut m = Vector::zeros(self.particles[0].len());
        for (p, w) in self.particles.iter().zip(&self.weights) {
            m.axpy(*w, p, 1.0);
        }
        m
    }
}

/// Everything needed to score discrete queries for one belief.
#[derive(Debug, Clone)]
pub struct AcqContext<'a> {
    pub catalog: &'a ItemCatalog,
    pub semantics: &'a Semantics,
    pub model: &'a ResponseModel,
    pub cfg: &'a AcquisitionConfig,
    pub sample: BeliefSample,
    pub mean: Vector,
    /// CAV draws per tag, frozen for the whole scoring pass.
    pub cav_draws: Vec<Vec<Vector>>,
}

impl<'a> AcqContext<'a> {
    pub fn new(
        sample: BeliefSample,
        catalog: &'a ItemCatalog,
        semantics: &'a Semantics,
        model: &'a ResponseModel,
        cfg: &'a AcquisitionConfig,
    ) -> Self {
        let cav_draws = semantics
            .tags()
            .iter()
            .enumerate()
            .map(|(t, s)| s.draws(cfg.n_cav_samples, derive_seed(cfg.rng_seed, &[0xCA, t as u64])))
            .collect();
        let mean = sample.mean();
        Self {
            catalog,
            semantics,
            model,
            cfg,
            sample,
            mean,
            cav_draws,
        }
    }

    pub fn from_belief(
        belief: &UserBelief,
        catalog: &'a ItemCatalog,
        semantics: &'a Semantics,
        model: &'a ResponseModel,
        cfg: &'a AcquisitionConfig,
    ) -> Result<Self> {
        let sample = BeliefSample::from_belief(belief, cfg.n_user_samples, cfg.rng_seed)?;
        Ok(Self::new(sample, catalog, semantics, model, cfg))
    }

    /// `L[j][ρ] = P(ρ | q, φ_j)`, CAV-marginalized; a particle with an
    /// undefined target item contributes a uniform row.
    pub fn likelihood_matrix(&self, q: &Query) -> Result<Vec<Vec<f64>>> {
        q.validate(self.catalog, self.semantics)?;
        let kernel = SlateKernel::for_query(q, self.catalog, self.model)?;
        let (cavs, sigma): (&[Vector], f64) = match q.tag() {
            Some(t) => (&self.cav_draws[t], self.semantics.get(t).sigma()),
            None => (&[], 1.0),
        };
        let n_out = q.n_outcomes();
        self.sample
            .particles
            .iter()
            .map(|phi| match kernel.probs_marginal(phi, cavs, sigma) {
                Err(Error::UndefinedTarget) => Ok(vec![1.0 / n_out as f64; n_out]),
                other => other,
            })
            .collect()
    }
}

fn marginal_of(l: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; l[0].len()];
    for (row, wj) in l.iter().zip(w) {
        for (a, v) in p.iter_mut().zip(row) {
            *a += wj * v;
        }
    }
    p
}

/// Predictive distribution of responses under the belief.
pub fn response_marginal(q: &Query, ctx: &AcqContext) -> Result<Vec<f64>> {
    Ok(marginal_of(&ctx.likelihood_matrix(q)?, ctx.sample.weights()))
}

/// Predictive entropy of the response, in nats.
pub fn entropy_af(q: &Query, ctx: &AcqContext) -> Result<f64> {
    Ok(entropy(&response_marginal(q, ctx)?))
}

/// `H(ρ | q) − E_φ H(ρ | q, φ)`, clamped at zero.
pub fn mutual_information_af(q: &Query, ctx: &AcqContext) -> Result<f64> {
    let l = ctx.likelihood_matrix(q)?;
    let w = ctx.sample.weights();
    let h = entropy(&marginal_of(&l, w));
    let cond: f64 = l.iter().zip(w).map(|(row, wj)| wj * entropy(row)).sum();
    Ok((h - cond).max(0.0))
}

/// Best item under the mean utility, ties to the lowest item id.
pub fn eu_star_for_mean(mean: &Vector, catalog: &ItemCatalog) -> (usize, f64) {
    catalog
        .argmax_by(0..catalog.len(), |i| mean.dot(catalog.embedding(i)))
        .expect("catalog is non-empty")
}

/// `EU*` of a belief sample.
pub fn eu_star(sample: &BeliefSample, catalog: &ItemCatalog) -> (usize, f64) {
    eu_star_for_mean(&sample.mean(), catalog)
}

fn best_value(v: &Vector, catalog: &ItemCatalog) -> f64 {
    (0..catalog.len())
        .map(|i| v.dot(catalog.embedding(i)))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `Σ_ρ P(ρ)·EU*(belief reweighted by ρ)` over the sample's own support.
pub fn peu_exact(q: &Query, ctx: &AcqContext) -> Result<f64> {
    let l = ctx.likelihood_matrix(q)?;
    Ok(peu_from_likelihoods(&l, ctx.sample.particles(), ctx.sample.weights(), ctx.catalog))
}

fn peu_from_likelihoods(l: &[Vec<f64>], particles: &[Vector], w: &[f64], catalog: &ItemCatalog) -> f64 {
    let d = particles[0].len();
    let mut total = 0.0;
    for rho in 0..l[0].len() {
        let mut p = 0.0;
        let mut v = Vector::zeros(d);
        for ((row, phi), wj) in l.iter().zip(particles).zip(w) {
            p += wj * row[rho];
            v.axpy(wj * row[rho], phi, 1.0);
        }
        if p < 1e-12 {
            continue;
        }
        total += best_value(&v, catalog);
    }
    total
}

/// PEU from `m` utility draws resampled uniformly from the belief sample.
pub fn peu_sampled(q: &Query, ctx: &AcqContext) -> Result<f64> {
    let m = ctx.cfg.n_user_samples;
    let mut rng = rng_from_seed(derive_seed(ctx.cfg.rng_seed, &[0x5A]));
    let w = ctx.sample.weights();
    let draws: Vec<Vector> = (0..m)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let idx = w
                .iter()
                .position(|x| {
                    acc += x;
                    u < acc
                })
                .unwrap_or(w.len() - 1);
            ctx.sample.particles()[idx].clone()
        })
        .collect();
    let sub = AcqContext {
        sample: BeliefSample::uniform(draws)?,
        ..ctx.clone()
    };
    let l = sub.likelihood_matrix(q)?;
    Ok(peu_from_likelihoods(&l, sub.sample.particles(), sub.sample.weights(), ctx.catalog))
}

/// `PEU − EU*`.
pub fn evoi_af(q: &Query, ctx: &AcqContext) -> Result<f64> {
    let peu = match ctx.cfg.peu {
        PeuMethod::Exact => peu_exact(q, ctx)?,
        PeuMethod::Sampled => peu_sampled(q, ctx)?,
    };
    Ok(peu - eu_star_for_mean(&ctx.mean, ctx.catalog).1)
}

/// Sum of mean utilities over the slate.
pub fn rq(q: &Query, mean: &Vector, catalog: &ItemCatalog) -> f64 {
    q.slate().iter().map(|&i| mean.dot(catalog.embedding(i))).sum()
}

/// Seeded uniform score for the random acquisition function.
fn random_score(q: &Query, ctx: &AcqContext) -> f64 {
    let wire = q.to_wire(ctx.catalog, ctx.semantics);
    let key = str_key(&wire.to_string());
    rng_from_seed(derive_seed(ctx.cfg.rng_seed, &[key])).random()
}

/// Information term of the configured acquisition function; larger is better.
pub fn information_score(q: &Query, ctx: &AcqContext) -> Result<f64> {
    let sign = if ctx.cfg.maximize_information { 1.0 } else { -1.0 };
    Ok(match ctx.cfg.kind {
        AcquisitionKind::Random => random_score(q, ctx),
        AcquisitionKind::Entropy => sign * entropy_af(q, ctx)?,
        AcquisitionKind::MutualInformation => sign * mutual_information_af(q, ctx)?,
        AcquisitionKind::Evoi => evoi_af(q, ctx)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub ig: f64,
    pub rq: f64,
    pub blended: f64,
    pub ig_scale: f64,
    pub rq_scale: f64,
}

impl QueryScore {
    pub fn new(ig: f64, rq: f64, gamma: f64, ig_scale: f64, rq_scale: f64) -> Self {
        Self {
            ig,
            rq,
            blended: gamma * ig / ig_scale + (1.0 - gamma) * rq / rq_scale,
            ig_scale,
            rq_scale,
        }
    }
}

/// Unscaled BPER score: `γ·ig + (1 − γ)·rq`.
pub fn bper_score(q: &Query, ctx: &AcqContext) -> Result<QueryScore> {
    let ig = information_score(q, ctx)?;
    Ok(QueryScore::new(ig, rq(q, &ctx.mean, ctx.catalog), ctx.cfg.gamma, 1.0, 1.0))
}

/// Standard deviation used to normalize a score column.
pub fn column_scale(values: &[f64], scaling: ScoreScaling) -> f64 {
    match scaling {
        ScoreScaling::Raw => 1.0,
        ScoreScaling::CandidateStd => {
            let (_, sd) = mean_std(values);
            if sd < 1e-12 || !sd.is_finite() {
                1.0
            } else {
                sd
            }
        }
    }
}

/// Raw `(ig, rq)` for every candidate, computed in parallel.
pub fn raw_scores(candidates: &[Query], ctx: &AcqContext) -> Result<Vec<(f64, f64)>> {
    candidates
        .par_iter()
        .map(|q| Ok((information_score(q, ctx)?, rq(q, &ctx.mean, ctx.catalog))))
        .collect()
}

/// BPER scores with IG and RQ each scaled across the candidate set.
pub fn score_candidates(candidates: &[Query], ctx: &AcqContext) -> Result<Vec<QueryScore>> {
    let raw = raw_scores(candidates, ctx)?;
    let igs: Vec<f64> = raw.iter().map(|r| r.0).collect();
    let rqs: Vec<f64> = raw.iter().map(|r| r.1).collect();
    let ig_scale = column_scale(&igs, ctx.cfg.scaling);
    let rq_scale = column_scale(&rqs, ctx.cfg.scaling);
    Ok(raw
        .into_iter()
        .map(|(ig, r)| QueryScore::new(ig, r, ctx.cfg.gamma, ig_scale, rq_scale))
        .collect())
}

/// The tag of a relaxed query: a free CAV vector or a free Gaussian over CAVs.
#[derive(Debug, Clone, PartialEq)]
pub enum ContinuousCav {
    Fixed { vector: Vector, sigma: f64 },
    Uncertain { mean: Vector, chol: Matrix, sigma: f64 },
}

impl ContinuousCav {
    pub fn sigma(&self) -> f64 {
        match self {
            ContinuousCav::Fixed { sigma, .. } | ContinuousCav::Uncertain { sigma, .. } => *sigma,
        }
    }
}

/// A query whose slate embeddings (and tag) are free real parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousQuery {
    pub kind: QueryType,
    pub items: Vec<Vector>,
    pub cav: Option<ContinuousCav>,
}

impl ContinuousQuery {
    /// Relaxation of a discrete query.
    pub fn from_query(q: &Query, catalog: &ItemCatalog, semantics: &Semantics) -> Self {
        let items = q.slate().iter().map(|&i| catalog.embedding(i).clone()).collect();
        let cav = q.tag().map(|t| match semantics.get(t) {
            crate::response::TagSemantics::Fixed(c) => ContinuousCav::Fixed {
                vector: c.vector.clone(),
                sigma: c.noise_sigma,
            },
            crate::response::TagSemantics::Uncertain(b) => ContinuousCav::Uncertain {
                mean: b.mean.clone(),
                chol: b.chol_scale.clone(),
                sigma: b.noise_sigma,
            },
        });
        Self {
            kind: q.query_type(),
            items,
            cav,
        }
    }

    pub fn dim(&self) -> usize {
        self.items[0].len()
    }

    /// Flattened parameters: item embeddings, then CAV vector or mean, then
    /// the packed lower scale.
    pub fn params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.items.iter().flat_map(|x| x.iter().copied()).collect();
        match &self.cav {
            None => {}
            Some(ContinuousCav::Fixed { vector, .. }) => out.extend(vector.iter()),
            Some(ContinuousCav::Uncertain { mean, chol, .. }) => {
                out.extend(mean.iter());
                out.extend(pack_lower(chol));
            }
        }
        out
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        let d = self.dim();
        let n = self.items.len();
        let items = (0..n).map(|k| Vector::from_row_slice(&p[k * d..(k + 1) * d])).collect();
        let off = n * d;
        let cav = self.cav.as_ref().map(|c| match c {
            ContinuousCav::Fixed { sigma, .. } => ContinuousCav::Fixed {
                vector: Vector::from_row_slice(&p[off..off + d]),
                sigma: *sigma,
            },
            ContinuousCav::Uncertain { sigma, .. } => ContinuousCav::Uncertain {
                mean: Vector::from_row_slice(&p[off..off + d]),
                chol: unpack_lower(&p[off + d..], d),
                sigma: *sigma,
            },
        });
        Self {
            kind: self.kind,
            items,
            cav,
        }
    }
}

/// Frozen standard-normal draws for the reparameterized CAV.
pub fn frozen_eps(d: usize, n: usize, seed: u64) -> Vec<Vector> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal))))
        .collect()
}

/// Value and flattened gradient (in [`ContinuousQuery::params`] order).
#[derive(Debug, Clone, PartialEq)]
pub struct PeuGradient {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Accumulates `Σ_j Σ_ρ a_jρ ∂P_jρ` into item and CAV gradients for one CAV.
struct Adjoint<'a> {
    kernel: &'a SlateKernel,
    sigma: f64,
}

impl Adjoint<'_> {
    /// Probabilities for every utility sample given CAV `c`.
    fn probs(&self, utilities: &[Vector], c: Option<&Vector>) -> Vec<Vec<f64>> {
        let n_out = self.kernel.n_outcomes();
        utilities
            .iter()
            .map(|u| match self.kernel.probs(u, c, self.sigma) {
                Ok(p) => p,
                Err(_) => vec![1.0 / n_out as f64; n_out],
            })
            .collect()
    }

    /// Back-propagates adjoints `a[j][ρ]` to the slate items and the CAV.
    fn backprop(&self, utilities: &[Vector], c: Option<&Vector>, a: &[Vec<f64>], g_items: &mut [Vector], g_cav: &mut Vector) {
        let k = self.kernel;
        let s_len = k.items.len() as f64;
        for (phi, aj) in utilities.iter().zip(a) {
            match k.kind {
                QueryType::Item => {
                    let p = k.item_probs(phi);
                    let abar: f64 = aj.iter().zip(&p).map(|(x, y)| x * y).sum();
                    for (i, g) in g_items.iter_mut().enumerate() {
                        g.axpy(p[i] * (aj[i] - abar) / k.temperature, phi, 1.0);
                    }
                }
                QueryType::Attribute => {
                    let (Some(c), Ok(t)) = (c, target_item(phi, k.max_norm)) else {
                        continue;
                    };
                    let diff = aj[0] - aj[1];
                    match k.attribute {
                        AttributeModel::MeanSlate => {
                            let s = c.dot(&(&t - &k.mean)) / self.sigma;
                            let coef = diff * norm_pdf(s) / self.sigma;
                            for g in g_items.iter_mut() {
                                g.axpy(-coef / s_len, c, 1.0);
                            }
                            g_cav.axpy(coef, &(&t - &k.mean), 1.0);
                        }
                        AttributeModel::MeanProbability => {
                            let ct = c.dot(&t);
                            for ((x, w), g) in k.items.iter().zip(&k.weights).zip(g_items.iter_mut()) {
                                let s = (ct - c.dot(x)) / self.sigma;
                                let coef = diff * w * norm_pdf(s) / self.sigma;
                                g.axpy(-coef, c, 1.0);
                                g_cav.axpy(coef, &(&t - x), 1.0);
                            }
                        }
                    }
                }
                QueryType::Ipa => {
                    let (Some(c), Ok(t)) = (c, target_item(phi, k.max_norm)) else {
                        continue;
                    };
                    let pi = k.item_probs(phi);
                    let ct = c.dot(&t);
                    let n = k.items.len();
                    let mut b = vec![0.0; n];
                    for i in 0..n {
                        let x = &k.items[i];
                        let s = (ct - c.dot(x)) / self.sigma;
                        let cdf = norm_cdf(s);
                        let (ap, am) = (aj[2 * i], aj[2 * i + 1]);
                        b[i] = ap * cdf + am * (1.0 - cdf);
                        let coef = pi[i] * (ap - am) * norm_pdf(s) / self.sigma;
                        g_items[i].axpy(-coef, c, 1.0);
                        g_cav.axpy(coef, &(&t - x), 1.0);
                    }
                    let bbar: f64 = b.iter().zip(&pi).map(|(x, y)| x * y).sum();
                    for i in 0..n {
                        g_items[i].axpy(pi[i] * (b[i] - bbar) / k.temperature, phi, 1.0);
                    }
                }
            }
        }
    }
}

/// Norm-form PEU surrogate `z·Σ_ρ ‖Σ_j w_j P(ρ|q,φ_j) φ_j‖`, averaged over
/// frozen CAV draws `c = μ + Lᵀε`, with its analytic gradient.
pub fn peu_differentiable(
    q: &ContinuousQuery,
    sample: &BeliefSample,
    model: &ResponseModel,
    max_norm: f64,
    eps: &[Vector],
) -> Result<PeuGradient> {
    let d = q.dim();
    let kernel = SlateKernel::new(q.kind, q.items.clone(), model, max_norm)?;
    let adj = Adjoint {
        kernel: &kernel,
        sigma: q.cav.as_ref().map_or(1.0, ContinuousCav::sigma),
    };
    if q.kind.needs_tag() && q.cav.is_none() {
        return Err(Error::InvalidQuery("relaxed attribute/IpA query needs a CAV".into()));
    }
    let cavs: Vec<Option<Vector>> = match &q.cav {
        None => vec![None],
        Some(ContinuousCav::Fixed { vector, .. }) => vec![Some(vector.clone())],
        Some(ContinuousCav::Uncertain { mean, chol, .. }) => {
            if eps.is_empty() {
                return Err(Error::Config("uncertain relaxed CAV needs ε draws".into()));
            }
            eps.iter().map(|e| Some(mean + chol.transpose() * e)).collect()
        }
    };
    let w = sample.weights();
    let phis = sample.particles();
    let n_c = cavs.len() as f64;
    let mut value = 0.0;
    let mut g_items = vec![Vector::zeros(d); q.items.len()];
    let mut g_mean = Vector::zeros(d);
    let mut g_chol = Matrix::zeros(d, d);
    for (e_idx, c) in cavs.iter().enumerate() {
        let p = adj.probs(phis, c.as_ref());
        let n_out = kernel.n_outcomes();
        let mut a = vec![vec![0.0; n_out]; phis.len()];
        for rho in 0..n_out {
            let mut v = Vector::zeros(d);
            for ((row, phi), wj) in p.iter().zip(phis).zip(w) {
                v.axpy(wj * row[rho], phi, 1.0);
            }
            let norm = v.norm();
            value += max_norm * norm / n_c;
            if norm > 0.0 {
                let u = v / norm;
                for (j, phi) in phis.iter().enumerate() {
                    a[j][rho] = max_norm * w[j] * u.dot(phi) / n_c;
                }
            }
        }
        let mut g_c = Vector::zeros(d);
        adj.backprop(phis, c.as_ref(), &a, &mut g_items, &mut g_c);
        g_mean += &g_c;
        if let Some(ContinuousCav::Uncertain { .. }) = &q.cav {
            let e = &eps[e_idx];
            for r in 0..d {
                for col in 0..=r {
                    g_chol[(r, col)] += e[r] * g_c[col];
                }
            }
        }
    }
    let mut grad: Vec<f64> = g_items.iter().flat_map(|x| x.iter().copied()).collect();
    match &q.cav {
        None => {}
        Some(ContinuousCav::Fixed { .. }) => grad.extend(g_mean.iter()),
        Some(ContinuousCav::Uncertain { .. }) => {
            grad.extend(g_mean.iter());
            grad.extend(pack_lower(&g_chol));
        }
    }
    Ok(PeuGradient { value, grad })
}
