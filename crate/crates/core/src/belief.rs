//! The RS's belief over a user's utility vector.
//!
//! The unnormalized log-posterior is the Gaussian prior quadratic form plus
//! the log-likelihood of every history entry. Beliefs come in three forms:
//! the prior itself, a weighted particle set from MCMC, and a Laplace-style
//! Gaussian centred at the MAP.

use crate::catalog::{GaussianUserPrior, ItemCatalog};
use crate::linalg::{covariance_of, precision_of};
use crate::response::{EntryLikelihood, History, Query, Response, ResponseModel, Semantics};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::stats::log_sum_exp;
use crate::{Error, Matrix, Result, Vector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// The log-posterior as a function of `φ`, with every entry's CAV draws frozen.
#[derive(Debug, Clone)]
pub struct PosteriorTarget {
    mean: Vector,
    precision: Matrix,
    entries: Vec<EntryLikelihood>,
}

impl PosteriorTarget {
    pub fn new(
        prior: &GaussianUserPrior,
        history: &History,
        catalog: &ItemCatalog,
        semantics: &Semantics,
        model: &ResponseModel,
    ) -> Result<Self> {
        if prior.dim() != catalog.dim() {
            return Err(Error::Dimension {
                expected: catalog.dim(),
                found: prior.dim(),
            });
        }
        let entries = history
            .entries()
            .iter()
            .map(|(q, r)| EntryLikelihood::new(q, r, catalog, semantics, model))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mean: prior.mean().clone(),
            precision: precision_of(prior.scale())?,
            entries,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Appends one more history entry.
    pub fn push_entry(
        &mut self,
        query: &Query,
        response: &Response,
        catalog: &ItemCatalog,
        semantics: &Semantics,
        model: &ResponseModel,
    ) -> Result<()> {
        self.entries
            .push(EntryLikelihood::new(query, response, catalog, semantics, model)?);
        Ok(())
    }

    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn log_prior(&self, phi: &Vector) -> f64 {
        let diff = phi - &self.mean;
        -0.5 * diff.dot(&(&self.precision * &diff))
    }

    pub fn entry_log_lik(&self, k: usize, phi: &Vector) -> f64 {
        self.entries[k].log_lik(phi)
    }

    /// Log-likelihood of entries `range`.
    pub fn log_lik_range(&self, range: std::ops::Range<usize>, phi: &Vector) -> f64 {
        let mut total = 0.0;
        for e in &self.entries[range] {
            total += e.log_lik(phi);
            if total == f64::NEG_INFINITY {
                break;
            }
        }
        total
    }

    /// Log-posterior using the first `k` entries.
    pub fn log_density_prefix(&self, k: usize, phi: &Vector) -> f64 {
        self.log_prior(phi) + self.log_lik_range(0..k, phi)
    }

    pub fn log_density(&self, phi: &Vector) -> f64 {
        self.log_density_prefix(self.entries.len(), phi)
    }

    pub fn grad_prefix(&self, k: usize, phi: &Vector) -> Result<Vector> {
        let mut g = -(&self.precision * (phi - &self.mean));
        for e in &self.entries[..k] {
            g += e.grad_log_lik(phi)?;
        }
        Ok(g)
    }

    pub fn grad(&self, phi: &Vector) -> Result<Vector> {
        self.grad_prefix(self.entries.len(), phi)
    }
}

/// Unnormalized log-posterior of `φ` given the history.
pub fn log_unnormalized_posterior(
    phi: &Vector,
    prior: &GaussianUserPrior,
    history: &History,
    catalog: &ItemCatalog,
    semantics: &Semantics,
    model: &ResponseModel,
) -> Result<f64> {
    let target = PosteriorTarget::new(prior, history, catalog, semantics, model)?;
    check_dim(phi, target.dim())?;
    Ok(target.log_density(phi))
}

/// Gradient of [`log_unnormalized_posterior`]; errors at `φ = 0`.
pub fn grad_log_posterior(
    phi: &Vector,
    prior: &GaussianUserPrior,
    history: &History,
    catalog: &ItemCatalog,
    semantics: &Semantics,
    model: &ResponseModel,
) -> Result<Vector> {
    let target = PosteriorTarget::new(prior, history, catalog, semantics, model)?;
    check_dim(phi, target.dim())?;
    if phi.norm() == 0.0 {
        return Err(Error::UndefinedTarget);
    }
    target.grad(phi)
}

fn check_dim(phi: &Vector, dim: usize) -> Result<()> {
    if phi.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            found: phi.len(),
        });
    }
    Ok(())
}

/// Weighted particle approximation of the posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleBelief {
    particles: Vec<Vector>,
    log_weights: Vec<f64>,
    /// Number of history entries this belief has absorbed.
    pub history_len: usize,
}

impl ParticleBelief {
    /// Normalizes `log_weights` so that they log-sum-exp to zero.
    pub fn new(particles: Vec<Vector>, log_weights: Vec<f64>, history_len: usize) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::Config("particle belief needs at least one particle".into()));
        }
        if particles.len() != log_weights.len() {
            return Err(Error::Dimension {
                expected: particles.len(),
                found: log_weights.len(),
            });
        }
        let z = log_sum_exp(&log_weights);
        if !z.is_finite() {
            return Err(Error::Config("particle weights are all zero".into()));
        }
        Ok(Self {
            particles,
            log_weights: log_weights.iter().map(|w| w - z).collect(),
            history_len,
        })
    }

    pub fn uniform(particles: Vec<Vector>, history_len: usize) -> Result<Self> {
        let n = particles.len();
        Self::new(particles, vec![0.0; n], history_len)
    }

    pub fn particles(&self) -> &[Vector] {
        &self.particles
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn mean(&self) -> Vector {
        let mut m = Vector::zeros(self.particles[0].len());
        for (p, w) in self.particles.iter().zip(self.weights()) {
            m.axpy(w, p, 1.0);
        }
        m
    }

    /// Weighted covariance of the particles.
    pub fn covariance(&self) -> Matrix {
        let m = self.mean();
        let d = m.len();
        let mut c = Matrix::zeros(d, d);
        for (p, w) in self.particles.iter().zip(self.weights()) {
            let diff = p - &m;
            c += &diff * diff.transpose() * w;
        }
        c
    }
}

/// Gaussian belief centred at the MAP.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceBelief {
    pub mean: Vector,
    pub scale: Matrix,
    pub converged: bool,
    pub iterations: usize,
}

/// Any of the belief forms the RS can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum UserBelief {
    Prior(GaussianUserPrior),
    Particles(ParticleBelief),
    Laplace(LaplaceBelief),
}

impl UserBelief {
    pub fn mean(&self) -> Vector {
        match self {
            UserBelief::Prior(p) => p.mean().clone(),
            UserBelief::Particles(p) => p.mean(),
            UserBelief::Laplace(l) => l.mean.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            UserBelief::Prior(p) => p.dim(),
            UserBelief::Particles(p) => p.particles[0].len(),
            UserBelief::Laplace(l) => l.mean.len(),
        }
    }

    /// Location and lower scale when the belief is Gaussian.
    pub fn gaussian(&self) -> Option<(&Vector, &Matrix)> {
        match self {
            UserBelief::Prior(p) => Some((p.mean(), p.scale())),
            UserBelief::Laplace(l) => Some((&l.mean, &l.scale)),
            UserBelief::Particles(_) => None,
        }
    }

    pub fn snapshot(&self, cosine_to: Option<&Vector>) -> BeliefSnapshot {
        let mean = self.mean();
        let cosine_to = cosine_to.map(|v| {
            let denom = mean.norm() * v.norm();
            if denom > 0.0 {
                mean.dot(v) / denom
            } else {
                0.0
            }
        });
        let (kind, n) = match self {
            UserBelief::Particles(p) => ("particles", p.len()),
            _ => ("gaussian", 1),
        };
        BeliefSnapshot {
            kind: kind.to_string(),
            mean: mean.iter().copied().collect(),
            n,
            cosine_to,
        }
    }
}

/// Serializable summary of a belief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub kind: String,
    pub mean: Vec<f64>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine_to: Option<f64>,
}

/// Weighted particle mean, Laplace mean, or prior mean.
pub fn posterior_mean(belief: &UserBelief) -> Vector {
    belief.mean()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    MetropolisHastings,
    Hamiltonian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McmcMode {
    #[default]
    Batch,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub sampler: Sampler,
    pub n_particles: usize,
    pub burn_in: usize,
    /// Defaults to `0.1·mean(diag(scale))` for MH and 0.05 for HMC.
    pub step_size: Option<f64>,
    pub leapfrog_steps: usize,
    pub mode: McmcMode,
    /// Number of passes over the history in iterative mode; defaults to one per entry.
    pub iterative_rounds: Option<usize>,
    /// Independent chains in batch mode, concatenated in chain order.
    pub n_chains: usize,
    /// Transitions between kept draws.
    pub thin: usize,
    /// Transitions applied to every particle after each iterative round.
    pub move_steps: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            sampler: Sampler::MetropolisHastings,
            n_particles: 1000,
            burn_in: 500,
            step_size: None,
            leapfrog_steps: 10,
            mode: McmcMode::Batch,
            iterative_rounds: None,
            n_chains: 4,
            thin: 2,
            move_steps: 10,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 || self.n_chains == 0 || self.thin == 0 {
            return Err(Error::Config("n_particles, n_chains and thin must be positive".into()));
        }
        if self.sampler == Sampler::Hamiltonian && self.leapfrog_steps == 0 {
            return Err(Error::Config("leapfrog_steps must be positive".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("step_size must be positive, got {s}")));
            }
        }
        if self.iterative_rounds == Some(0) {
            return Err(Error::Config("iterative_rounds must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_step(&self, prior: &GaussianUserPrior) -> f64 {
        self.step_size.unwrap_or_else(|| match self.sampler {
            Sampler::MetropolisHastings => {
                let s = prior.scale();
                0.1 * s.diagonal().iter().map(|v| v.abs()).sum::<f64>() / s.nrows() as f64
            }
            Sampler::Hamiltonian => 0.05,
        })
    }
}

/// A Markov chain state with its cached log-density.
#[derive(Debug, Clone)]
struct ChainState {
    phi: Vector,
    log_p: f64,
}

struct Diverged;

/// One transition kernel targeting the first `k` entries' posterior.
struct Kernel<'a> {
    target: &'a PosteriorTarget,
    k: usize,
    sampler: Sampler,
    step: f64,
    leapfrog: usize,
}

impl Kernel<'_> {
    fn log_p(&self, phi: &Vector) -> f64 {
        self.target.log_density_prefix(self.k, phi)
    }

    fn init(&self, phi: Vector) -> ChainState {
        let log_p = self.log_p(&phi);
        ChainState { phi, log_p }
    }

    fn step(&self, state: &mut ChainState, rng: &mut Rng) -> std::result::Result<(), Diverged> {
        match self.sampler {
            Sampler::MetropolisHastings => {
                let proposal = &state.phi + gaussian(state.phi.len(), rng) * self.step;
                let lp = self.log_p(&proposal);
                let u: f64 = rng.random();
                if lp.is_finite() && u.ln() < lp - state.log_p {
                    state.phi = proposal;
                    state.log_p = lp;
                }
                Ok(())
            }
            Sampler::Hamiltonian => self.hmc_step(state, rng),
        }
    }

    fn hmc_step(&self, state: &mut ChainState, rng: &mut Rng) -> std::result::Result<(), Diverged> {
        let grad = |phi: &Vector| self.target.grad_prefix(self.k, phi).map_err(|_| Diverged);
        let p0 = gaussian(state.phi.len(), rng);
        let h0 = -state.log_p + 0.5 * p0.norm_squared();
        let mut q = state.phi.clone();
        let mut p = &p0 + grad(&q)? * (0.5 * self.step);
        for l in 0..self.leapfrog {
            q += &p * self.step;
            let g = grad(&q)?;
            let scale = if l + 1 == self.leapfrog { 0.5 } else { 1.0 };
            p += g * (scale * self.step);
        }
        let lp = self.log_p(&q);
        let h1 = -lp + 0.5 * p.norm_squared();
        if !h1.is_finite() || !q.iter().all(|v| v.is_finite()) {
            return Err(Diverged);
        }
        let u: f64 = rng.random();
        if u.ln() < h0 - h1 {
            state.phi = q;
            state.log_p = lp;
        }
        Ok(())
    }
}

fn gaussian(d: usize, rng: &mut Rng) -> Vector {
    Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Retries `run` with a halved step after each divergence.
fn with_divergence_retries<T>(
    step: f64,
    mut run: impl FnMut(f64) -> std::result::Result<T, Diverged>,
) -> Result<T> {
    const MAX_RETRIES: usize = 5;
    let mut s = step;
    for _ in 0..=MAX_RETRIES {
        match run(s) {
            Ok(v) => return Ok(v),
            Err(Diverged) => s *= 0.5,
        }
    }
    Err(Error::Divergence {
        retries: MAX_RETRIES,
        step_size: s * 2.0,
    })
}

fn split_counts(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|c| total / parts + usize::from(c < total % parts))
        .collect()
}

/// Samples the posterior by MCMC. Batch mode runs independent chains from
/// prior draws on the full history; iterative mode absorbs the history in
/// rounds, reweighting, resampling and moving the particle set each round.
pub fn mcmc_posterior(
    prior: &GaussianUserPrior,
    target: &PosteriorTarget,
    cfg: &McmcConfig,
    seed: u64,
) -> Result<ParticleBelief> {
    cfg.validate()?;
    match cfg.mode {
        McmcMode::Batch => batch_chains(prior, target, cfg, seed),
        McmcMode::Iterative => {
            let start = prior_particles(prior, cfg.n_particles, derive_seed(seed, &[0x1]));
            let start = ParticleBelief::uniform(start, 0)?;
            extend_particles(&start, target, cfg, seed)
        }
    }
}

fn prior_particles(prior: &GaussianUserPrior, n: usize, seed: u64) -> Vec<Vector> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| prior.sample(&mut rng)).collect()
}

fn batch_chains(
    prior: &GaussianUserPrior,
    target: &PosteriorTarget,
    cfg: &McmcConfig,
    seed: u64,
) -> Result<ParticleBelief> {
    let counts = split_counts(cfg.n_particles, cfg.n_chains.min(cfg.n_particles));
    let k = target.n_entries();
    let chains: Vec<Vec<Vector>> = counts
        .par_iter()
        .enumerate()
        .map(|(c, &count)| {
            with_divergence_retries(cfg.effective_step(prior), |step| {
                let kernel = Kernel {
                    target,
                    k,
                    sampler: cfg.sampler,
                    step,
                    leapfrog: cfg.leapfrog_steps,
                };
                let mut rng = rng_from_seed(derive_seed(seed, &[0x2, c as u64]));
                let mut state = kernel.init(prior.sample(&mut rng));
                for _ in 0..cfg.burn_in {
                    kernel.step(&mut state, &mut rng)?;
                }
                let mut out = Vec::with_capacity(count);
                for _ in 0..count {
                    for _ in 0..cfg.thin {
                        kernel.step(&mut state, &mut rng)?;
                    }
                    out.push(state.phi.clone());
                }
                Ok(out)
            })
        })
        .collect::<Result<_>>()?;
    ParticleBelief::uniform(chains.into_iter().flatten().collect(), k)
}

/// Round boundaries splitting entries `from..to` into `rounds` contiguous chunks.
fn round_ends(from: usize, to: usize, rounds: usize) -> Vec<usize> {
    let n = to - from;
    let rounds = rounds.clamp(1, n.max(1));
    (1..=rounds).map(|r| from + (r * n).div_ceil(rounds)).collect()
}

/// Systematic resampling indices for normalized log-weights.
fn systematic_resample(log_weights: &[f64], n: usize, rng: &mut Rng) -> Vec<usize> {
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut i = 0;
    for j in 0..n {
        let u = u0 + j as f64 / n as f64;
        while i + 1 < log_weights.len() && cum + log_weights[i].exp() <= u {
            cum += log_weights[i].exp();
            i += 1;
        }
        out.push(i);
    }
    out
}

/// Absorbs entries `belief.history_len..target.n_entries()` into a particle
/// belief by iterative reweight, resample and move rounds.
pub fn extend_particles(
    belief: &ParticleBelief,
    target: &PosteriorTarget,
    cfg: &McmcConfig,
    seed: u64,
) -> Result<ParticleBelief> {
    cfg.validate()?;
    let from = belief.history_len;
    let to = target.n_entries();
    if from > to {
        return Err(Error::Config(format!(
            "belief has absorbed {from} entries but the history has {to}"
        )));
    }
    if from == to {
        return Ok(belief.clone());
    }
    let rounds = cfg.iterative_rounds.unwrap_or(to - from);
    let base_step = cfg.step_size.unwrap_or_else(|| default_move_step(cfg, belief));
    let mut current = belief.clone();
    let mut start = from;
    for end in round_ends(from, to, rounds) {
        let round_seed = derive_seed(seed, &[0x3, end as u64]);
        let log_w: Vec<f64> = current
            .particles
            .par_iter()
            .zip(&current.log_weights)
            .map(|(p, w)| w + target.log_lik_range(start..end, p))
            .collect();
        let reweighted = ParticleBelief::new(current.particles.clone(), log_w, end)?;
        let mut rng = rng_from_seed(round_seed);
        let picks = systematic_resample(&reweighted.log_weights, cfg.n_particles, &mut rng);
        let moved: Vec<Vector> = with_divergence_retries(base_step, |step| {
            let kernel = Kernel {
                target,
                k: end,
                sampler: cfg.sampler,
                step,
                leapfrog: cfg.leapfrog_steps,
            };
            picks
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = rng_from_seed(derive_seed(round_seed, &[j as u64]));
                    let mut state = kernel.init(reweighted.particles[i].clone());
                    for _ in 0..cfg.move_steps {
                        kernel.step(&mut state, &mut rng)?;
                    }
                    Ok(state.phi)
                })
                .collect()
        })?;
        current = ParticleBelief::uniform(moved, end)?;
        start = end;
    }
    Ok(current)
}

/// Move step for iterative rounds: scaled to the current particle spread.
fn default_move_step(cfg: &McmcConfig, belief: &ParticleBelief) -> f64 {
    match cfg.sampler {
        Sampler::Hamiltonian => 0.05,
        Sampler::MetropolisHastings => {
            let c = belief.covariance();
            let d = c.nrows() as f64;
            let spread = (c.trace() / d).sqrt();
            (2.38 / d.sqrt() * spread).max(1e-6)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaplaceConfig {
    pub max_iters: usize,
    /// Stop when the gradient norm falls below this value.
    pub tol: f64,
    pub initial_step: f64,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tol: 1e-6,
            initial_step: 1.0,
        }
    }
}

/// MAP by gradient ascent with backtracking from the prior mean; the scale
/// is kept from the prior. Returns the best iterate with `converged = false`
/// when the iteration budget runs out.
pub fn laplace_posterior(
    prior: &GaussianUserPrior,
    target: &PosteriorTarget,
    cfg: &LaplaceConfig,
) -> Result<LaplaceBelief> {
    let mut phi = prior.mean().clone();
    if target.n_entries() > 0 && phi.norm() == 0.0 {
        phi = Vector::from_element(phi.len(), 1e-6);
    }
    // Ascent along the prior-covariance-preconditioned gradient.
    let metric = covariance_of(prior.scale());
    let mut f = target.log_density(&phi);
    let mut step = cfg.initial_step;
    let mut converged = target.n_entries() == 0;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        let g = target.grad(&phi)?;
        if g.norm() <= cfg.tol {
            converged = true;
            break;
        }
        let dir = &metric * &g;
        let slope = g.dot(&dir);
        let mut accepted = false;
        while step > 1e-14 {
            let cand = &phi + &dir * step;
            let fc = target.log_density(&cand);
            if fc.is_finite() && fc >= f + 1e-4 * step * slope {
                phi = cand;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent is possible at machine precision: a stationary point.
            converged = true;
            break;
        }
        step = (step * 2.0).min(1e6);
    }
    Ok(LaplaceBelief {
        mean: phi,
        scale: prior.scale().clone(),
        converged,
        iterations,
    })
}

/// How the RS updates its belief after each response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PosteriorMethod {
    Mcmc(McmcConfig),
    Laplace(LaplaceConfig),
}

impl Default for PosteriorMethod {
    fn default() -> Self {
        PosteriorMethod::Mcmc(McmcConfig::default())
    }
}

/// Computes the belief after `target`'s history. Iterative MCMC extends
/// `previous` when it is a particle belief over a prefix of the history.
pub fn update_belief(
    method: &PosteriorMethod,
    prior: &GaussianUserPrior,
    target: &PosteriorTarget,
    previous: Option<&UserBelief>,
    seed: u64,
) -> Result<UserBelief> {
    if target.n_entries() == 0 {
        return Ok(UserBelief::Prior(prior.clone()));
    }
    match method {
        PosteriorMethod::Laplace(cfg) => Ok(UserBelief::Laplace(laplace_posterior(prior, target, cfg)?)),
        PosteriorMethod::Mcmc(cfg) => match (cfg.mode, previous) {
            (McmcMode::Iterative, Some(UserBelief::Particles(p))) if p.history_len <= target.n_entries() => {
                Ok(UserBelief::Particles(extend_particles(p, target, cfg, seed)?))
            }
            _ => Ok(UserBelief::Particles(mcmc_posterior(prior, target, cfg, seed)?)),
        },
    }
}
