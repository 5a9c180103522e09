//! Simulated environments: a synthetic Gaussian world and a RecSim-style
//! generator that produces tag data and trains CAVs from it.

use crate::{io_err, Result, SimError};
use elicit_core::catalog::{
    build_cav_training_set, save_catalog, save_tags, GaussianUserPrior, ItemCatalog, TagDataset, TagRecord, TrueUser,
};
use elicit_core::cav::{cav_quality, save_cavs, train_cav, Cav, CavTrainConfig};
use elicit_core::linalg::{lower_scale_for, matrix_to_rows, rows_to_matrix};
use elicit_core::rng::{derive_seed, rng_from_seed, str_key, Rng};
use elicit_core::{Matrix, Vector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// One simulated user: the RS prior and the hidden ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimUser {
    pub prior: GaussianUserPrior,
    pub truth: TrueUser,
}

#[derive(Serialize, Deserialize)]
struct SimUserRow {
    prior_mean: Vec<f64>,
    prior_scale_rows: Vec<Vec<f64>>,
    user: TrueUser,
}

impl SimUser {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&SimUserRow {
            prior_mean: self.prior.mean().iter().copied().collect(),
            prior_scale_rows: matrix_to_rows(self.prior.scale()),
            user: self.truth.clone(),
        })
        .expect("user serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let row: SimUserRow = serde_json::from_str(s)?;
        let d = row.prior_mean.len();
        let prior = GaussianUserPrior::new(Vector::from_vec(row.prior_mean), rows_to_matrix(&row.prior_scale_rows, d)?)?;
        Ok(Self { prior, truth: row.user })
    }
}

/// A catalog, its tag semantics and a user population.
#[derive(Debug, Clone)]
pub struct Environment {
    pub catalog: Arc<ItemCatalog>,
    pub cavs: Vec<Cav>,
    pub users: Vec<SimUser>,
    /// Generated tag records (RecSim-style only).
    pub tags: Option<TagDataset>,
}

impl Environment {
    pub fn user(&self, idx: usize) -> Result<&SimUser> {
        self.users.get(idx).ok_or_else(|| {
            SimError::Config(format!("user {idx} requested but the population has {}", self.users.len()))
        })
    }
}

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const CAVS_FILE: &str = "cavs.jsonl";
pub const USERS_FILE: &str = "users.jsonl";
pub const TAGS_FILE: &str = "tags.jsonl";

/// Writes the catalog, CAVs, users and (if present) tags into `dir` and
/// returns the written paths.
pub fn write_environment(env: &Environment, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut out = vec![dir.join(CATALOG_FILE), dir.join(CAVS_FILE), dir.join(USERS_FILE)];
    save_catalog(&env.catalog, &out[0])?;
    save_cavs(&env.cavs, &out[1])?;
    let users: String = env.users.iter().map(|u| u.to_json() + "\n").collect();
    std::fs::write(&out[2], users).map_err(io_err(&out[2]))?;
    if let Some(tags) = &env.tags {
        let path = dir.join(TAGS_FILE);
        save_tags(tags, &path)?;
        out.push(path);
    }
    Ok(out)
}

fn gaussian_vec(d: usize, rng: &mut Rng) -> Vector {
    Vector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

fn noise_map(cavs: &[Cav]) -> BTreeMap<String, f64> {
    cavs.iter().map(|c| (c.tag.clone(), c.noise_sigma)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticEnvConfig {
    pub n_items: usize,
    pub n_tags: usize,
    pub dim: usize,
    pub response_sigma: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SyntheticEnvConfig {
    fn default() -> Self {
        Self {
            n_items: 1000,
            n_tags: 10,
            dim: 5,
            response_sigma: 0.1,
            temperature: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_tags == 0 || self.dim == 0 {
            return Err(SimError::Config("synthetic env needs n_items, n_tags and dim ≥ 1".into()));
        }
        if !(self.response_sigma > 0.0) || !(self.temperature > 0.0) {
            return Err(SimError::Config("response_sigma and temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Standard-normal items and CAVs; user `u` gets prior mean `N(0, I)`,
/// covariance `AᵀA + 0.1·I` with `A_ij ~ N(0, 0.3²)`, and a true utility
/// drawn from that prior. Users depend only on `(seed, u)`.
pub fn gen_synthetic_env(cfg: &SyntheticEnvConfig, n_users: usize) -> Result<Environment> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[1]));
    let catalog = ItemCatalog::from_embeddings((0..cfg.n_items).map(|i| (format!("item{i:04}"), gaussian_vec(d, &mut rng))))?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[2]));
    let cavs = (0..cfg.n_tags)
        .map(|g| Cav::new(format!("tag{g}"), gaussian_vec(d, &mut rng), cfg.response_sigma))
        .collect::<elicit_core::Result<Vec<_>>>()?;
    let noise = noise_map(&cavs);
    let a_dist = Normal::new(0.0, 0.3).expect("valid normal");
    let users = (0..n_users)
        .map(|u| {
            let mut rng = rng_from_seed(derive_seed(cfg.seed, &[3, u as u64]));
            let mean = gaussian_vec(d, &mut rng);
            let a = Matrix::from_fn(d, d, |_, _| a_dist.sample(&mut rng));
            let cov = a.transpose() * &a + Matrix::identity(d, d) * 0.1;
            let prior = GaussianUserPrior::new(mean, lower_scale_for(&cov)?)?;
            let utility = prior.sample(&mut rng);
            let truth = TrueUser::new(utility, noise.clone(), cfg.temperature)?;
            Ok(SimUser { prior, truth })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Environment {
        catalog: Arc::new(catalog),
        cavs,
        users,
        tags: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecsimEnvConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    /// The last `n_taggable` coordinates are soft attributes with a tag each.
    pub n_taggable: usize,
    pub n_clusters: usize,
    pub cluster_std: f64,
    pub tag_threshold: f64,
    pub tag_noise_std: f64,
    pub rating_power_exponent: f64,
    pub max_ratings: usize,
    /// Weight of the point mass at zero in the per-user tagging propensity.
    pub non_tagger_fraction: f64,
    pub tag_prob_range: (f64, f64),
    pub response_sigma: f64,
    pub temperature: f64,
    /// Share of users whose tags are held out for CAV quality.
    pub holdout_fraction: f64,
    pub cav_training: CavTrainConfig,
    pub seed: u64,
}

impl Default for RecsimEnvConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 800,
            dim: 25,
            n_taggable: 5,
            n_clusters: 100,
            cluster_std: 0.5,
            tag_threshold: 0.5,
            tag_noise_std: 0.1,
            rating_power_exponent: 1.1,
            max_ratings: 1000,
            non_tagger_fraction: 0.8,
            tag_prob_range: (0.1, 0.5),
            response_sigma: 0.25,
            temperature: 0.5,
            holdout_fraction: 0.2,
            cav_training: CavTrainConfig::default(),
            seed: 0,
        }
    }
}

impl RecsimEnvConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SimError::Config(m.into()));
        if self.n_users == 0 || self.n_items == 0 || self.dim == 0 || self.n_clusters == 0 {
            return fail("recsim env needs n_users, n_items, dim and n_clusters ≥ 1");
        }
        if self.n_taggable == 0 || self.n_taggable > self.dim {
            return fail("n_taggable must be in 1..=dim");
        }
        if !(self.rating_power_exponent > 1.0) {
            return fail("rating_power_exponent must exceed 1");
        }
        if !(self.response_sigma > 0.0) || !(self.temperature > 0.0) || !(self.cluster_std > 0.0) {
            return fail("response_sigma, temperature and cluster_std must be positive");
        }
        let (lo, hi) = self.tag_prob_range;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) || !(0.0..=1.0).contains(&self.non_tagger_fraction) {
            return fail("tagging probabilities must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail("holdout_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn tag_name(&self, s: usize) -> String {
        format!("attr{s}")
    }
}

/// Output of the RecSim-style generator.
#[derive(Debug, Clone)]
pub struct RecsimEnv {
    pub env: Environment,
    /// All generated tag records (train and held-out users).
    pub tags: TagDataset,
    /// Coordinate of each soft attribute in the embedding, keyed by tag.
    pub soft_dims: BTreeMap<String, usize>,
    /// Held-out quality per trained tag, when the held-out split has both labels.
    pub quality: BTreeMap<String, f64>,
}

struct Mixture {
    means: Vec<Vector>,
    std: f64,
}

impl Mixture {
    /// Coordinates are redrawn until they land in `[0, 1]`.
    fn draw(&self, weights: &[f64], rng: &mut Rng) -> Vector {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let k = weights
            .iter()
            .position(|w| {
                acc += w;
                u < acc
            })
            .unwrap_or(weights.len() - 1);
        let mu = &self.means[k];
        Vector::from_fn(mu.len(), |a, _| loop {
            let x = mu[a] + self.std * rng.sample::<f64, _>(StandardNormal);
            if (0.0..=1.0).contains(&x) {
                break x;
            }
        })
    }
}

fn uniform_weights(k: usize, rng: &mut Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// `k` distinct indices drawn sequentially without replacement with
/// probability proportional to `exp(score)` (Gumbel top-k).
fn softmax_without_replacement(scores: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (s - (-u.ln()).ln(), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.truncate(k);
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Items, true utilities and raw tags before any CAV training.
#[derive(Debug, Clone)]
pub struct RecsimPopulation {
    pub catalog: ItemCatalog,
    pub utilities: Vec<Vector>,
    pub tags: TagDataset,
    pub soft_dims: BTreeMap<String, usize>,
}

/// Items and users from a shared truncated Gaussian mixture over `[0, 1]^d`
/// with separate mixture weights; power-law rating counts; utility-biased
/// rated sets; tags on rated items whose soft-attribute value clears the
/// threshold plus noise.
pub fn gen_recsim_population(cfg: &RecsimEnvConfig) -> Result<RecsimPopulation> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[10]));
    let mixture = Mixture {
        means: (0..cfg.n_clusters)
            .map(|_| Vector::from_fn(d, |_, _| rng.random::<f64>()))
            .collect(),
        std: cfg.cluster_std,
    };
    let item_w = uniform_weights(cfg.n_clusters, &mut rng);
    let user_w = uniform_weights(cfg.n_clusters, &mut rng);
    let items: Vec<Vector> = (0..cfg.n_items).map(|_| mixture.draw(&item_w, &mut rng)).collect();
    let popularity: Vec<f64> = (0..cfg.n_items).map(|_| rng.random::<f64>()).collect();
    let utilities: Vec<Vector> = (0..cfg.n_users).map(|_| mixture.draw(&user_w, &mut rng)).collect();
    let catalog = ItemCatalog::from_embeddings(items.iter().enumerate().map(|(i, v)| (format!("item{i:05}"), v.clone())))?;

    let soft_dims: BTreeMap<String, usize> = (0..cfg.n_taggable).map(|s| (cfg.tag_name(s), d - cfg.n_taggable + s)).collect();
    let max_ratings = cfg.max_ratings.min(cfg.n_items).max(1);
    let zipf = Zipf::new(max_ratings as f64, cfg.rating_power_exponent).map_err(|e| SimError::Config(e.to_string()))?;
    let tag_noise = Normal::new(0.0, cfg.tag_noise_std.max(0.0)).map_err(|e| SimError::Config(e.to_string()))?;
    let mut records = Vec::new();
    for (u, w) in utilities.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &[11, u as u64]));
        let n_rated = (zipf.sample(&mut rng) as usize).clamp(1, max_ratings);
        let scores: Vec<f64> = items.iter().zip(&popularity).map(|(v, b)| w.dot(v) + b).collect();
        let rated = softmax_without_replacement(&scores, n_rated, &mut rng);
        let p_tag = if rng.random::<f64>() < cfg.non_tagger_fraction {
            0.0
        } else {
            rng.random_range(cfg.tag_prob_range.0..=cfg.tag_prob_range.1)
        };
        let user = format!("user{u:05}");
        for i in rated {
            if rng.random::<f64>() >= p_tag {
                continue;
            }
            for (tag, &dim) in &soft_dims {
                if items[i][dim] >= cfg.tag_threshold + tag_noise.sample(&mut rng) {
                    records.push(TagRecord {
                        user: user.clone(),
                        item: catalog.id(i).to_string(),
                        tag: tag.clone(),
                    });
                }
            }
        }
    }
    let tags = TagDataset::new(records);
    if tags.is_empty() {
        return Err(SimError::NoTagData);
    }
    Ok(RecsimPopulation {
        catalog,
        utilities,
        tags,
        soft_dims,
    })
}

/// [`gen_recsim_population`] plus CAVs trained on the non-held-out users'
/// tags. The RS prior is the Gaussian fit of the whole user population.
pub fn gen_recsim_env(cfg: &RecsimEnvConfig) -> Result<RecsimEnv> {
    let RecsimPopulation {
        catalog,
        utilities,
        tags,
        soft_dims,
    } = gen_recsim_population(cfg)?;
    let d = cfg.dim;
    let held_out = |user: &str| {
        let h = derive_seed(cfg.seed, &[12, str_key(user)]);
        (h as f64 / u64::MAX as f64) < cfg.holdout_fraction
    };
    let train = TagDataset::new(tags.records().iter().filter(|r| !held_out(&r.user)).cloned());
    let test = TagDataset::new(tags.records().iter().filter(|r| held_out(&r.user)).cloned());
    let mut cavs = Vec::new();
    let mut quality = BTreeMap::new();
    for tag in soft_dims.keys() {
        if !train.tag_ids().contains(tag) {
            continue;
        }
        let data = build_cav_training_set(&train, &catalog, tag)?;
        if !data.has_both_labels() {
            continue;
        }
        let mut cav = train_cav(tag, &data, &cfg.cav_training, cfg.response_sigma)?;
        if test.tag_ids().contains(tag) {
            let held = build_cav_training_set(&test, &catalog, tag)?;
            if held.has_both_labels() {
                let q = cav_quality(&cav.vector, &held)?;
                cav.quality = Some(q);
                quality.insert(tag.clone(), q);
            }
        }
        cavs.push(cav);
    }
    if cavs.is_empty() {
        return Err(SimError::NoTagData);
    }

    let n = cfg.n_users as f64;
    let mean = utilities.iter().fold(Vector::zeros(d), |acc, u| acc + u) / n;
    let mut cov = utilities
        .iter()
        .fold(Matrix::zeros(d, d), |acc, u| acc + (u - &mean) * (u - &mean).transpose())
        / n.max(2.0);
    cov += Matrix::identity(d, d) * 1e-3;
    let prior = GaussianUserPrior::new(mean, lower_scale_for(&cov)?)?;
    let noise = noise_map(&cavs);
    let users = utilities
        .into_iter()
        .map(|u| {
            Ok(SimUser {
                prior: prior.clone(),
                truth: TrueUser::new(u, noise.clone(), cfg.temperature)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecsimEnv {
        env: Environment {
            catalog: Arc::new(catalog),
            cavs,
            users,
            tags: Some(tags.clone()),
        },
        tags,
        soft_dims,
        quality,
    })
}
