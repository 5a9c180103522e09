//! Concept activation vectors for soft attributes.
//!
//! A CAV `φ_g` is the weight vector of an L2-regularized logistic regression
//! (no intercept) separating items tagged with `g` from the contrast set.
//! Its dot product with an item embedding is the item's g-score.

use crate::catalog::TrainingSet;
use crate::linalg::{affine_draw, check_lower_shape, matrix_to_rows, rows_to_matrix};
use crate::rng::{rng_from_seed, Rng};
use crate::{Error, Matrix, Result, Vector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Response noise used by the synthetic environment.
pub const SYNTHETIC_NOISE_SIGMA: f64 = 0.1;
/// Response noise used by the RecSim-style and MovieLens-style setups.
pub const RECSIM_NOISE_SIGMA: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct Cav {
    pub tag: String,
    pub vector: Vector,
    pub noise_sigma: f64,
    pub quality: Option<f64>,
}

impl Cav {
    pub fn new(tag: impl Into<String>, vector: Vector, noise_sigma: f64) -> Result<Self> {
        if !(noise_sigma > 0.0) {
            return Err(Error::Config(format!("noise σ must be positive, got {noise_sigma}")));
        }
        Ok(Self {
            tag: tag.into(),
            vector,
            noise_sigma,
            quality: None,
        })
    }
}

/// Gaussian belief `N(mean, chol_scaleᵀ·chol_scale)` over a tag's CAV.
#[derive(Debug, Clone, PartialEq)]
pub struct CavBelief {
    pub tag: String,
    pub mean: Vector,
    pub chol_scale: Matrix,
    pub noise_sigma: f64,
}

impl CavBelief {
    pub fn new(tag: impl Into<String>, mean: Vector, chol_scale: Matrix, noise_sigma: f64) -> Result<Self> {
        check_lower_shape(&chol_scale, mean.len())?;
        if !(noise_sigma > 0.0) {
            return Err(Error::Config(format!("noise σ must be positive, got {noise_sigma}")));
        }
        Ok(Self {
            tag: tag.into(),
            mean,
            chol_scale,
            noise_sigma,
        })
    }

    /// Point-mass belief at a deterministic CAV.
    pub fn point_mass(cav: &Cav) -> Self {
        let d = cav.vector.len();
        Self {
            tag: cav.tag.clone(),
            mean: cav.vector.clone(),
            chol_scale: Matrix::zeros(d, d),
            noise_sigma: cav.noise_sigma,
        }
    }

    pub fn covariance(&self) -> Matrix {
        crate::linalg::covariance_of(&self.chol_scale)
    }

    pub fn draw(&self, rng: &mut Rng) -> Vector {
        let eps = Vector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(rng));
        affine_draw(&self.mean, &self.chol_scale, &eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CavTrainConfig {
    pub reg_lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CavTrainConfig {
    fn default() -> Self {
        Self {
            reg_lambda: 0.1,
            max_iters: 10_000,
            tol: 1e-8,
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Regularized logistic loss `Σ log(1 + exp(-y·wᵀx)) + λ/2·wᵀw`.
pub fn logistic_loss(w: &Vector, data: &TrainingSet, reg_lambda: f64) -> f64 {
    data.examples
        .iter()
        .map(|e| softplus(-e.label.sign() * w.dot(&e.embedding)))
        .sum::<f64>()
        + 0.5 * reg_lambda * w.norm_squared()
}

fn loss_grad_hess(w: &Vector, data: &TrainingSet, reg_lambda: f64) -> (Vector, Matrix) {
    let d = w.len();
    let mut grad = w * reg_lambda;
    let mut hess = Matrix::identity(d, d) * reg_lambda;
    for e in &data.examples {
        let y = e.label.sign();
        let margin = y * w.dot(&e.embedding);
        let s = sigmoid(-margin);
        grad.axpy(-y * s, &e.embedding, 1.0);
        hess.ger(s * (1.0 - s), &e.embedding, &e.embedding, 1.0);
    }
    (grad, hess)
}

/// Fits a CAV from `D_g` by damped Newton iterations from the zero vector.
/// Returns the vector with gradient norm at most `cfg.tol`.
pub fn train_cav(
    tag: &str,
    data: &TrainingSet,
    cfg: &CavTrainConfig,
    noise_sigma: f64,
) -> Result<Cav> {
    if !data.has_both_labels() {
        return Err(Error::UntrainableTag(tag.to_string()));
    }
    if !(cfg.reg_lambda >= 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::Config("reg_lambda must be ≥ 0 and tol > 0".into()));
    }
    let d = data.examples[0].embedding.len();
    let mut w = Vector::zeros(d);
    let mut loss = logistic_loss(&w, data, cfg.reg_lambda);
    for _ in 0..cfg.max_iters {
        let (grad, hess) = loss_grad_hess(&w, data, cfg.reg_lambda);
        let gnorm = grad.norm();
        if gnorm <= cfg.tol {
            return Cav::new(tag, w, noise_sigma);
        }
        let mut dir = hess
            .cholesky()
            .map(|c| -c.solve(&grad))
            .unwrap_or_else(|| -&grad);
        if dir.dot(&grad) >= 0.0 {
            dir = -&grad;
        }
        // Armijo backtracking
        let slope = dir.dot(&grad);
        let mut step = 1.0;
        loop {
            let cand = &w + &dir * step;
            let cand_loss = logistic_loss(&cand, data, cfg.reg_lambda);
            if cand_loss <= loss + 1e-4 * step * slope {
                w = cand;
                loss = cand_loss;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                let (grad, _) = loss_grad_hess(&w, data, cfg.reg_lambda);
                if grad.norm() <= cfg.tol {
                    return Cav::new(tag, w, noise_sigma);
                }
                return Err(Error::NonConvergence {
                    iters: cfg.max_iters,
                    grad_norm: grad.norm(),
                    last: w.iter().copied().collect(),
                });
            }
        }
    }
    let (grad, _) = loss_grad_hess(&w, data, cfg.reg_lambda);
    if grad.norm() <= cfg.tol {
        return Cav::new(tag, w, noise_sigma);
    }
    Err(Error::NonConvergence {
        iters: cfg.max_iters,
        grad_norm: grad.norm(),
        last: w.iter().copied().collect(),
    })
}

/// `c_g(i) = φ_gᵀ·φ_I(i)`.
pub fn g_score(cav: &Vector, item: &Vector) -> Result<f64> {
    if cav.len() != item.len() {
        return Err(Error::Dimension {
            expected: cav.len(),
            found: item.len(),
        });
    }
    Ok(cav.dot(item))
}

const EXACT_PAIR_LIMIT: usize = 1_000_000;

/// Fraction of (positive, negative) pairs whose positive item scores at
/// least as high as the negative one.
pub fn cav_quality(cav: &Vector, data: &TrainingSet) -> Result<f64> {
    if !data.has_both_labels() {
        return Err(Error::UntrainableTag("quality needs both labels".into()));
    }
    let pos: Vec<f64> = data.positives().map(|e| cav.dot(&e.embedding)).collect();
    let mut neg: Vec<f64> = data.negatives().map(|e| cav.dot(&e.embedding)).collect();
    let total = pos.len() * neg.len();
    let satisfied = if total <= EXACT_PAIR_LIMIT {
        pos.iter()
            .map(|p| neg.iter().filter(|n| p >= n).count())
            .sum::<usize>()
    } else {
        neg.sort_by(f64::total_cmp);
        pos.iter()
            .map(|p| neg.partition_point(|n| n <= p))
            .sum::<usize>()
    };
    Ok(satisfied as f64 / total as f64)
}

/// One reparameterized draw `μ_g + L_gᵀ·ε`.
pub fn sample_cav(belief: &CavBelief, seed: u64) -> Vector {
    belief.draw(&mut rng_from_seed(seed))
}

/// Log₁₀-evenly spaced values on `[lo, hi]`; a single value is `lo`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || lo == hi {
        return vec![lo; n];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|k| {
            if k == 0 {
                lo
            } else if k == n - 1 {
                hi
            } else {
                10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// Wraps each CAV in an isotropic Gaussian belief whose standard deviations
/// are log-evenly spread over `[sigma_lo, sigma_hi]` and assigned to tags in
/// a seeded random order.
pub fn make_uncertainty_suite(
    cavs: &[Cav],
    sigma_lo: f64,
    sigma_hi: f64,
    seed: u64,
) -> Result<Vec<CavBelief>> {
    if !(sigma_lo > 0.0 && sigma_lo <= sigma_hi) {
        return Err(Error::Config(format!(
            "need 0 < sigma_lo ≤ sigma_hi, got [{sigma_lo}, {sigma_hi}]"
        )));
    }
    let mut sigmas = log_spaced(sigma_lo, sigma_hi, cavs.len().max(1));
    sigmas.shuffle(&mut rng_from_seed(seed));
    Ok(cavs
        .iter()
        .zip(sigmas)
        .map(|(c, s)| {
            let d = c.vector.len();
            CavBelief {
                tag: c.tag.clone(),
                mean: c.vector.clone(),
                chol_scale: Matrix::identity(d, d) * s,
                noise_sigma: c.noise_sigma,
            }
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct CavRow {
    tag: String,
    vec: Vec<f64>,
    sigma: f64,
    quality: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CavBeliefRow {
    tag: String,
    mean: Vec<f64>,
    chol_rows: Vec<Vec<f64>>,
    sigma: f64,
}

fn read_rows<T: serde::de::DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_cavs<R: Read>(reader: R) -> Result<Vec<Cav>> {
    read_rows::<CavRow, _>(reader)?
        .into_iter()
        .map(|r| {
            let mut c = Cav::new(r.tag, Vector::from_vec(r.vec), r.sigma)?;
            c.quality = r.quality;
            Ok(c)
        })
        .collect()
}

pub fn write_cavs<W: Write>(cavs: &[Cav], mut w: W) -> std::io::Result<()> {
    for c in cavs {
        serde_json::to_writer(
            &mut w,
            &CavRow {
                tag: c.tag.clone(),
                vec: c.vector.iter().copied().collect(),
                sigma: c.noise_sigma,
                quality: c.quality,
            },
        )?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_cav_beliefs<R: Read>(reader: R) -> Result<Vec<CavBelief>> {
    read_rows::<CavBeliefRow, _>(reader)?
        .into_iter()
        .map(|r| {
            let d = r.mean.len();
            CavBelief::new(r.tag, Vector::from_vec(r.mean), rows_to_matrix(&r.chol_rows, d)?, r.sigma)
        })
        .collect()
}

pub fn write_cav_beliefs<W: Write>(beliefs: &[CavBelief], mut w: W) -> std::io::Result<()> {
    for b in beliefs {
        serde_json::to_writer(
            &mut w,
            &CavBeliefRow {
                tag: b.tag.clone(),
                mean: b.mean.iter().copied().collect(),
                chol_rows: matrix_to_rows(&b.chol_scale),
                sigma: b.noise_sigma,
            },
        )?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_cavs(path: &Path) -> Result<Vec<Cav>> {
    read_cavs(File::open(path).map_err(io_error(path))?)
}

pub fn save_cavs(cavs: &[Cav], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_error(path))?);
    write_cavs(cavs, &mut w).map_err(io_error(path))?;
    w.flush().map_err(io_error(path))
}

pub fn load_cav_beliefs(path: &Path) -> Result<Vec<CavBelief>> {
    read_cav_beliefs(File::open(path).map_err(io_error(path))?)
}

pub fn save_cav_beliefs(beliefs: &[CavBelief], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_error(path))?);
    write_cav_beliefs(beliefs, &mut w).map_err(io_error(path))?;
    w.flush().map_err(io_error(path))
}
