#![allow(dead_code)]

use elicit_core::belief::{ParticleBelief, PosteriorTarget};
use elicit_core::catalog::ItemCatalog;
use elicit_core::cav::Cav;
use elicit_core::response::{Query, Semantics};
use elicit_core::rng::rng_from_seed;
use elicit_core::Vector;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian_vec(d: usize, rng: &mut impl Rng) -> Vector {
    Vector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

pub fn random_catalog(n: usize, d: usize, seed: u64) -> ItemCatalog {
    let mut rng = rng_from_seed(seed);
    ItemCatalog::from_embeddings((0..n).map(|i| (format!("item{i:03}"), gaussian_vec(d, &mut rng)))).unwrap()
}

pub fn catalog_from_rows(rows: &[[f64; 2]]) -> ItemCatalog {
    ItemCatalog::from_embeddings(
        rows.iter()
            .enumerate()
            .map(|(i, r)| (format!("i{i}"), Vector::from_row_slice(r))),
    )
    .unwrap()
}

/// Normalized posterior mass on an `n × n` grid of cell centres over a square.
pub struct Grid {
    pub lo: [f64; 2],
    pub width: f64,
    pub n: usize,
    pub mass: Vec<f64>,
}

impl Grid {
    pub fn new(target: &PosteriorTarget, centre: [f64; 2], half_width: f64, n: usize) -> Self {
        let lo = [centre[0] - half_width, centre[1] - half_width];
        let width = 2.0 * half_width / n as f64;
        let mut logs = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let phi = Vector::from_vec(vec![lo[0] + (i as f64 + 0.5) * width, lo[1] + (j as f64 + 0.5) * width]);
                logs.push(target.log_density(&phi));
            }
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut mass: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|m| *m /= total);
        Self { lo, width, n, mass }
    }

    pub fn centre(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.lo[0] + (i as f64 + 0.5) * self.width,
            self.lo[1] + (j as f64 + 0.5) * self.width,
        ]
    }

    pub fn argmax(&self) -> [f64; 2] {
        let k = (0..self.mass.len()).max_by(|a, b| self.mass[*a].total_cmp(&self.mass[*b])).unwrap();
        self.centre(k / self.n, k % self.n)
    }

    /// Total variation between the grid mass and weighted particles, both
    /// binned into `block × block` groups of grid cells. Particles outside the
    /// grid count as mass the grid does not have.
    pub fn tv(&self, belief: &ParticleBelief, block: usize) -> f64 {
        let nb = self.n / block;
        let mut grid = vec![0.0; nb * nb];
        for i in 0..self.n {
            for j in 0..self.n {
                grid[(i / block) * nb + j / block] += self.mass[i * self.n + j];
            }
        }
        let mut part = vec![0.0; nb * nb];
        let mut outside = 0.0;
        for (p, w) in belief.particles().iter().zip(belief.weights()) {
            let fi = ((p[0] - self.lo[0]) / self.width).floor();
            let fj = ((p[1] - self.lo[1]) / self.width).floor();
            if fi < 0.0 || fj < 0.0 || fi >= self.n as f64 || fj >= self.n as f64 {
                outside += w;
                continue;
            }
            part[(fi as usize / block) * nb + fj as usize / block] += w;
        }
        0.5 * (grid.iter().zip(&part).map(|(a, b)| (a - b).abs()).sum::<f64>() + outside)
    }
}

/// `‖a − b‖∞ ≤ rel·max(1, ‖b‖∞)`.
pub fn close_rel(a: &[f64], b: &[f64], rel: f64) -> bool {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * scale)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + h;
            let up = f(&p);
            p[k] = x[k] - h;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Φ(x) = erfc(−x/√2)/2, with erfc from the Maclaurin series of erf for
/// small arguments and its continued fraction otherwise.
pub fn phi_oracle(x: f64) -> f64 {
    0.5 * erfc_oracle(-x / 2f64.sqrt())
}

pub fn erfc_oracle(z: f64) -> f64 {
    if z.abs() < 2.0 {
        let mut term = z;
        let mut sum = z;
        for n in 1..120 {
            term *= -z * z / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        return 1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum;
    }
    if z < 0.0 {
        return 2.0 - erfc_oracle(-z);
    }
    let mut frac = z;
    for k in (1..300).rev() {
        frac = z + (k as f64 / 2.0) / frac;
    }
    (-z * z).exp() / std::f64::consts::PI.sqrt() / frac
}

/// Response distribution computed from first principles for fixed CAVs.
pub fn oracle_lik(q: &Query, phi: &Vector, c: &ItemCatalog, s: &Semantics, temperature: f64) -> Vec<f64> {
    let slate = q.slate();
    let utils: Vec<f64> = slate.iter().map(|&i| c.embedding(i).dot(phi) / temperature).collect();
    let mx = utils.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = utils.iter().map(|u| (u - mx).exp()).sum();
    let items: Vec<f64> = utils.iter().map(|u| (u - mx).exp() / z).collect();
    let norm = phi.norm();
    let target = phi * (c.max_norm() / norm);
    match q {
        Query::Item { .. } => items,
        Query::Attribute { tag, .. } => {
            let cav = s.get(*tag).mean_vector();
            let sigma = s.get(*tag).sigma();
            let mut mean = Vector::zeros(phi.len());
            for &i in slate {
                mean += c.embedding(i);
            }
            mean /= slate.len() as f64;
            let p = phi_oracle(cav.dot(&(&target - mean)) / sigma);
            vec![p, 1.0 - p]
        }
        Query::Ipa { tag, .. } => {
            let cav = s.get(*tag).mean_vector();
            let sigma = s.get(*tag).sigma();
            slate
                .iter()
                .zip(&items)
                .flat_map(|(&i, pi)| {
                    let a = cav.dot(&(&target - c.embedding(i))) / sigma;
                    [pi * phi_oracle(a), pi * phi_oracle(-a)]
                })
                .collect()
        }
    }
}

pub fn oracle_eu(post: &[f64], particles: &[Vector], c: &ItemCatalog) -> f64 {
    (0..c.len())
        .map(|i| {
            particles
                .iter()
                .zip(post)
                .map(|(p, w)| w * p.dot(c.embedding(i)))
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// EVOI by staging every posterior reweighting and item scan explicitly.
pub fn oracle_evoi(q: &Query, particles: &[Vector], w: &[f64], c: &ItemCatalog, s: &Semantics) -> (f64, f64) {
    let liks: Vec<Vec<f64>> = particles.iter().map(|p| oracle_lik(q, p, c, s, 0.5)).collect();
    let eu0 = oracle_eu(w, particles, c);
    let mut peu = 0.0;
    for rho in 0..q.n_outcomes() {
        let joint: Vec<f64> = w.iter().zip(&liks).map(|(wj, l)| wj * l[rho]).collect();
        let p: f64 = joint.iter().sum();
        if p < 1e-12 {
            continue;
        }
        let post: Vec<f64> = joint.iter().map(|v| v / p).collect();
        peu += p * oracle_eu(&post, particles, c);
    }
    (peu, peu - eu0)
}

pub fn cav_semantics(vectors: &[[f64; 2]], sigma: f64) -> Semantics {
    let cavs: Vec<Cav> = vectors
        .iter()
        .enumerate()
        .map(|(t, v)| Cav::new(format!("t{t}"), Vector::from_row_slice(v), sigma).unwrap())
        .collect();
    Semantics::from_cavs(&cavs).unwrap()
}
