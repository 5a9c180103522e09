//! Cosine alignment, NDCG of the belief's recommendations, and NDCG of the
//! slate actually shown.

use elicit_core::catalog::ItemCatalog;
use elicit_core::session::top_k;
use elicit_core::Vector;

/// Cosine between the posterior mean and the true utility. The flag is set
/// when either vector is zero, in which case the value is 0.
pub fn cosine_metric(posterior_mean: &Vector, truth: &Vector) -> (f64, bool) {
    let denom = posterior_mean.norm() * truth.norm();
    if denom == 0.0 {
        return (0.0, true);
    }
    ((posterior_mean.dot(truth) / denom).clamp(-1.0, 1.0), false)
}

/// True utilities min-max normalized over the catalog.
pub fn gains(truth: &Vector, catalog: &ItemCatalog) -> Vec<f64> {
    let u: Vec<f64> = (0..catalog.len()).map(|i| truth.dot(catalog.embedding(i))).collect();
    let lo = u.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        u.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; u.len()]
    }
}

fn dcg(list: &[usize], gains: &[f64]) -> f64 {
    list.iter()
        .enumerate()
        .map(|(pos, &i)| gains[i] / ((pos + 2) as f64).log2())
        .sum()
}

/// DCG of `list` over the DCG of the true top-`|list|` items. A catalog with
/// no gain spread scores 1.
pub fn ndcg_of_list(list: &[usize], truth: &Vector, catalog: &ItemCatalog) -> f64 {
    let g = gains(truth, catalog);
    let ideal = dcg(&top_k(truth, catalog, list.len()), &g);
    if ideal <= 0.0 {
        return 1.0;
    }
    (dcg(list, &g) / ideal).clamp(0.0, 1.0)
}

/// NDCG of the belief's top-`k` items.
pub fn ndcg_metric(posterior_mean: &Vector, truth: &Vector, catalog: &ItemCatalog, k: usize) -> f64 {
    ndcg_of_list(&top_k(posterior_mean, catalog, k), truth, catalog)
}

/// NDCG of the presented slate in presented order.
pub fn query_ndcg_metric(slate: &[usize], truth: &Vector, catalog: &ItemCatalog) -> f64 {
    ndcg_of_list(slate, truth, catalog)
}
