mod common;

use approx::assert_relative_eq;
use common::*;
use elicit_core::acquisition::{
    bper_score, entropy_af, eu_star, evoi_af, frozen_eps, mutual_information_af, peu_differentiable, peu_exact,
    peu_sampled, response_marginal, rq, AcqContext, AcquisitionConfig, AcquisitionKind, BeliefSample, ContinuousCav,
    ContinuousQuery, PeuMethod,
};
use elicit_core::belief::UserBelief;
use elicit_core::catalog::{GaussianUserPrior, ItemCatalog};
use elicit_core::cav::CavBelief;
use elicit_core::response::{Query, QueryType, ResponseModel, Semantics};
use elicit_core::rng::rng_from_seed;
use elicit_core::{Matrix, Vector};
use proptest::prelude::*;
use rand::Rng;

fn ctx<'a>(
    sample: BeliefSample,
    c: &'a ItemCatalog,
    s: &'a Semantics,
    m: &'a ResponseModel,
    cfg: &'a AcquisitionConfig,
) -> AcqContext<'a> {
    AcqContext::new(sample, c, s, m, cfg)
}

#[test]
fn point_mass_marginal_is_the_response_model() {
    let c = random_catalog(6, 2, 1);
    let s = cav_semantics(&[[0.5, -1.0]], 0.3);
    let m = ResponseModel::default();
    let cfg = AcquisitionConfig::default();
    let phi = Vector::from_vec(vec![0.7, 0.2]);
    let a = ctx(BeliefSample::point_mass(phi.clone()), &c, &s, &m, &cfg);
    for q in [
        Query::Item { slate: vec![0, 3, 4] },
        Query::Attribute { slate: vec![1, 2], tag: 0 },
        Query::Ipa { slate: vec![5, 0], tag: 0 },
    ] {
        let got = response_marginal(&q, &a).unwrap();
        let want = oracle_lik(&q, &phi, &c, &s, 0.5);
        for (g, w) in got.iter().zip(&want) {
            assert_relative_eq!(g, w, epsilon = 1e-12);
        }
    }
}

#[test]
fn symmetric_attribute_query_is_balanced() {
    let c = catalog_from_rows(&[[1.0, 0.3], [-1.0, -0.3], [0.2, 0.9]]);
    let s = cav_semantics(&[[0.8, 0.4]], 0.2);
    let m = ResponseModel::default();
    let cfg = AcquisitionConfig {
        n_user_samples: 10_000,
        ..Default::default()
    };
    let prior = GaussianUserPrior::isotropic(Vector::zeros(2), 1.0).unwrap();
    let a = AcqContext::from_belief(&UserBelief::Prior(prior), &c, &s, &m, &cfg).unwrap();
    let p = response_marginal(&Query::Attribute { slate: vec![0, 1], tag: 0 }, &a).unwrap();
    assert!((0.47..=0.53).contains(&p[0]), "{p:?}");
}

#[test]
fn three_particle_item_marginal_is_weighted_softmax() {
    let c = random_catalog(5, 3, 2);
    let mut rng = rng_from_seed(3);
    let parts: Vec<Vector> = (0..3).map(|_| gaussian_vec(3, &mut rng)).collect();
    let w = [0.2, 0.5, 0.3];
    let s = Semantics::default();
    let m = ResponseModel::default();
    let cfg = AcquisitionConfig::default();
    let a = ctx(BeliefSample::new(parts.clone(), w.to_vec()).unwrap(), &c, &s, &m, &cfg);
    let q = Query::Item { slate: vec![4, 1, 2] };
    let got = response_marginal(&q, &a).unwrap();
    for k in 0..3 {
        let want: f64 = parts.iter().zip(w).map(|(p, wj)| wj * oracle_lik(&q, p, &c, &s, 0.5)[k]).sum();
        assert_relative_eq!(got[k], want, epsilon = 1e-12);
    }
}

#[test]
fn entropy_reference_cases() {
    let c = random_catalog(6, 2, 4);
    let s = cav_semantics(&[[0.0, 0.0], [1.0, 0.4]], 0.3);
    let m = ResponseModel::default();
    let cfg = AcquisitionConfig::default();
    let mut rng = rng_from_seed(5);
    let parts: Vec<Vector> = (0..4).map(|_| gaussian_vec(2, &mut rng)).collect();
    let a = ctx(BeliefSample::uniform(parts).unwrap(), &c, &s, &m, &cfg);
    assert_eq!(entropy_af(&Query::Item { slate: vec![2] }, &a).unwrap(), 0.0);
    let h = entropy_af(&Query::Attribute { slate: vec![0, 1], tag: 0 }, &a).unwrap();
    assert_relative_eq!(h, std::f64::consts::LN_2, epsilon = 1e-15);
    let q = Query::Ipa { slate: vec![0, 1, 2, 3, 4], tag: 1 };
    let p = response_marginal(&q, &a).unwrap();
    assert_eq!(p.len(), 10);
    let direct: f64 = -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    assert_relative_eq!(entropy_af(&q, &a).unwrap(), direct, epsilon = 1e-12);
}

#[test]
fn mutual_information_reference_cases() {
    let c = random_catalog(6, 2, 6);
    let s = cav_semantics(&[[0.0, 0.0], [1.0, 0.4]], 0.3);
    let m = ResponseModel::default();
    let cfg = AcquisitionConfig::default();
    let mut rng = rng_from_seed(7);
    let parts: Vec<Vector> = (0..6).map(|_| gaussian_vec(2, &mut rng)).collect();
    let a = ctx(BeliefSample::uniform(parts).unwrap(), &c, &s, &m, &cfg);
    assert_eq!(mutual_information_af(&Query::Attribute { slate: vec![0, 1], tag: 0 }, &a).unwrap(), 0.0);
    let pm = ctx(BeliefSample::point_mass(Vector::from_vec(vec![0.3, 0.3])), &c, &s, &m, &cfg);
    assert_eq!(mutual_information_af(&Query::Ipa { slate: vec![0, 1], tag: 1 }, &pm).unwrap(), 0.0);
}

fn grid_belief(n_side: usize, seed: u64) -> (Vec<Vector>, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    let mut parts = Vec::new();
    let mut w = Vec::new();
    for i in 0..n_side {
        for j in 0..(50 / n_side) {
            parts.push(Vector::from_vec(vec![-2.0 + 4.0 * i as f64 / (n_side - 1) as f64, -2.0 + 4.0 * j as f64 / 9.0]));
            w.push(rng.random::<f64>() + 0.05);
        }
    }
    (parts, w)
}

#[test]
fn mutual_information_matches_grid_enumeration() {
    let c = random_catalog(6, 2, 8);
    let s = cav_semantics(&[[1.0, -0.5]], 0.4);
    let m = ResponseModel::default();
    let cfg = AcquisitionConfig::default();
    let (parts, w) = grid_belief(5, 9);
    let total: f64 = w.iter().sum();
    let a = ctx(BeliefSample::new(parts.clone(), w.clone()).unwrap(), &c, &s, &m, &cfg);
    let q = Query::Attribute { slate: vec![1, 4], tag: 0 };
    let mut joint = [0.0; 2];
    let mut cond = 0.0;
    for (p, wj) in parts.iter().zip(&w) {
        let l = oracle_lik(&q, p, &c, &s, 0.5);
        let wn = wj / total;
        joint[0] += wn * l[0];
        joint[1] += wn * l[1];
        cond -= wn * l.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    }
    let h = -joint.iter().map(|v| v * v.ln()).sum::<f64>();
    let mi = mutual_information_af(&q, &a).unwrap();
    assert!((mi - (h - cond)).abs() < 0.01);
    assert!(mi >= 0.0 && mi <= entropy_af(&q, &a).unwrap());
}

#[test]
fn eu_star_cases() {
    let c = random_catalog(100, 4, 10);
    let mut rng = rng_from_seed(11);
    let phi = gaussian_vec(4, &mut rng);
    let (best, v) = eu_star(&BeliefSample::point_mass(phi.clone()), &c);
    let brute = (0..100).max_by(|a, b| c.embedding(*a).dot(&phi).total_cmp(&c.embedding(*b).dot(&phi))).unwrap();
    assert_eq!(best, brute);
    assert_eq!(v, c.embedding(brute).dot(&phi));
    let sym = BeliefSample::uniform(vec![phi.clone(), -phi.clone()]).unwrap();
    assert_eq!(eu_star(&sym, &c), (0, 0.0));
    let parts: Vec<Vector> = (0..20).map(|_| gaussian_vec(4, &mut rng)).collect();
    let w: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
    let sample = BeliefSample::new(parts, w).unwrap();
    let mean = sample.mean();
    let mut scan = (0, f64::NEG_INFINITY);
    for i in 0..100 {
        let u = mean.dot(c.embedding(i));
        if u > scan.1 {
            scan = (i, u);
        }
    }
    let (b, v) = eu_star(&sample, &c);
    assert_eq!(b, scan.0);
    assert_relative_eq!(v, scan.1, epsilon = 1e-12);
}

#[test]
fn peu_and_evoi_reference_cases() {
    let c = random_catalog(5, 2, 12);
    let s = cav_semantics(&[[0.0, 0.0], [0.9, -0.3]], 0.3);
    let m = ResponseModel::default();
    let cfg = AcquisitionConfig::default();
    let mut rng = rng_from_seed(13);
    let parts: Vec<Vector> = (0..3).map(|_| gaussian_vec(2, &mut rng)).collect();
    let a = ctx(BeliefSample::new(parts.clone(), vec![0.5, 0.3, 0.2]).unwrap(), &c, &s, &m, &cfg);
    let eu = eu_star(&a.sample, &c).1;
    // uninformative: zero CAV
    let dead = Query::Attribute { slate: vec![0, 1], tag: 0 };
    assert_relative_eq!(peu_exact(&dead, &a).unwrap(), eu, epsilon = 1e-12);
    assert_relative_eq!(evoi_af(&dead, &a).unwrap(), 0.0, epsilon = 1e-12);
    // point mass
    let pm = ctx(BeliefSample::point_mass(parts[0].clone()), &c, &s, &m, &cfg);
    let q = Query::Ipa { slate: vec![2, 3], tag: 1 };
    assert_relative_eq!(peu_exact(&q, &pm).unwrap(), eu_star(&pm.sample, &c).1, epsilon = 1e-12);
    assert_relative_eq!(peu_sampled(&q, &pm).unwrap(), peu_exact(&q, &pm).unwrap(), epsilon = 1e-12);
    // 3 particles, 2 items, binary query: staged enumeration
    let two = catalog_from_rows(&[[1.0, 0.2], [-0.4, 0.8]]);
    let b = ctx(BeliefSample::new(parts.clone(), vec![0.5, 0.3, 0.2]).unwrap(), &two, &s, &m, &cfg);
    let q = Query::Attribute { slate: vec![0], tag: 1 };
    let (peu, evoi) = oracle_evoi(&q, &parts, &[0.5, 0.3, 0.2], &two, &s);
    assert_relative_eq!(peu_exact(&q, &b).unwrap(), peu, epsilon = 1e-10);
    assert_relative_eq!(evoi_af(&q, &b).unwrap(), evoi, epsilon = 1e-10);
}

#[test]
fn evoi_matches_enumeration_on_small_instances() {
    let mut rng = rng_from_seed(14);
    for trial in 0..60 {
        let n_items = 2 + trial % 3;
        let c = random_catalog(n_items, 2, rng.random());
        let s = cav_semantics(&[[rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]], 0.2 + rng.random::<f64>());
        let m = ResponseModel::default();
        let cfg = AcquisitionConfig::default();
        let n_parts = 1 + trial % 5;
        let parts: Vec<Vector> = (0..n_parts).map(|_| gaussian_vec(2, &mut rng)).collect();
        let w: Vec<f64> = (0..n_parts).map(|_| rng.random::<f64>() + 0.01).collect();
        let total: f64 = w.iter().sum();
        let wn: Vec<f64> = w.iter().map(|x| x / total).collect();
        let a = ctx(BeliefSample::new(parts.clone(), w).unwrap(), &c, &s, &m, &cfg);
        let slate: Vec<usize> = (0..n_items.min(1 + trial % 3)).collect();
        for q in [
            Query::Item { slate: slate.clone() },
            Query::Attribute { slate: slate.clone(), tag: 0 },
            Query::Ipa { slate: slate.clone(), tag: 0 },
        ] {
            let (_, want) = oracle_evoi(&q, &parts, &wn, &c, &s);
            let got = evoi_af(&q, &a).unwrap();
            assert!((got - want).abs() <= 1e-10, "{q:?}: {got} vs {want}");
            assert!(got >= -1e-10);
        }
    }
}

#[test]
fn sampled_peu_tracks_exact() {
    let c = random_catalog(20, 2, 15);
    let s = cav_semantics(&[[1.0, 0.5]], 0.3);
    let m = ResponseModel::default();
    let mut rng = rng_from_seed(16);
    let parts: Vec<Vector> = (0..400).map(|_| gaussian_vec(2, &mut rng) + Vector::from_vec(vec![1.0, 0.5])).collect();
    let cfg = AcquisitionConfig {
        n_user_samples: 2000,
        peu: PeuMethod::Sampled,
        ..Default::default()
    };
    let a = ctx(BeliefSample::uniform(parts).unwrap(), &c, &s, &m, &cfg);
    let q = Query::Ipa { slate: vec![0, 3, 7], tag: 0 };
    let exact = peu_exact(&q, &a).unwrap();
    let sampled = peu_sampled(&q, &a).unwrap();
    let eu = eu_star(&a.sample, &c).1;
    assert!((exact - sampled).abs() <= 0.05 * eu.abs(), "{exact} vs {sampled} (EU* {eu})");
}

#[test]
fn rq_and_bper_cases() {
    let c = catalog_from_rows(&[[0.0, 0.0], [1.0, 2.0], [-0.5, 0.3], [2.0, -1.0], [0.7, 0.7], [1.5, 0.1]]);
    let phi = Vector::from_vec(vec![0.4, -0.8]);
    assert_eq!(rq(&Query::Item { slate: vec![0] }, &phi, &c), 0.0);
    let slate = vec![1, 2, 3, 4, 5];
    let want: f64 = slate.iter().map(|&i| phi.dot(c.embedding(i))).sum();
    assert_relative_eq!(rq(&Query::Item { slate: slate.clone() }, &phi, &c), want, epsilon = 1e-12);
    let s = cav_semantics(&[[0.3, 1.0]], 0.3);
    let m = ResponseModel::default();
    let mut scores = Vec::new();
    for gamma in [0.0, 0.4, 1.0] {
        let cfg = AcquisitionConfig {
            gamma,
            kind: AcquisitionKind::MutualInformation,
            ..Default::default()
        };
        let mut rng = rng_from_seed(17);
        let parts: Vec<Vector> = (0..10).map(|_| gaussian_vec(2, &mut rng)).collect();
        let a = ctx(BeliefSample::uniform(parts).unwrap(), &c, &s, &m, &cfg);
        let sc = bper_score(&Query::Attribute { slate: vec![1, 3], tag: 0 }, &a).unwrap();
        if gamma == 0.0 {
            assert_eq!(sc.blended, sc.rq);
        }
        if gamma == 1.0 {
            assert_eq!(sc.blended, sc.ig);
        }
        scores.push(sc);
    }
    let slope = scores[0].ig - scores[0].rq;
    assert_relative_eq!(scores[1].blended, scores[0].blended + 0.4 * slope, epsilon = 1e-12);
    assert_relative_eq!(scores[2].blended, scores[0].blended + slope, epsilon = 1e-12);
}

fn relaxed(kind: QueryType, d: usize, n_items: usize, cav: Option<ContinuousCav>, seed: u64) -> ContinuousQuery {
    let mut rng = rng_from_seed(seed);
    ContinuousQuery {
        kind,
        items: (0..n_items).map(|_| gaussian_vec(d, &mut rng)).collect(),
        cav,
    }
}

#[test]
fn differentiable_peu_gradients_match_finite_differences() {
    let mut rng = rng_from_seed(18);
    for d in [2usize, 4] {
        let parts: Vec<Vector> = (0..7).map(|_| gaussian_vec(d, &mut rng)).collect();
        let w: Vec<f64> = (0..7).map(|_| rng.random::<f64>() + 0.1).collect();
        let sample = BeliefSample::new(parts, w).unwrap();
        let eps = frozen_eps(d, 12, 19);
        let chol = Matrix::from_fn(d, d, |r, c| if r >= c { 0.2 + 0.1 * (r + c) as f64 } else { 0.0 });
        let cavs = [
            ContinuousCav::Fixed {
                vector: gaussian_vec(d, &mut rng),
                sigma: 0.4,
            },
            ContinuousCav::Uncertain {
                mean: gaussian_vec(d, &mut rng),
                chol,
                sigma: 0.3,
            },
        ];
        for model in [
            ResponseModel::default(),
            ResponseModel {
                attribute: elicit_core::response::AttributeModel::MeanProbability,
                ..Default::default()
            },
        ] {
            let mut cases = vec![relaxed(QueryType::Item, d, 3, None, rng.random())];
            for cav in &cavs {
                cases.push(relaxed(QueryType::Attribute, d, 3, Some(cav.clone()), rng.random()));
                cases.push(relaxed(QueryType::Ipa, d, 2, Some(cav.clone()), rng.random()));
            }
            for q in cases {
                let r = peu_differentiable(&q, &sample, &model, 1.7, &eps).unwrap();
                let x = q.params();
                let fd = central_diff(
                    |p| peu_differentiable(&q.with_params(p), &sample, &model, 1.7, &eps).unwrap().value,
                    &x,
                    1e-5,
                );
                assert!(close_rel(&r.grad, &fd, 1e-4), "{:?}\n{:?}\n{:?}", q.kind, r.grad, fd);
            }
        }
    }
}

#[test]
fn differentiable_peu_special_cases() {
    let d = 3;
    let mut rng = rng_from_seed(20);
    let mean = gaussian_vec(d, &mut rng);
    let det = relaxed(QueryType::Ipa, d, 3, Some(ContinuousCav::Fixed { vector: mean.clone(), sigma: 0.3 }), 21);
    let unc = ContinuousQuery {
        cav: Some(ContinuousCav::Uncertain {
            mean,
            chol: Matrix::zeros(d, d),
            sigma: 0.3,
        }),
        ..det.clone()
    };
    let parts: Vec<Vector> = (0..5).map(|_| gaussian_vec(d, &mut rng)).collect();
    let sample = BeliefSample::uniform(parts).unwrap();
    let m = ResponseModel::default();
    let a = peu_differentiable(&det, &sample, &m, 2.0, &[]).unwrap();
    let b = peu_differentiable(&unc, &sample, &m, 2.0, &frozen_eps(d, 8, 1)).unwrap();
    assert_relative_eq!(a.value, b.value, epsilon = 1e-12);
}

#[test]
fn uncertain_cav_scoring_uses_beliefs() {
    let c = random_catalog(8, 2, 22);
    let belief = CavBelief::new("t0", Vector::from_vec(vec![1.0, 0.0]), Matrix::identity(2, 2) * 0.5, 0.3).unwrap();
    let s = Semantics::from_beliefs(&[belief]).unwrap();
    let m = ResponseModel::default();
    let cfg = AcquisitionConfig::default();
    let mut rng = rng_from_seed(23);
    let parts: Vec<Vector> = (0..30).map(|_| gaussian_vec(2, &mut rng)).collect();
    let a = ctx(BeliefSample::uniform(parts).unwrap(), &c, &s, &m, &cfg);
    let q = Query::Ipa { slate: vec![0, 1, 2], tag: 0 };
    let p = response_marginal(&q, &a).unwrap();
    assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    assert!(evoi_af(&q, &a).unwrap() >= -1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evoi_is_nonnegative_and_entropy_bounded(seed in any::<u64>(), n_parts in 1usize..8, kind in 0usize..3, slate_len in 1usize..4) {
        let mut rng = rng_from_seed(seed);
        let c = random_catalog(5, 2, seed);
        let s = cav_semantics(&[[rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0]], 0.1 + rng.random::<f64>());
        let m = ResponseModel::default();
        let cfg = AcquisitionConfig::default();
        let parts: Vec<Vector> = (0..n_parts).map(|_| gaussian_vec(2, &mut rng)).collect();
        let w: Vec<f64> = (0..n_parts).map(|_| rng.random::<f64>() + 1e-3).collect();
        let a = ctx(BeliefSample::new(parts, w).unwrap(), &c, &s, &m, &cfg);
        let slate: Vec<usize> = (0..slate_len).collect();
        let q = match kind {
            0 => Query::Item { slate },
            1 => Query::Attribute { slate, tag: 0 },
            _ => Query::Ipa { slate, tag: 0 },
        };
        prop_assert!(evoi_af(&q, &a).unwrap() >= -1e-10);
        let h = entropy_af(&q, &a).unwrap();
        prop_assert!(h >= 0.0 && h <= (q.n_outcomes() as f64).ln() + 1e-12);
        let mi = mutual_information_af(&q, &a).unwrap();
        prop_assert!(mi >= 0.0 && mi <= h + 1e-12);
    }

    #[test]
    fn peu_is_slate_permutation_invariant(seed in any::<u64>(), kind in 0usize..3) {
        let mut rng = rng_from_seed(seed);
        let c = random_catalog(6, 2, seed);
        let s = cav_semantics(&[[0.6, -0.8]], 0.3);
        let m = ResponseModel::default();
        let cfg = AcquisitionConfig::default();
        let parts: Vec<Vector> = (0..6).map(|_| gaussian_vec(2, &mut rng)).collect();
        let a = ctx(BeliefSample::uniform(parts).unwrap(), &c, &s, &m, &cfg);
        let mk = |slate: Vec<usize>| match kind {
            0 => Query::Item { slate },
            1 => Query::Attribute { slate, tag: 0 },
            _ => Query::Ipa { slate, tag: 0 },
        };
        let x = peu_exact(&mk(vec![0, 2, 5]), &a).unwrap();
        let y = peu_exact(&mk(vec![5, 0, 2]), &a).unwrap();
        prop_assert!((x - y).abs() < 1e-10);
    }
}
