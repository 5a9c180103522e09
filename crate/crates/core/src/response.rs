//! Queries, responses and the user response models.
//!
//! Three query types share one slate representation:
//! - item queries: the user picks one slate item (multinomial logit);
//! - attribute queries: the user says whether they want more or less of a
//!   soft attribute than the slate offers (probit on g-score differences
//!   against their target item);
//! - item-plus-attribute (IpA) queries: pick an item, then critique it.
//!
//! Outcomes of a query are enumerated in a fixed order: slate positions for
//! item queries, `[More, Less]` for attribute queries, and position-major
//! `(pos, More), (pos, Less)` pairs for IpA queries.

use crate::catalog::{ItemCatalog, TrueUser};
use crate::cav::{Cav, CavBelief};
use crate::rng::{derive_seed, rng_from_seed, str_key, Rng};
use crate::stats::{log_norm_cdf, log_norm_pdf, log_sum_exp, norm_cdf, softmax};
use crate::{Error, Result, Vector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryType {
    Item,
    Attribute,
    Ipa,
}

impl QueryType {
    pub fn needs_tag(self) -> bool {
        !matches!(self, QueryType::Item)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QueryType::Item => "item",
            QueryType::Attribute => "attribute",
            QueryType::Ipa => "ipa",
        }
    }
}

impl FromStr for QueryType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "item" => Ok(QueryType::Item),
            "attribute" => Ok(QueryType::Attribute),
            "ipa" => Ok(QueryType::Ipa),
            other => Err(Error::Config(format!(
                "unknown query type `{other}` (expected one of: item, attribute, ipa)"
            ))),
        }
    }
}

/// A query over catalog item indices and a tag index into [`Semantics`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Query {
    Item { slate: Vec<usize> },
    Attribute { slate: Vec<usize>, tag: usize },
    Ipa { slate: Vec<usize>, tag: usize },
}

impl Query {
    pub fn new(kind: QueryType, slate: Vec<usize>, tag: Option<usize>) -> Result<Self> {
        match (kind, tag) {
            (QueryType::Item, _) => Ok(Query::Item { slate }),
            (QueryType::Attribute, Some(tag)) => Ok(Query::Attribute { slate, tag }),
            (QueryType::Ipa, Some(tag)) => Ok(Query::Ipa { slate, tag }),
            (_, None) => Err(Error::InvalidQuery(format!("{} query needs a tag", kind.as_str()))),
        }
    }

    pub fn query_type(&self) -> QueryType {
        match self {
            Query::Item { .. } => QueryType::Item,
            Query::Attribute { .. } => QueryType::Attribute,
            Query::Ipa { .. } => QueryType::Ipa,
        }
    }

    pub fn slate(&self) -> &[usize] {
        match self {
            Query::Item { slate } | Query::Attribute { slate, .. } | Query::Ipa { slate, .. } => slate,
        }
    }

    pub fn tag(&self) -> Option<usize> {
        match self {
            Query::Item { .. } => None,
            Query::Attribute { tag, .. } | Query::Ipa { tag, .. } => Some(*tag),
        }
    }

    pub fn validate(&self, catalog: &ItemCatalog, semantics: &Semantics) -> Result<()> {
        let slate = self.slate();
        if slate.is_empty() {
            return Err(Error::InvalidQuery("empty slate".into()));
        }
        for (k, &i) in slate.iter().enumerate() {
            if i >= catalog.len() {
                return Err(Error::InvalidQuery(format!("item index {i} outside catalog")));
            }
            if slate[..k].contains(&i) {
                return Err(Error::InvalidQuery(format!("duplicate item `{}`", catalog.id(i))));
            }
        }
        if let Some(t) = self.tag() {
            if t >= semantics.len() {
                return Err(Error::InvalidQuery(format!("tag index {t} unknown")));
            }
        }
        Ok(())
    }

    pub fn n_outcomes(&self) -> usize {
        match self {
            Query::Item { slate } => slate.len(),
            Query::Attribute { .. } => 2,
            Query::Ipa { slate, .. } => 2 * slate.len(),
        }
    }

    /// All responses in canonical outcome order.
    pub fn outcomes(&self) -> Vec<Response> {
        match self {
            Query::Item { slate } => slate.iter().map(|&i| Response::Choice(i)).collect(),
            Query::Attribute { .. } => vec![
                Response::Direction(Direction::More),
                Response::Direction(Direction::Less),
            ],
            Query::Ipa { slate, .. } => slate
                .iter()
                .flat_map(|&i| {
                    [
                        Response::ChoiceAndDirection(i, Direction::More),
                        Response::ChoiceAndDirection(i, Direction::Less),
                    ]
                })
                .collect(),
        }
    }

    /// Canonical index of `response`, or an error if it does not answer
    /// this query.
    pub fn outcome_index(&self, response: &Response) -> Result<usize> {
        let pos = |item: usize| {
            self.slate()
                .iter()
                .position(|&i| i == item)
                .ok_or_else(|| Error::InvalidResponse("choice outside the slate".into()))
        };
        match (self, response) {
            (Query::Item { .. }, Response::Choice(i)) => pos(*i),
            (Query::Attribute { .. }, Response::Direction(d)) => Ok(d.offset()),
            (Query::Ipa { .. }, Response::ChoiceAndDirection(i, d)) => Ok(2 * pos(*i)? + d.offset()),
            (q, r) => Err(Error::InvalidResponse(format!(
                "{} response does not answer a {} query",
                r.kind_name(),
                q.query_type().as_str()
            ))),
        }
    }

    pub fn to_wire(&self, catalog: &ItemCatalog, semantics: &Semantics) -> QueryWire {
        QueryWire {
            kind: self.query_type(),
            slate: self.slate().iter().map(|&i| catalog.id(i).to_string()).collect(),
            tag: self.tag().map(|t| semantics.name(t).to_string()),
        }
    }

    pub fn from_wire(w: &QueryWire, catalog: &ItemCatalog, semantics: &Semantics) -> Result<Self> {
        let slate = w
            .slate
            .iter()
            .map(|id| catalog.index_of(id))
            .collect::<Result<Vec<_>>>()?;
        let tag = w.tag.as_deref().map(|t| semantics.index_of(t)).transpose()?;
        let q = Query::new(w.kind, slate, tag)?;
        q.validate(catalog, semantics)?;
        Ok(q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    More,
    Less,
}

impl Direction {
    /// `y ∈ {+1, −1}`.
    pub fn sign(self) -> f64 {
        match self {
            Direction::More => 1.0,
            Direction::Less => -1.0,
        }
    }

    fn offset(self) -> usize {
        match self {
            Direction::More => 0,
            Direction::Less => 1,
        }
    }

    pub fn from_sign(y: i64) -> Result<Self> {
        match y {
            1 => Ok(Direction::More),
            -1 => Ok(Direction::Less),
            other => Err(Error::InvalidResponse(format!("direction must be ±1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Response {
    Choice(usize),
    Direction(Direction),
    ChoiceAndDirection(usize, Direction),
}

impl Response {
    fn kind_name(&self) -> &'static str {
        match self {
            Response::Choice(_) => "choice",
            Response::Direction(_) => "direction",
            Response::ChoiceAndDirection(..) => "choice-and-direction",
        }
    }

    pub fn to_wire(&self, catalog: &ItemCatalog) -> ResponseWire {
        match *self {
            Response::Choice(i) => ResponseWire {
                choice: Some(catalog.id(i).to_string()),
                direction: None,
            },
            Response::Direction(d) => ResponseWire {
                choice: None,
                direction: Some(d.sign() as i64),
            },
            Response::ChoiceAndDirection(i, d) => ResponseWire {
                choice: Some(catalog.id(i).to_string()),
                direction: Some(d.sign() as i64),
            },
        }
    }

    pub fn from_wire(w: &ResponseWire, catalog: &ItemCatalog) -> Result<Self> {
        let choice = w
            .choice
            .as_deref()
            .map(|id| catalog.index_of(id).map_err(|_| Error::InvalidResponse(format!("unknown item `{id}`"))))
            .transpose()?;
        let direction = w.direction.map(Direction::from_sign).transpose()?;
        match (choice, direction) {
            (Some(i), None) => Ok(Response::Choice(i)),
            (None, Some(d)) => Ok(Response::Direction(d)),
            (Some(i), Some(d)) => Ok(Response::ChoiceAndDirection(i, d)),
            (None, None) => Err(Error::InvalidResponse("empty response".into())),
        }
    }
}

/// JSON form of a query: `{"type": "item|attribute|ipa", "slate": [ids], "tag": string?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryWire {
    #[serde(rename = "type")]
    pub kind: QueryType,
    pub slate: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

/// JSON form of a response: `{"choice": id?, "direction": ±1?}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<i64>,
}

/// Ordered (query, response) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    entries: Vec<(Query, Response)>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, query: Query, response: Response) -> Result<()> {
        query.outcome_index(&response)?;
        self.entries.push((query, response));
        Ok(())
    }

    pub fn entries(&self) -> &[(Query, Response)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prefix(&self, k: usize) -> History {
        History {
            entries: self.entries[..k].to_vec(),
        }
    }
}

impl FromIterator<(Query, Response)> for History {
    fn from_iter<I: IntoIterator<Item = (Query, Response)>>(iter: I) -> Self {
        History {
            entries: iter.into_iter().collect(),
        }
    }
}

/// The RS's view of one tag's semantics.
#[derive(Debug, Clone, PartialEq)]
pub enum TagSemantics {
    Fixed(Cav),
    Uncertain(CavBelief),
}

impl TagSemantics {
    pub fn name(&self) -> &str {
        match self {
            TagSemantics::Fixed(c) => &c.tag,
            TagSemantics::Uncertain(b) => &b.tag,
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            TagSemantics::Fixed(c) => c.noise_sigma,
            TagSemantics::Uncertain(b) => b.noise_sigma,
        }
    }

    /// The CAV vector, or the belief mean.
    pub fn mean_vector(&self) -> &Vector {
        match self {
            TagSemantics::Fixed(c) => &c.vector,
            TagSemantics::Uncertain(b) => &b.mean,
        }
    }

    /// `n` CAV draws from a seed; a fixed CAV or a point-mass belief
    /// yields its vector once.
    pub fn draws(&self, n: usize, seed: u64) -> Vec<Vector> {
        match self {
            TagSemantics::Fixed(c) => vec![c.vector.clone()],
            TagSemantics::Uncertain(b) if b.chol_scale.iter().all(|v| *v == 0.0) => vec![b.mean.clone()],
            TagSemantics::Uncertain(b) => {
                let mut rng = rng_from_seed(seed);
                (0..n).map(|_| b.draw(&mut rng)).collect()
            }
        }
    }
}

/// Semantics for every tag, addressed by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Semantics {
    tags: Vec<TagSemantics>,
    index: HashMap<String, usize>,
}

impl Semantics {
    pub fn new(tags: Vec<TagSemantics>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tags.iter().enumerate() {
            if index.insert(t.name().to_string(), i).is_some() {
                return Err(Error::Config(format!("duplicate tag `{}`", t.name())));
            }
        }
        Ok(Self { tags, index })
    }

    pub fn from_cavs(cavs: &[Cav]) -> Result<Self> {
        Self::new(cavs.iter().cloned().map(TagSemantics::Fixed).collect())
    }

    pub fn from_beliefs(beliefs: &[CavBelief]) -> Result<Self> {
        Self::new(beliefs.iter().cloned().map(TagSemantics::Uncertain).collect())
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn get(&self, t: usize) -> &TagSemantics {
        &self.tags[t]
    }

    pub fn tags(&self) -> &[TagSemantics] {
        &self.tags
    }

    pub fn name(&self, t: usize) -> &str {
        self.tags[t].name()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownTag(name.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeModel {
    #[default]
    MeanSlate,
    MeanProbability,
}

/// Positive per-position weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanProbWeights(Vec<f64>);

impl MeanProbWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("weights must be positive".into()));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("weights must sum to 1, got {total}")));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// How the RS (and simulated users) turn utilities into answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseModel {
    pub attribute: AttributeModel,
    /// Logit temperature `T` for item choices.
    pub temperature: f64,
    /// Mean-probability weights by slate position; uniform when absent.
    pub weights: Option<Vec<f64>>,
}

impl Default for ResponseModel {
    fn default() -> Self {
        Self {
            attribute: AttributeModel::MeanSlate,
            temperature: 0.5,
            weights: None,
        }
    }
}

impl ResponseModel {
    pub fn weights_for(&self, slate_len: usize) -> Result<MeanProbWeights> {
        match &self.weights {
            None => Ok(MeanProbWeights::uniform(slate_len)),
            Some(w) if w.len() == slate_len => MeanProbWeights::new(w.clone()),
            Some(w) => Err(Error::Dimension {
                expected: slate_len,
                found: w.len(),
            }),
        }
    }
}

/// The user's ideal item `z·φ_u/‖φ_u‖`.
pub fn target_item(utility: &Vector, max_norm: f64) -> Result<Vector> {
    let n = utility.norm();
    if !(n > 0.0) {
        return Err(Error::UndefinedTarget);
    }
    Ok(utility * (max_norm / n))
}

/// Gradient of `cᵀ·target(φ)` with respect to `φ`.
fn target_pullback(utility: &Vector, max_norm: f64, c: &Vector) -> Vector {
    let n = utility.norm();
    let unit = utility / n;
    (c - &unit * c.dot(&unit)) * (max_norm / n)
}

/// A slate resolved to embeddings, usable for catalog and relaxed queries.
#[derive(Debug, Clone)]
pub struct SlateKernel {
    pub kind: QueryType,
    pub items: Vec<Vector>,
    pub mean: Vector,
    pub attribute: AttributeModel,
    pub weights: Vec<f64>,
    pub temperature: f64,
    pub max_norm: f64,
}

impl SlateKernel {
    pub fn new(kind: QueryType, items: Vec<Vector>, model: &ResponseModel, max_norm: f64) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidQuery("empty slate".into()));
        }
        let weights = model.weights_for(items.len())?.0;
        let mut mean = Vector::zeros(items[0].len());
        for x in &items {
            mean += x;
        }
        mean /= items.len() as f64;
        Ok(Self {
            kind,
            items,
            mean,
            attribute: model.attribute,
            weights,
            temperature: model.temperature,
            max_norm,
        })
    }

    pub fn for_query(query: &Query, catalog: &ItemCatalog, model: &ResponseModel) -> Result<Self> {
        let items = query.slate().iter().map(|&i| catalog.embedding(i).clone()).collect();
        Self::new(query.query_type(), items, model, catalog.max_norm())
    }

    pub fn n_outcomes(&self) -> usize {
        match self.kind {
            QueryType::Item => self.items.len(),
            QueryType::Attribute => 2,
            QueryType::Ipa => 2 * self.items.len(),
        }
    }

    pub fn item_probs(&self, utility: &Vector) -> Vec<f64> {
        let scores: Vec<f64> = self.items.iter().map(|x| x.dot(utility)).collect();
        softmax(&scores, self.temperature)
    }

    /// `P(ρ = +1)` for an attribute query given a target and CAV.
    pub fn attr_more_prob(&self, target: &Vector, cav: &Vector, sigma: f64) -> f64 {
        match self.attribute {
            AttributeModel::MeanSlate => norm_cdf(cav.dot(&(target - &self.mean)) / sigma),
            AttributeModel::MeanProbability => {
                let ct = cav.dot(target);
                self.items
                    .iter()
                    .zip(&self.weights)
                    .map(|(x, w)| w * norm_cdf((ct - cav.dot(x)) / sigma))
                    .sum()
            }
        }
    }

    /// Full response distribution for one utility vector and one CAV.
    pub fn probs(&self, utility: &Vector, cav: Option<&Vector>, sigma: f64) -> Result<Vec<f64>> {
        match self.kind {
            QueryType::Item => Ok(self.item_probs(utility)),
            QueryType::Attribute => {
                let cav = cav.ok_or_else(|| Error::InvalidQuery("attribute query needs a CAV".into()))?;
                let target = target_item(utility, self.max_norm)?;
                let p = self.attr_more_prob(&target, cav, sigma);
                Ok(vec![p, 1.0 - p])
            }
            QueryType::Ipa => {
                let cav = cav.ok_or_else(|| Error::InvalidQuery("IpA query needs a CAV".into()))?;
                let target = target_item(utility, self.max_norm)?;
                let ct = cav.dot(&target);
                let pi = self.item_probs(utility);
                let mut out = Vec::with_capacity(2 * pi.len());
                for (x, p) in self.items.iter().zip(pi) {
                    let more = norm_cdf((ct - cav.dot(x)) / sigma);
                    out.push(p * more);
                    out.push(p * (1.0 - more));
                }
                Ok(out)
            }
        }
    }

    /// Response distribution averaged over CAV draws.
    pub fn probs_marginal(&self, utility: &Vector, cavs: &[Vector], sigma: f64) -> Result<Vec<f64>> {
        if self.kind == QueryType::Item || cavs.len() <= 1 {
            return self.probs(utility, cavs.first(), sigma);
        }
        let mut acc = vec![0.0; self.n_outcomes()];
        for c in cavs {
            for (a, p) in acc.iter_mut().zip(self.probs(utility, Some(c), sigma)?) {
                *a += p;
            }
        }
        let n = cavs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

fn cav_for<'a>(query: &Query, cav: &'a Cav) -> Result<&'a Vector> {
    if query.tag().is_none() {
        return Err(Error::InvalidQuery("query has no tag".into()));
    }
    Ok(&cav.vector)
}

/// Mean-slate attribute model: `Φ(c_g(φ* − φ̄_S)/σ_g)`.
pub fn attr_prob_mean_slate(query: &Query, cav: &Cav, utility: &Vector, catalog: &ItemCatalog) -> Result<f64> {
    let model = ResponseModel::default();
    let k = SlateKernel::for_query(query, catalog, &model)?;
    let target = target_item(utility, catalog.max_norm())?;
    Ok(norm_cdf(cav_for(query, cav)?.dot(&(target - &k.mean)) / cav.noise_sigma))
}

/// Mean-probability attribute model: `Σ_i w_i·Φ(c_g(φ* − φ_I(i))/σ_g)`.
pub fn attr_prob_mean_probability(
    query: &Query,
    cav: &Cav,
    utility: &Vector,
    catalog: &ItemCatalog,
    weights: &MeanProbWeights,
) -> Result<f64> {
    if weights.as_slice().len() != query.slate().len() {
        return Err(Error::Dimension {
            expected: query.slate().len(),
            found: weights.as_slice().len(),
        });
    }
    let model = ResponseModel {
        attribute: AttributeModel::MeanProbability,
        weights: Some(weights.as_slice().to_vec()),
        ..Default::default()
    };
    let k = SlateKernel::for_query(query, catalog, &model)?;
    let target = target_item(utility, catalog.max_norm())?;
    Ok(k.attr_more_prob(&target, cav_for(query, cav)?, cav.noise_sigma))
}

/// Multinomial logit over the slate at temperature `T`.
pub fn item_prob(query: &Query, utility: &Vector, catalog: &ItemCatalog, temperature: f64) -> Result<Vec<f64>> {
    let model = ResponseModel {
        temperature,
        ..Default::default()
    };
    Ok(SlateKernel::for_query(query, catalog, &model)?.item_probs(utility))
}

/// IpA table `P(i, y)` in canonical order.
pub fn ipa_prob(query: &Query, cav: &Cav, utility: &Vector, catalog: &ItemCatalog, temperature: f64) -> Result<Vec<f64>> {
    let model = ResponseModel {
        temperature,
        ..Default::default()
    };
    let mut k = SlateKernel::for_query(query, catalog, &model)?;
    k.kind = QueryType::Ipa;
    k.probs(utility, Some(cav_for(query, cav)?), cav.noise_sigma)
}

/// Response distribution marginalized over a CAV belief by Monte Carlo.
pub fn marginal_prob(
    query: &Query,
    belief: &CavBelief,
    utility: &Vector,
    catalog: &ItemCatalog,
    model: &ResponseModel,
    n_cav_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_cav_samples == 0 {
        return Err(Error::Config("need at least one CAV sample".into()));
    }
    if query.tag().is_none() {
        return Err(Error::InvalidQuery("marginal_prob needs an attribute or IpA query".into()));
    }
    let k = SlateKernel::for_query(query, catalog, model)?;
    let draws = TagSemantics::Uncertain(belief.clone()).draws(n_cav_samples, seed);
    k.probs_marginal(utility, &draws, belief.noise_sigma)
}

fn sample_index(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Draws a simulated user's answer from the response model, using the
/// user's own utility, noise and temperature, and the given CAV vector.
pub fn simulate_response(
    query: &Query,
    user: &TrueUser,
    cav: Option<&Vector>,
    semantics: &Semantics,
    catalog: &ItemCatalog,
    model: &ResponseModel,
    rng: &mut Rng,
) -> Result<Response> {
    let user_model = ResponseModel {
        temperature: user.temperature,
        ..model.clone()
    };
    let k = SlateKernel::for_query(query, catalog, &user_model)?;
    let sigma = match query.tag() {
        Some(t) => user.sigma(semantics.name(t))?,
        None => 1.0,
    };
    let p = k.probs(&user.utility, cav, sigma)?;
    Ok(query.outcomes()[sample_index(&p, rng)])
}

/// Number of frozen CAV draws per history entry under CAV uncertainty.
pub const FROZEN_CAV_SAMPLES: usize = 64;

/// Stable content key of a history entry (independent of its position).
pub fn entry_key(query: &Query, response: &Response, catalog: &ItemCatalog, semantics: &Semantics) -> u64 {
    let q = query.to_wire(catalog, semantics);
    let r = response.to_wire(catalog);
    let text = format!(
        "{}|{}|{}|{}|{}",
        q.kind.as_str(),
        q.tag.as_deref().unwrap_or(""),
        q.slate.join("\u{1f}"),
        r.choice.as_deref().unwrap_or(""),
        r.direction.unwrap_or(0)
    );
    str_key(&text)
}

/// Log-likelihood of one observed (query, response) pair as a function of
/// the utility vector, with CAV draws frozen at construction.
#[derive(Debug, Clone)]
pub struct EntryLikelihood {
    kernel: SlateKernel,
    chosen: Option<usize>,
    direction: f64,
    sigma: f64,
    cavs: Vec<Vector>,
}

impl EntryLikelihood {
    pub fn new(
        query: &Query,
        response: &Response,
        catalog: &ItemCatalog,
        semantics: &Semantics,
        model: &ResponseModel,
    ) -> Result<Self> {
        query.validate(catalog, semantics)?;
        let outcome = query.outcome_index(response)?;
        let kernel = SlateKernel::for_query(query, catalog, model)?;
        let (chosen, direction) = match query.query_type() {
            QueryType::Item => (Some(outcome), 0.0),
            QueryType::Attribute => (None, if outcome == 0 { 1.0 } else { -1.0 }),
            QueryType::Ipa => (Some(outcome / 2), if outcome % 2 == 0 { 1.0 } else { -1.0 }),
        };
        let (sigma, cavs) = match query.tag() {
            None => (1.0, Vec::new()),
            Some(t) => {
                let sem = semantics.get(t);
                let seed = derive_seed(entry_key(query, response, catalog, semantics), &[0xCA5]);
                (sem.sigma(), sem.draws(FROZEN_CAV_SAMPLES, seed))
            }
        };
        Ok(Self {
            kernel,
            chosen,
            direction,
            sigma,
            cavs,
        })
    }

    pub fn query_type(&self) -> QueryType {
        self.kernel.kind
    }

    fn item_log_prob(&self, utility: &Vector, chosen: usize) -> f64 {
        let t = self.kernel.temperature;
        let scores: Vec<f64> = self.kernel.items.iter().map(|x| x.dot(utility) / t).collect();
        scores[chosen] - log_sum_exp(&scores)
    }

    fn item_grad(&self, utility: &Vector, chosen: usize) -> Vector {
        let p = self.kernel.item_probs(utility);
        let mut g = self.kernel.items[chosen].clone();
        for (x, pi) in self.kernel.items.iter().zip(&p) {
            g.axpy(-pi, x, 1.0);
        }
        g / self.kernel.temperature
    }

    /// Log-weights `ln w_k` and probit arguments `a_k` for the attribute part;
    /// the attribute likelihood is `mean_s Σ_k w_k Φ(a_k)` over terms `k`.
    fn attribute_terms(&self, target: &Vector) -> Vec<(f64, f64, &Vector)> {
        let y = self.direction;
        let mut terms = Vec::new();
        for c in &self.cavs {
            let ct = c.dot(target);
            match (self.kernel.kind, self.chosen) {
                (QueryType::Ipa, Some(i)) => {
                    terms.push((0.0, y * (ct - c.dot(&self.kernel.items[i])) / self.sigma, c));
                }
                _ => match self.kernel.attribute {
                    AttributeModel::MeanSlate => {
                        terms.push((0.0, y * (ct - c.dot(&self.kernel.mean)) / self.sigma, c));
                    }
                    AttributeModel::MeanProbability => {
                        for (x, w) in self.kernel.items.iter().zip(&self.kernel.weights) {
                            terms.push((w.ln(), y * (ct - c.dot(x)) / self.sigma, c));
                        }
                    }
                },
            }
        }
        terms
    }

    /// `ln P(ρ | q, φ)`; `-∞` where the target item is undefined.
    pub fn log_lik(&self, utility: &Vector) -> f64 {
        let mut total = 0.0;
        if let (QueryType::Item | QueryType::Ipa, Some(c)) = (self.kernel.kind, self.chosen) {
            total += self.item_log_prob(utility, c);
        }
        if self.kernel.kind != QueryType::Item {
            let Ok(target) = target_item(utility, self.kernel.max_norm) else {
                return f64::NEG_INFINITY;
            };
            let logs: Vec<f64> = self
                .attribute_terms(&target)
                .iter()
                .map(|(lw, a, _)| lw + log_norm_cdf(*a))
                .collect();
            total += log_sum_exp(&logs) - (self.cavs.len() as f64).ln();
        }
        total
    }

    /// `∇_φ ln P(ρ | q, φ)`.
    pub fn grad_log_lik(&self, utility: &Vector) -> Result<Vector> {
        let mut g = Vector::zeros(utility.len());
        if let (QueryType::Item | QueryType::Ipa, Some(c)) = (self.kernel.kind, self.chosen) {
            g += self.item_grad(utility, c);
        }
        if self.kernel.kind != QueryType::Item {
            let target = target_item(utility, self.kernel.max_norm)?;
            let terms = self.attribute_terms(&target);
            let log_total = log_sum_exp(
                &terms
                    .iter()
                    .map(|(lw, a, _)| lw + log_norm_cdf(*a))
                    .collect::<Vec<_>>(),
            );
            // d/dφ of Σ w Φ(a) is Σ w φ(a)·(y/σ)·J cᵀ; accumulate the CAV-space
            // vector first, then pull back through the target map once.
            let mut cav_space = Vector::zeros(utility.len());
            for (lw, a, c) in &terms {
                let r = (lw + log_norm_pdf(*a) - log_total).exp();
                cav_space.axpy(r * self.direction / self.sigma, c, 1.0);
            }
            g += target_pullback(utility, self.kernel.max_norm, &cav_space);
        }
        Ok(g)
    }
}

impl fmt::Display for QueryWire {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.kind.as_str(), self.slate.join(","))?;
        if let Some(t) = &self.tag {
            write!(f, "/{t}")?;
        }
        Ok(())
    }
}
