//! Items, user priors, simulated users and tag data.
//!
//! File formats (all newline-delimited JSON unless noted):
//! - catalog: `{"id": string, "vec": [number, ...]}` plus optional extra keys
//!   that are kept verbatim as item metadata;
//! - tags: `{"user": string, "item": string, "tag": string}`;
//! - prior (single JSON object): `{"mean": [...], "scale_rows": [[...], ...]}`.

use crate::linalg::{affine_draw, matrix_to_rows, rows_to_matrix, validate_lower_scale};
use crate::rng::Rng;
use crate::{Error, Matrix, Result, Vector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct CatalogRow {
    id: String,
    vec: Vec<f64>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

/// An item in the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub embedding: Vector,
    /// Extra keys from the catalog file, passed through untouched.
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// All item embeddings plus the cached maximum embedding norm `z`.
#[derive(Debug, Clone)]
pub struct ItemCatalog {
    items: Vec<Item>,
    dim: usize,
    max_norm: f64,
    index: HashMap<String, usize>,
}

impl PartialEq for ItemCatalog {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl ItemCatalog {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyCatalog)?;
        let dim = first.embedding.len();
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.embedding.len() != dim {
                return Err(Error::LineDimension {
                    line: i + 1,
                    expected: dim,
                    found: item.embedding.len(),
                });
            }
            if index.insert(item.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(item.id.clone()));
            }
        }
        let max_norm = items
            .iter()
            .map(|it| it.embedding.norm())
            .fold(0.0, f64::max);
        Ok(Self {
            items,
            dim,
            max_norm,
            index,
        })
    }

    /// Builds a catalog from bare `(id, embedding)` pairs.
    pub fn from_embeddings<I: IntoIterator<Item = (String, Vector)>>(pairs: I) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .map(|(id, embedding)| Item {
                    id,
                    embedding,
                    metadata: Default::default(),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `max_i ||φ_I(i)||₂`.
    pub fn max_norm(&self) -> f64 {
        self.max_norm
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, idx: usize) -> &Item {
        &self.items[idx]
    }

    pub fn embedding(&self, idx: usize) -> &Vector {
        &self.items[idx].embedding
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.items[idx].id
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    /// Index of the best-scoring item; ties go to the lexicographically
    /// smallest id.
    pub fn argmax_by<F: Fn(usize) -> f64>(&self, candidates: impl Iterator<Item = usize>, score: F) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for i in candidates {
            let s = score(i);
            best = match best {
                None => Some((i, s)),
                Some((b, bs)) if s > bs || (s == bs && self.id(i) < self.id(b)) => Some((i, s)),
                keep => keep,
            };
        }
        best
    }

    /// Mean embedding over all items.
    pub fn mean_embedding(&self) -> Vector {
        let mut acc = Vector::zeros(self.dim);
        for it in &self.items {
            acc += &it.embedding;
        }
        acc / self.items.len() as f64
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut items = Vec::new();
        let mut dim = None;
        for (n, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let row: CatalogRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let expected = *dim.get_or_insert(row.vec.len());
            if row.vec.len() != expected {
                return Err(Error::LineDimension {
                    line: line_no,
                    expected,
                    found: row.vec.len(),
                });
            }
            items.push(Item {
                id: row.id,
                embedding: Vector::from_vec(row.vec),
                metadata: row.extra,
            });
        }
        Self::new(items)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for it in &self.items {
            let row = CatalogRow {
                id: it.id.clone(),
                vec: it.embedding.iter().copied().collect(),
                extra: it.metadata.clone(),
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_catalog(path: &Path) -> Result<ItemCatalog> {
    ItemCatalog::from_reader(open(path)?)
}

pub fn save_catalog(catalog: &ItemCatalog, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    catalog.write_to(&mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// The RS prior `N(mean, scaleᵀ·scale)` over a user's utility vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianUserPrior {
    mean: Vector,
    scale: Matrix,
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorFile {
    mean: Vec<f64>,
    scale_rows: Vec<Vec<f64>>,
}

impl GaussianUserPrior {
    pub fn new(mean: Vector, scale: Matrix) -> Result<Self> {
        validate_lower_scale(&scale, mean.len())?;
        Ok(Self { mean, scale })
    }

    /// Isotropic prior `N(mean, s²·I)`.
    pub fn isotropic(mean: Vector, s: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, Matrix::identity(d, d) * s)
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn scale(&self) -> &Matrix {
        &self.scale
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> Matrix {
        crate::linalg::covariance_of(&self.scale)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vector {
        let eps = Vector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        affine_draw(&self.mean, &self.scale, &eps)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&PriorFile {
            mean: self.mean.iter().copied().collect(),
            scale_rows: matrix_to_rows(&self.scale),
        })
        .expect("prior serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: PriorFile = serde_json::from_str(s).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let d = f.mean.len();
        Self::new(Vector::from_vec(f.mean), rows_to_matrix(&f.scale_rows, d)?)
    }
}

pub fn load_prior(path: &Path) -> Result<GaussianUserPrior> {
    let mut s = String::new();
    open(path)?.read_to_string(&mut s).map_err(io_err(path))?;
    GaussianUserPrior::from_json(&s)
}

pub fn save_prior(prior: &GaussianUserPrior, path: &Path) -> Result<()> {
    std::fs::write(path, prior.to_json()).map_err(io_err(path))
}

/// Ground truth for a simulated user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueUser {
    #[serde(with = "crate::linalg::vector_serde")]
    pub utility: Vector,
    /// Per-tag response noise `σ_g`.
    pub response_noise: BTreeMap<String, f64>,
    pub temperature: f64,
}

impl TrueUser {
    pub fn new(
        utility: Vector,
        response_noise: BTreeMap<String, f64>,
        temperature: f64,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if let Some((tag, s)) = response_noise.iter().find(|(_, s)| !(**s > 0.0)) {
            return Err(Error::Config(format!("σ for tag `{tag}` must be positive, got {s}")));
        }
        Ok(Self {
            utility,
            response_noise,
            temperature,
        })
    }

    pub fn sigma(&self, tag: &str) -> Result<f64> {
        self.response_noise
            .get(tag)
            .copied()
            .ok_or_else(|| Error::UnknownTag(tag.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TagRecord {
    pub user: String,
    pub item: String,
    pub tag: String,
}

/// Binary tag applications `t_{u,i,g} = 1`, de-duplicated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TagDataset {
    records: Vec<TagRecord>,
    tag_ids: BTreeSet<String>,
}

impl TagDataset {
    pub fn new(records: impl IntoIterator<Item = TagRecord>) -> Self {
        let set: BTreeSet<TagRecord> = records.into_iter().collect();
        let tag_ids = set.iter().map(|r| r.tag.clone()).collect();
        Self {
            records: set.into_iter().collect(),
            tag_ids,
        }
    }

    pub fn records(&self) -> &[TagRecord] {
        &self.records
    }

    pub fn tag_ids(&self) -> &BTreeSet<String> {
        &self.tag_ids
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self::new(records))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn load_tags(path: &Path) -> Result<TagDataset> {
    TagDataset::from_reader(open(path)?)
}

pub fn save_tags(tags: &TagDataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    tags.write_to(&mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub item: usize,
    pub embedding: Vector,
    pub label: Label,
}

/// The CAV training set `D_g`, ordered by catalog index within each label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub examples: Vec<LabeledItem>,
}

impl TrainingSet {
    pub fn positives(&self) -> impl Iterator<Item = &LabeledItem> {
        self.examples.iter().filter(|e| e.label == Label::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &LabeledItem> {
        self.examples.iter().filter(|e| e.label == Label::Negative)
    }

    pub fn has_both_labels(&self) -> bool {
        self.positives().next().is_some() && self.negatives().next().is_some()
    }
}

/// Builds `D_g`: positives are items some user tagged with `tag`; negatives
/// are items `i` a user tagged with another tag (but not `tag`) while
/// tagging some other item with `tag`. Items with both labels stay positive.
pub fn build_cav_training_set(
    tags: &TagDataset,
    catalog: &ItemCatalog,
    tag: &str,
) -> Result<TrainingSet> {
    if !tags.tag_ids().contains(tag) {
        return Err(Error::UnknownTag(tag.to_string()));
    }
    // user -> item -> tags applied
    let mut by_user: BTreeMap<&str, BTreeMap<&str, BTreeSet<&str>>> = BTreeMap::new();
    for r in tags.records() {
        by_user
            .entry(&r.user)
            .or_default()
            .entry(&r.item)
            .or_default()
            .insert(&r.tag);
    }
    let mut positives = BTreeSet::new();
    let mut negatives = BTreeSet::new();
    for items in by_user.values() {
        let user_uses_tag = items.values().any(|ts| ts.contains(tag));
        for (item, ts) in items {
            let idx = catalog.index_of(item)?;
            if ts.contains(tag) {
                positives.insert(idx);
            } else if user_uses_tag {
                // ts is non-empty, so some g' ≠ g was applied to this item
                negatives.insert(idx);
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::UntrainableTag(tag.to_string()));
    }
    let examples = positives
        .iter()
        .map(|&i| (i, Label::Positive))
        .chain(
            negatives
                .difference(&positives)
                .map(|&i| (i, Label::Negative)),
        )
        .map(|(item, label)| LabeledItem {
            item,
            embedding: catalog.embedding(item).clone(),
            label,
        })
        .collect();
    Ok(TrainingSet { examples })
}
