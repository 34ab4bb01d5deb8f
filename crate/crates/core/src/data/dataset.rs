//! Examples, datasets and the JSON-lines dataset format.
//!
//! Each line of a dataset file is one object:
//!
//! ```text
//! {"id":"img-000001","features":[0.12,-1.3,...],"captions":["a man holds a cocacola can", ...],
//!  "class":"cocacola","ratings":[[0,1,1,0,2],[3,3,2,4,3],[1,1,0,1,2]]}
//! ```
//!
//! `class` and `ratings` are optional. Ratings are three rows (one per rating
//! kind) holding one integer in `0..=4` per annotator. Captions are stored as
//! text and tokenized on load.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenize::Tokenizer;
use super::vocab::{ClasswordRegistry, Vocabulary};
use crate::error::{Error, Result};

pub const MAX_CAPTIONS: usize = 5;
pub const MAX_ANNOTATORS: usize = 5;
pub const MAX_RATING: u8 = 4;

/// Annotator ratings for the three rating kinds, `[kind][annotator]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct Ratings {
    rows: [Vec<u8>; 3],
}

impl Ratings {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self> {
        let rows: [Vec<u8>; 3] = rows
            .try_into()
            .map_err(|r: Vec<Vec<u8>>| Error::Data(format!("expected 3 rating rows, got {}", r.len())))?;
        let n = rows[0].len();
        if n == 0 || n > MAX_ANNOTATORS {
            return Err(Error::Data(format!(
                "expected 1..={MAX_ANNOTATORS} annotators, got {n}"
            )));
        }
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Data("rating rows differ in annotator count".into()));
        }
        if let Some(bad) = rows.iter().flatten().find(|&&v| v > MAX_RATING) {
            return Err(Error::Data(format!("rating {bad} outside 0..={MAX_RATING}")));
        }
        Ok(Ratings { rows })
    }

    pub fn annotators(&self) -> usize {
        self.rows[0].len()
    }

    pub fn kind(&self, r: usize) -> &[u8] {
        &self.rows[r]
    }

    /// Mean over annotators for each rating kind.
    pub fn mean(&self) -> [f64; 3] {
        let n = self.annotators() as f64;
        std::array::from_fn(|r| self.rows[r].iter().map(|&v| v as f64).sum::<f64>() / n)
    }
}

impl TryFrom<Vec<Vec<u8>>> for Ratings {
    type Error = Error;
    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self> {
        Ratings::new(rows)
    }
}

impl From<Ratings> for Vec<Vec<u8>> {
    fn from(r: Ratings) -> Self {
        r.rows.into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Vec<f64>,
    pub captions: Vec<Vec<String>>,
    pub class: Option<String>,
    pub ratings: Option<Ratings>,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Data("empty example id".into()));
        }
        if self.features.is_empty() {
            return Err(Error::Data(format!("{}: empty feature vector", self.id)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{}: non-finite feature", self.id)));
        }
        if self.captions.is_empty() || self.captions.len() > MAX_CAPTIONS {
            return Err(Error::Data(format!(
                "{}: expected 1..={MAX_CAPTIONS} captions, got {}",
                self.id,
                self.captions.len()
            )));
        }
        if self.captions.iter().any(Vec::is_empty) {
            return Err(Error::Data(format!("{}: empty caption", self.id)));
        }
        Ok(())
    }

    /// True when some reference caption contains the example's classword.
    pub fn mentions_class(&self) -> bool {
        match &self.class {
            Some(c) => self.captions.iter().any(|cap| cap.contains(c)),
            None => true,
        }
    }
}

/// Per-kind mean of the annotator ratings.
pub fn mean_ratings(example: &Example) -> Result<[f64; 3]> {
    example
        .ratings
        .as_ref()
        .map(Ratings::mean)
        .ok_or_else(|| Error::Data(format!("{}: no ratings", example.id)))
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    features: Vec<f64>,
    captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ratings: Option<Ratings>,
}

/// Immutable collection of examples sharing one feature dimension, with the
/// vocabulary (min count 1) and classword registry derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    vocab: Vocabulary,
    registry: ClasswordRegistry,
    dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Data("dataset has no examples".into()))?;
        let dim = first.features.len();
        for ex in &examples {
            ex.validate()?;
            if ex.features.len() != dim {
                return Err(Error::Data(format!(
                    "{}: feature length {} differs from dataset dimension {dim}",
                    ex.id,
                    ex.features.len()
                )));
            }
        }
        let classes: BTreeSet<&String> = examples.iter().filter_map(|e| e.class.as_ref()).collect();
        let registry = ClasswordRegistry::new(classes.into_iter().cloned().collect())?;
        let vocab = Vocabulary::build(
            examples.iter().flat_map(|e| e.captions.iter().map(Vec::as_slice)),
            1,
            registry.classwords(),
        )?;
        Ok(Dataset {
            examples,
            vocab,
            registry,
            dim,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn registry(&self) -> &ClasswordRegistry {
        &self.registry
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Ids of labeled examples none of whose captions contain the classword.
    pub fn missing_classwords(&self) -> Vec<&str> {
        self.examples
            .iter()
            .filter(|e| !e.mentions_class())
            .map(|e| e.id.as_str())
            .collect()
    }

    fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx
    }

    fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(idx.iter().map(|&i| self.examples[i].clone()).collect())
    }

    /// Seeded train/test split; `test_fraction = 0.1` gives the 9:1 split.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test fraction {test_fraction} must lie in (0, 1)"
            )));
        }
        if self.len() < 2 {
            return Err(Error::Data("need at least two examples to split".into()));
        }
        let idx = self.shuffled_indices(seed);
        let n_test = ((self.len() as f64 * test_fraction).round() as usize).clamp(1, self.len() - 1);
        let (test, train) = idx.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Seeded k-fold partition; returns `(train, held_out)` per fold.
    pub fn kfold(&self, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
        if k < 2 || k > self.len() {
            return Err(Error::Config(format!(
                "k = {k} folds needs 2 <= k <= {}",
                self.len()
            )));
        }
        let idx = self.shuffled_indices(seed);
        (0..k)
            .map(|f| {
                let mut held: Vec<usize> = idx.iter().skip(f).step_by(k).copied().collect();
                let mut rest: Vec<usize> = idx
                    .iter()
                    .enumerate()
                    .filter(|(p, _)| p % k != f)
                    .map(|(_, &i)| i)
                    .collect();
                held.sort_unstable();
                rest.sort_unstable();
                Ok((self.subset(&rest)?, self.subset(&held)?))
            })
            .collect()
    }
}

/// Parses JSON-lines dataset text. `origin` names the source in errors.
pub fn parse_dataset(text: &str, origin: &str, tokenizer: &Tokenizer) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut dim = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::parse(origin, n + 1, msg);
        let rec: Record = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let ex = Example {
            id: rec.id,
            features: rec.features,
            captions: rec.captions.iter().map(|c| tokenizer.tokenize(c)).collect(),
            class: rec.class,
            ratings: rec.ratings,
        };
        ex.validate().map_err(|e| at(e.to_string()))?;
        let d = *dim.get_or_insert(ex.features.len());
        if ex.features.len() != d {
            return Err(at(format!(
                "feature length {} differs from dimension {d} of earlier records",
                ex.features.len()
            )));
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::parse(origin, 0, "no records"));
    }
    Dataset::new(examples)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    load_dataset_with(path, &Tokenizer::default())
}

pub fn load_dataset_with(path: &Path, tokenizer: &Tokenizer) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string(), tokenizer)
}

/// Serializes to JSON lines, one record per example.
pub fn to_jsonl(dataset: &Dataset) -> String {
    let mut out = String::new();
    for ex in dataset.examples() {
        let rec = Record {
            id: ex.id.clone(),
            features: ex.features.clone(),
            captions: ex.captions.iter().map(|c| c.join(" ")).collect(),
            class: ex.class.clone(),
            ratings: ex.ratings.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("records are serializable"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_jsonl(dataset)).map_err(|e| Error::io(path, e))
}

/// Image id and feature vector, as read from a features file.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub features: Vec<f64>,
}

/// Parses a JSON-lines features file (`{"id": ..., "features": [...]}` per
/// line; dataset files qualify since extra fields are ignored).
pub fn parse_features(text: &str, origin: &str) -> Result<Vec<FeatureRecord>> {
    let mut out: Vec<FeatureRecord> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::parse(origin, n + 1, msg);
        let rec: FeatureRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        if rec.features.is_empty() || rec.features.iter().any(|v| !v.is_finite()) {
            return Err(at("feature vector must be non-empty and finite".into()));
        }
        if let Some(prev) = out.first() {
            if prev.features.len() != rec.features.len() {
                return Err(at(format!(
                    "feature length {} differs from {}",
                    rec.features.len(),
                    prev.features.len()
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(&text, &path.display().to_string())
}

/// Combines a small task-specific dataset, each example repeated `repeat`
/// times, with a general caption dataset. Order is a seeded shuffle; the
/// vocabulary and registry are rebuilt over the union.
pub fn fuse_datasets(
    specific: &Dataset,
    general: &Dataset,
    repeat: usize,
    seed: u64,
) -> Result<Dataset> {
    if repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    if specific.dim() != general.dim() {
        return Err(Error::Data(format!(
            "cannot fuse datasets of feature dimension {} and {}",
            specific.dim(),
            general.dim()
        )));
    }
    let mut examples = Vec::with_capacity(repeat * specific.len() + general.len());
    for _ in 0..repeat {
        examples.extend(specific.examples().iter().cloned());
    }
    examples.extend(general.examples().iter().cloned());
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Dataset::new(examples)
}

/// Ratio of specific to general examples after fusion.
pub fn fusion_ratio(n_specific: usize, n_general: usize, repeat: usize) -> f64 {
    (repeat * n_specific) as f64 / n_general as f64
}
