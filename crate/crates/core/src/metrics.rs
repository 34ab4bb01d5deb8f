//! Sentence classification accuracy, BLEU-4, CIDEr and rating deviations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ClasswordRegistry, Dataset};
use crate::error::{Error, Result};
use crate::model::RATING_KINDS;

/// Sentence set (beam output) for one image.
pub type SentenceSet = Vec<Vec<String>>;

/// 1 iff some sentence of `phi` contains the classword of `class`.
pub fn matches(phi: &[Vec<String>], class: &str, registry: &ClasswordRegistry) -> Result<bool> {
    let word = &registry.classwords()[registry.position(class)?];
    Ok(phi.iter().any(|s| s.iter().any(|t| t == word)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub matched: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaReport {
    pub per_class: BTreeMap<String, ClassAccuracy>,
    /// Registry classes without test images; excluded from MA.
    pub absent: Vec<String>,
    pub ma: f64,
    pub oa: f64,
}

impl ScaReport {
    /// OA recomputed from the per-class counts.
    pub fn oa_from_counts(&self) -> f64 {
        let (m, t) = self
            .per_class
            .values()
            .fold((0, 0), |(m, t), c| (m + c.matched, t + c.total));
        m as f64 / t as f64
    }
}

/// Per-class accuracy, mean accuracy over classes present in `labels`, and
/// overall accuracy.
pub fn sca(
    predictions: &BTreeMap<String, SentenceSet>,
    labels: &BTreeMap<String, String>,
    registry: &ClasswordRegistry,
) -> Result<ScaReport> {
    if labels.is_empty() {
        return Err(Error::Data("no labeled images to score".into()));
    }
    let missing: Vec<&str> = labels
        .keys()
        .filter(|id| !predictions.contains_key(*id))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing predictions for: {}", missing.join(", "))));
    }
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (id, class) in labels {
        let hit = matches(&predictions[id], class, registry)?;
        let e = counts.entry(class.clone()).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    let per_class: BTreeMap<String, ClassAccuracy> = counts
        .into_iter()
        .map(|(c, (m, t))| {
            (
                c,
                ClassAccuracy {
                    matched: m,
                    total: t,
                    accuracy: m as f64 / t as f64,
                },
            )
        })
        .collect();
    let absent = registry
        .classwords()
        .iter()
        .filter(|c| !per_class.contains_key(*c))
        .cloned()
        .collect();
    let ma = per_class.values().map(|c| c.accuracy).sum::<f64>() / per_class.len() as f64;
    let matched: usize = per_class.values().map(|c| c.matched).sum();
    let oa = matched as f64 / labels.len() as f64;
    Ok(ScaReport {
        per_class,
        absent,
        ma,
        oa,
    })
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check_corpus(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Data("empty candidate corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Data("every candidate needs at least one reference".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BleuSmoothing {
    #[default]
    None,
    /// Add one to numerator and denominator of the 2- to 4-gram precisions.
    AddOneHigherOrders,
}

/// Corpus BLEU-4 without smoothing.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    bleu4_with(candidates, references, BleuSmoothing::None)
}

/// Corpus BLEU-4: geometric mean of clipped n-gram precisions (n = 1..4)
/// times the brevity penalty, using the closest reference length (shorter
/// on ties).
pub fn bleu4_with(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    smoothing: BleuSmoothing,
) -> Result<f64> {
    check_corpus(candidates, references)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap();
        for n in 1..=4 {
            let counts = ngrams(cand, n);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (m, t) = match (smoothing, n) {
            (BleuSmoothing::AddOneHigherOrders, 1..) => (matched[n] + 1, total[n] + 1),
            _ => (matched[n], total[n]),
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / 4.0).exp())
}

/// Corpus CIDEr: per image and n = 1..4, `10/m * sum_j cos(g_n(c), g_n(s_j))`
/// over tf-idf n-gram vectors with `idf = ln(N / max(1, df))` where `df`
/// counts images whose references contain the n-gram; averaged over n and
/// then over images.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    cider_scaled(candidates, references, 1.0)
}

pub(crate) fn cider_scaled(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    idf_scale: f64,
) -> Result<f64> {
    check_corpus(candidates, references)?;
    let n_images = references.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for refs in references {
            let mut seen: Vec<&[String]> = refs.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            seen.sort_unstable();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| idf_scale * (n_images / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        fn vector<'a>(s: &'a [String], n: usize, idf: &dyn Fn(&[String]) -> f64) -> BTreeMap<&'a [String], f64> {
            let counts = ngrams(s, n);
            let len: usize = counts.values().sum();
            counts
                .into_iter()
                .map(|(g, c)| (g, c as f64 / len as f64 * idf(g)))
                .collect()
        }
        let norm = |v: &BTreeMap<&[String], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
        for (cand, refs) in candidates.iter().zip(references) {
            let vc = vector(cand, n, &idf);
            let nc = norm(&vc);
            let mut sum = 0.0;
            for r in refs {
                let vr = vector(r, n, &idf);
                let nr = norm(&vr);
                if nc > 0.0 && nr > 0.0 {
                    let dot: f64 = vc.iter().filter_map(|(g, x)| vr.get(g).map(|y| x * y)).sum();
                    sum += dot / (nc * nr);
                }
            }
            total += 10.0 * sum / refs.len() as f64;
        }
    }
    Ok(total / 4.0 / n_images)
}

pub const RATING_MIN: f64 = 0.0;
pub const RATING_MAX: f64 = 4.0;

/// Mean absolute deviation per rating kind between clamped predictions and
/// ground-truth mean ratings.
pub fn rating_deviation(
    predictions: &BTreeMap<String, [f64; RATING_KINDS]>,
    truths: &BTreeMap<String, [f64; RATING_KINDS]>,
) -> Result<[f64; RATING_KINDS]> {
    if truths.is_empty() {
        return Err(Error::Data("no rated images to score".into()));
    }
    let missing: Vec<&str> = truths
        .keys()
        .filter(|k| !predictions.contains_key(*k))
        .chain(predictions.keys().filter(|k| !truths.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("unaligned rating keys: {}", missing.join(", "))));
    }
    let mut dev = [0.0; RATING_KINDS];
    for (id, truth) in truths {
        let pred = predictions[id];
        for r in 0..RATING_KINDS {
            dev[r] += (pred[r].clamp(RATING_MIN, RATING_MAX) - truth[r]).abs();
        }
    }
    Ok(dev.map(|d| d / truths.len() as f64))
}

/// Scores of each annotator against the others, averaged over annotators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorBaseline {
    pub bleu4: Option<f64>,
    pub cider: Option<f64>,
    pub deviations: Option<[f64; RATING_KINDS]>,
}

/// Leave-one-annotator-out baseline over a reference dataset.
pub fn annotator_baseline(dataset: &Dataset) -> Result<AnnotatorBaseline> {
    let max_caps = dataset.examples().iter().map(|e| e.captions.len()).max().unwrap_or(0);
    let (mut bleu, mut cid, mut rounds) = (0.0, 0.0, 0usize);
    for a in 0..max_caps {
        let (cands, refs): (Vec<_>, Vec<_>) = dataset
            .examples()
            .iter()
            .filter(|e| e.captions.len() >= 2 && e.captions.len() > a)
            .map(|e| {
                let others: Vec<Vec<String>> = e
                    .captions
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != a)
                    .map(|(_, c)| c.clone())
                    .collect();
                (e.captions[a].clone(), others)
            })
            .unzip();
        if cands.is_empty() {
            continue;
        }
        bleu += bleu4(&cands, &refs)?;
        cid += cider(&cands, &refs)?;
        rounds += 1;
    }

    let rated: Vec<_> = dataset
        .examples()
        .iter()
        .filter_map(|e| e.ratings.as_ref())
        .filter(|r| r.annotators() >= 2)
        .collect();
    let max_annot = rated.iter().map(|r| r.annotators()).max().unwrap_or(0);
    let mut dev = [0.0; RATING_KINDS];
    let mut dev_rounds = 0usize;
    for a in 0..max_annot {
        let with_a: Vec<_> = rated.iter().filter(|r| r.annotators() > a).collect();
        if with_a.is_empty() {
            continue;
        }
        for (r, d) in dev.iter_mut().enumerate() {
            let sum: f64 = with_a
                .iter()
                .map(|rt| {
                    let row = rt.kind(r);
                    let others: f64 = row.iter().enumerate().filter(|(i, _)| *i != a).map(|(_, &v)| v as f64).sum();
                    let mean = others / (row.len() - 1) as f64;
                    (row[a] as f64 - mean).abs()
                })
                .sum();
            *d += sum / with_a.len() as f64;
        }
        dev_rounds += 1;
    }

    if rounds == 0 && dev_rounds == 0 {
        return Err(Error::Data(
            "annotator baseline needs at least two captions or two ratings per example".into(),
        ));
    }
    Ok(AnnotatorBaseline {
        bleu4: (rounds > 0).then(|| bleu / rounds as f64),
        cider: (rounds > 0).then(|| cid / rounds as f64),
        deviations: (dev_rounds > 0).then(|| dev.map(|d| d / dev_rounds as f64)),
    })
}

/// Evaluation summary for one model on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub n_images: usize,
    pub sca: Option<ScaReport>,
    pub bleu4: Option<f64>,
    pub cider: Option<f64>,
    /// Not computed; kept so tables show the column.
    pub meteor: Option<f64>,
    pub deviations: Option<[f64; RATING_KINDS]>,
    pub gt: Option<AnnotatorBaseline>,
    pub meta: ReportMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub preset: String,
    pub beam: usize,
    pub max_len: usize,
    pub vocab_hash: String,
    /// Predicted ratings are clamped into this range before deviations.
    pub rating_clamp: [f64; 2],
    pub checkpoint_iteration: u64,
}
