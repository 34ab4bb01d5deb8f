//! Classword-aware classification loss, rating regression loss and the
//! composed training objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{ClasswordRegistry, Vocabulary};
use crate::error::{Error, Result};
use crate::model::RATING_KINDS;

/// The mask `k` over the vocabulary plus the classword indices in registry
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClasswordMask {
    k: Vec<f64>,
    indices: Vec<usize>,
}

impl ClasswordMask {
    pub fn new(registry: &ClasswordRegistry, vocab: &Vocabulary) -> Result<Self> {
        Ok(ClasswordMask {
            k: registry.mask(vocab)?,
            indices: registry.vocab_indices(vocab)?,
        })
    }

    /// Mask from explicit classword indices into a vocabulary of `vocab_size`.
    pub fn from_indices(vocab_size: usize, indices: Vec<usize>) -> Result<Self> {
        let mut k = vec![0.0; vocab_size];
        for &i in &indices {
            if i >= vocab_size || k[i] != 0.0 {
                return Err(Error::Data(format!("bad classword index {i}")));
            }
            k[i] = 1.0;
        }
        Ok(ClasswordMask { k, indices })
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n_classes(&self) -> usize {
        self.indices.len()
    }
}

/// Correct class `C` with its one-hot vector over the classwords.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTarget {
    pub class: String,
    pub index: usize,
    pub one_hot: Vec<f64>,
}

impl ClassTarget {
    pub fn new(registry: &ClasswordRegistry, class: &str) -> Result<Self> {
        let index = registry.position(class)?;
        let mut one_hot = vec![0.0; registry.len()];
        one_hot[index] = 1.0;
        Ok(ClassTarget {
            class: class.to_owned(),
            index,
            one_hot,
        })
    }
}

/// `-log softmax(gather_k(mean_t(n_t * k)))[C]`.
///
/// The per-step logits are masked to the classword coordinates and averaged
/// over all `T` predicted positions; the softmax runs over the classword
/// entries only.
pub fn cls_aware_loss(g: &mut Graph, logits: &[Var], mask: &ClasswordMask, target: usize) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Contract("classification loss needs at least one step".into()));
    }
    if mask.n_classes() < 2 {
        return Err(Error::Contract(format!(
            "classification loss needs at least 2 classwords, mask has {}",
            mask.n_classes()
        )));
    }
    if target >= mask.n_classes() {
        return Err(Error::UnknownClass(format!("class index {target}")));
    }
    let v = mask.k.len();
    let mut rows = Vec::with_capacity(logits.len());
    for &n in logits {
        if g.value(n).shape() != [v] {
            return Err(Error::Dimension(format!(
                "logits {:?} vs mask of length {v}",
                g.value(n).shape()
            )));
        }
        rows.push(g.reshape(n, &[1, v])?);
    }
    let stacked = g.concat(&rows, 0)?;
    let mean = g.mean_over(stacked, 0)?;
    let k = g.constant(Tensor::vector(mask.k.clone()));
    let k_bar = g.hadamard(mean, k)?;
    let scores = g.gather(k_bar, &mask.indices)?;
    let log_pred = g.log_softmax(scores)?;
    let picked = g.pick(log_pred, target)?;
    Ok(g.neg(picked))
}

/// `(rho - g)^2`.
pub fn rating_loss(g: &mut Graph, rho: Var, truth: f64) -> Result<Var> {
    let shifted = g.shift(rho, -truth);
    let sq = g.square(shifted);
    g.reshape(sq, &[1])
}

/// Which terms enter the total and with what weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub caption: bool,
    pub cls: bool,
    pub ratings: bool,
    pub w_caption: f64,
    pub w_cls: f64,
    pub w_rating: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            caption: true,
            cls: true,
            ratings: true,
            w_caption: 1.0,
            w_cls: 1.0,
            w_rating: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.caption || self.cls || self.ratings) {
            return Err(Error::Config("every loss term is disabled".into()));
        }
        for w in [self.w_caption, self.w_cls, self.w_rating] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Individual loss terms for one example; `None` marks a term whose
/// annotation is missing (no class, no ratings).
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms<T> {
    pub caption: Option<T>,
    pub cls: Option<T>,
    pub ratings: [Option<T>; RATING_KINDS],
}

/// Weighted sum of the enabled, present terms.
pub fn total_loss(g: &mut Graph, terms: &LossTerms<Var>, config: &LossConfig) -> Result<Var> {
    config.validate()?;
    let mut parts = Vec::new();
    let mut add = |g: &mut Graph, t: Option<Var>, on: bool, w: f64| {
        if let (Some(v), true) = (t, on) {
            parts.push(if w == 1.0 { v } else { g.scale(v, w) });
        }
    };
    add(g, terms.caption, config.caption, config.w_caption);
    add(g, terms.cls, config.cls, config.w_cls);
    for r in terms.ratings {
        add(g, r, config.ratings, config.w_rating);
    }
    if parts.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let stacked = g.concat(&parts, 0)?;
    Ok(g.sum(stacked))
}

/// [`total_loss`] on already-evaluated term values.
pub fn total_of(values: &LossTerms<f64>, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    let mut sum = 0.0;
    let mut add = |t: Option<f64>, on: bool, w: f64| {
        if let (Some(v), true) = (t, on) {
            sum += w * v;
        }
    };
    add(values.caption, config.caption, config.w_caption);
    add(values.cls, config.cls, config.w_cls);
    for r in values.ratings {
        add(r, config.ratings, config.w_rating);
    }
    Ok(sum)
}
