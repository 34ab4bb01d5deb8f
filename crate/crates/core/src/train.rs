//! SGD training of the caption model and rating heads.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{CaptionLoss, Preset, TrainConfig};
use crate::data::{fuse_datasets, mean_ratings, ClasswordRegistry, Dataset, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{cls_aware_loss, rating_loss, total_loss, ClasswordMask, LossConfig, LossTerms};
use crate::model::{forward_caption, nll_loss, predict_ratings, CaptionModel, HyperParams, ParamGroup, RATING_KINDS};

/// Learning rates and clipping for one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr_caption: f64,
    pub lr_ratings: f64,
    /// Global-norm clip over the caption parameters.
    pub clip_caption: Option<f64>,
    /// Global-norm clip over the rating heads.
    pub clip_ratings: Option<f64>,
}

impl SgdConfig {
    pub fn from_train(c: &TrainConfig) -> Self {
        SgdConfig {
            lr_caption: c.lr_caption,
            lr_ratings: c.lr_ratings,
            clip_caption: c.clip_norm,
            clip_ratings: c.clip_norm_ratings,
        }
    }
}

/// Gradient norms of one update, before clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub caption_norm: f64,
    pub rating_norm: f64,
}

/// `theta <- theta - lr * clip(g)`, with gradients given in
/// [`CaptionModel::params`] order.
pub fn sgd_step(model: &mut CaptionModel, grads: &[Tensor], opt: &SgdConfig) -> Result<StepStats> {
    let params = model.params_mut();
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut sq = [0.0, 0.0];
    for ((name, group, p), g) in params.iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "gradient of `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite((*name).to_owned()));
        }
        sq[(*group == ParamGroup::Rating) as usize] += g.norm_sq();
    }
    let norms = sq.map(f64::sqrt);
    let factor = |norm: f64, clip: Option<f64>| match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let step = [
        opt.lr_caption * factor(norms[0], opt.clip_caption),
        opt.lr_ratings * factor(norms[1], opt.clip_ratings),
    ];
    for ((name, group, p), g) in params.into_iter().zip(grads) {
        let s = step[(group == ParamGroup::Rating) as usize];
        if s == 0.0 {
            continue;
        }
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= s * d;
        }
        if !p.all_finite() {
            return Err(Error::NonFinite(name.to_owned()));
        }
    }
    Ok(StepStats {
        caption_norm: norms[0],
        rating_norm: norms[1],
    })
}

/// One training example prepared for the graph.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub features: Vec<f64>,
    pub captions: Vec<Vec<usize>>,
    /// Registry position of the class, if labelled.
    pub class: Option<usize>,
    pub ratings: Option<[f64; RATING_KINDS]>,
}

/// Encodes examples against `vocab` and applies the feature view.
pub fn prepare(
    dataset: &Dataset,
    vocab: &Vocabulary,
    registry: &ClasswordRegistry,
    view: &crate::features::FeatureView,
) -> Result<Vec<Prepared>> {
    dataset
        .examples()
        .iter()
        .map(|e| {
            Ok(Prepared {
                features: view.apply(&e.id, &e.features),
                captions: e.captions.iter().map(|c| vocab.encode(c)).collect(),
                class: e.class.as_deref().map(|c| registry.position(c)).transpose()?,
                ratings: e.ratings.as_ref().map(|_| mean_ratings(e)).transpose()?,
            })
        })
        .collect()
}

/// Loss terms of one (image, caption) pair after weighting. Disabled terms
/// are `None`; enabled but unannotated terms are `Some(0.0)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub caption: Option<f64>,
    pub cls: Option<f64>,
    pub ratings: Option<[f64; RATING_KINDS]>,
    pub total: f64,
}

/// Builds the graph for one pair, returning the gradients in
/// [`CaptionModel::params`] order and the weighted term values.
pub fn pair_gradients(
    model: &CaptionModel,
    example: &Prepared,
    caption: &[usize],
    mask: Option<&ClasswordMask>,
    loss: &LossConfig,
    caption_loss: CaptionLoss,
) -> Result<(Vec<Tensor>, TermValues)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let f = g.constant(Tensor::vector(example.features.clone()));
    let mut terms = LossTerms {
        caption: None,
        cls: None,
        ratings: [None; RATING_KINDS],
    };
    if loss.caption || loss.cls {
        let logits = forward_caption(&mut g, &p, f, caption)?;
        if loss.caption {
            let nll = nll_loss(&mut g, &logits, caption)?;
            terms.caption = Some(match caption_loss {
                CaptionLoss::Mean => nll.per_word,
                CaptionLoss::Sum => nll.sum,
            });
        }
        if loss.cls {
            if let (Some(class), Some(mask)) = (example.class, mask) {
                terms.cls = Some(cls_aware_loss(&mut g, &logits, mask, class)?);
            }
        }
    }
    if loss.ratings {
        if let Some(truth) = example.ratings {
            let rho = predict_ratings(&mut g, &p, f)?;
            for r in 0..RATING_KINDS {
                terms.ratings[r] = Some(rating_loss(&mut g, rho[r], truth[r])?);
            }
        }
    }
    let total = total_loss(&mut g, &terms, loss)?;
    let value = |v: Option<crate::autodiff::Var>, w: f64| v.map_or(0.0, |v| w * g.value(v).item());
    let values = TermValues {
        caption: loss.caption.then(|| value(terms.caption, loss.w_caption)),
        cls: loss.cls.then(|| value(terms.cls, loss.w_cls)),
        ratings: loss
            .ratings
            .then(|| std::array::from_fn(|r| value(terms.ratings[r], loss.w_rating))),
        total: g.value(total).item(),
    };
    let grads = if g.requires_grad(total) {
        let gr = g.backward(total)?;
        p.vars().into_iter().map(|(_, v)| gr.get(v)).collect()
    } else {
        model.params().into_iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect()
    };
    Ok((grads, values))
}

/// Interval means of the weighted loss terms. Pairs without an annotation
/// contribute zero to that term, so `total` equals the sum of the enabled
/// components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub pairs: u64,
    pub caption: Option<f64>,
    pub cls: Option<f64>,
    pub ratings: Option<[f64; RATING_KINDS]>,
    pub total: f64,
    pub wall_ms: u64,
    pub seed: u64,
}

impl LogRecord {
    pub fn component_sum(&self) -> f64 {
        self.caption.unwrap_or(0.0) + self.cls.unwrap_or(0.0) + self.ratings.map_or(0.0, |r| r.iter().sum())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    pub fn parse_jsonl(text: &str, origin: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(origin, i + 1, e.to_string())))
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }
}

#[derive(Default)]
struct Accumulator {
    pairs: u64,
    caption: f64,
    cls: f64,
    ratings: [f64; RATING_KINDS],
    total: f64,
}

impl Accumulator {
    fn add(&mut self, v: &TermValues) {
        self.pairs += 1;
        self.caption += v.caption.unwrap_or(0.0);
        self.cls += v.cls.unwrap_or(0.0);
        for (a, b) in self.ratings.iter_mut().zip(v.ratings.unwrap_or_default()) {
            *a += b;
        }
        self.total += v.total;
    }

    fn record(&self, iteration: u64, loss: &LossConfig, wall_ms: u64, seed: u64) -> LogRecord {
        let n = self.pairs as f64;
        LogRecord {
            iteration,
            pairs: self.pairs,
            caption: loss.caption.then(|| self.caption / n),
            cls: loss.cls.then(|| self.cls / n),
            ratings: loss.ratings.then(|| self.ratings.map(|r| r / n)),
            total: self.total / n,
            wall_ms,
            seed,
        }
    }
}

/// Training datasets: the task-specific set and, for fused presets, a
/// general caption set.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub specific: Dataset,
    pub general: Option<Dataset>,
}

/// Where the parameters come from.
#[derive(Clone, Debug)]
pub enum Start {
    Fresh,
    /// Copy parameters and vocabulary, restart the iteration count.
    InitFrom(Checkpoint),
    /// Continue an interrupted run of the same preset and seed.
    Resume(Checkpoint),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// The dataset a preset optimizes on.
pub fn training_set(config: &TrainConfig, data: &TrainData) -> Result<Dataset> {
    if config.preset.fused() {
        let general = data.general.as_ref().ok_or_else(|| {
            Error::Config(format!("preset {} needs a general dataset (general_data)", config.preset))
        })?;
        fuse_datasets(&data.specific, general, config.repeat, config.seed)
    } else {
        Ok(data.specific.clone())
    }
}

fn require_classes(dataset: &Dataset, registry: &ClasswordRegistry, vocab: &Vocabulary) -> Result<()> {
    for c in dataset.registry().classwords() {
        if registry.position(c).is_err() || vocab.id(c).is_none() {
            return Err(Error::Data(format!(
                "dataset/vocabulary mismatch: class `{c}` is unknown to the checkpoint"
            )));
        }
    }
    Ok(())
}

/// [`train_with`] without periodic checkpoints.
pub fn train(config: &TrainConfig, data: &TrainData, start: Start) -> Result<TrainOutcome> {
    train_with(config, data, start, &mut |_| Ok(()))
}

/// Runs SGD until `config.iterations` updates have been applied. Pairs are
/// visited in a seeded permutation per epoch, so a resumed run continues
/// exactly where the interrupted one stopped. `on_checkpoint` receives a
/// checkpoint every `config.checkpoint_every` iterations.
pub fn train_with(
    config: &TrainConfig,
    data: &TrainData,
    start: Start,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.preset.requires_init() && matches!(start, Start::Fresh) {
        return Err(Error::Config(format!(
            "preset {} must be initialized from a checkpoint (--init-from)",
            config.preset
        )));
    }
    let dataset = training_set(config, data)?;

    let (mut model, vocab, registry, mut iteration) = match start {
        Start::Fresh => {
            let vocab = Vocabulary::build(
                dataset.examples().iter().flat_map(|e| e.captions.iter().map(Vec::as_slice)),
                config.min_count,
                dataset.registry().classwords(),
            )?;
            let hyper = HyperParams {
                image_every_step: config.image_every_step,
                rating_bias: config.rating_bias,
                ..HyperParams::new(vocab.len(), config.embed_dim, config.hidden_dim, dataset.dim())
            };
            let model = CaptionModel::init(hyper, config.init_scale, config.seed)?;
            (model, vocab, dataset.registry().clone(), 0)
        }
        Start::InitFrom(ckpt) => {
            require_classes(&dataset, &ckpt.registry, &ckpt.vocab)?;
            (ckpt.model, ckpt.vocab, ckpt.registry, 0)
        }
        Start::Resume(ckpt) => {
            if ckpt.meta.preset != config.preset.name() || ckpt.meta.seed != config.seed {
                return Err(Error::Config(format!(
                    "cannot resume a {} run with seed {} as {} with seed {}",
                    ckpt.meta.preset, ckpt.meta.seed, config.preset, config.seed
                )));
            }
            require_classes(&dataset, &ckpt.registry, &ckpt.vocab)?;
            let it = ckpt.meta.iteration;
            (ckpt.model, ckpt.vocab, ckpt.registry, it)
        }
    };
    if model.hyper.feature_dim != dataset.dim() {
        return Err(Error::Data(format!(
            "model expects {} features, dataset has {}",
            model.hyper.feature_dim,
            dataset.dim()
        )));
    }

    let prepared = prepare(&dataset, &vocab, &registry, &config.feature_view)?;
    let mask = if registry.len() >= 2 {
        Some(ClasswordMask::new(&registry, &vocab)?)
    } else if config.loss.cls && dataset.examples().iter().any(|e| e.class.is_some()) {
        return Err(Error::Data("the classification-aware loss needs at least two classes".into()));
    } else {
        None
    };
    let pairs: Vec<(usize, usize)> = prepared
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.captions.len()).map(move |c| (i, c)))
        .collect();
    let n_pairs = pairs.len() as u64;
    let opt = SgdConfig::from_train(config);
    let b = config.batch_size as u64;
    let meta = |iteration| CheckpointMeta {
        preset: config.preset.name().to_owned(),
        seed: config.seed,
        iteration,
        feature_view: config.feature_view,
    };

    let clock = Instant::now();
    let mut log = TrainLog::default();
    let mut acc = Accumulator::default();
    let mut order: Option<(u64, Vec<usize>)> = None;
    while iteration < config.iterations {
        let mut sum: Option<Vec<Tensor>> = None;
        for k in 0..b {
            let slot = iteration * b + k;
            let epoch = slot / n_pairs;
            if order.as_ref().map(|o| o.0) != Some(epoch) {
                order = Some((epoch, epoch_order(pairs.len(), config.seed, epoch)));
            }
            let (ex, cap) = pairs[order.as_ref().unwrap().1[(slot % n_pairs) as usize]];
            let (grads, values) = pair_gradients(
                &model,
                &prepared[ex],
                &prepared[ex].captions[cap],
                mask.as_ref(),
                &config.loss,
                config.caption_loss,
            )?;
            acc.add(&values);
            sum = Some(match sum {
                None => grads,
                Some(mut s) => {
                    for (a, g) in s.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                    s
                }
            });
        }
        let mut grads = sum.expect("batch_size >= 1");
        if b > 1 {
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|x| *x /= b as f64);
            }
        }
        sgd_step(&mut model, &grads, &opt)?;
        iteration += 1;

        if iteration % config.log_every == 0 || iteration == config.iterations {
            let ms = clock.elapsed().as_millis() as u64;
            log.records.push(acc.record(iteration, &config.loss, ms, config.seed));
            acc = Accumulator::default();
        }
        if config.checkpoint_every > 0 && iteration % config.checkpoint_every == 0 && iteration < config.iterations {
            let ckpt = Checkpoint::new(model.clone(), vocab.clone(), registry.clone(), meta(iteration))?;
            on_checkpoint(&ckpt)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, vocab, registry, meta(iteration))?,
        log,
    })
}

/// Permutation of `n` pair indices for one epoch.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Names of presets, in roster order.
pub fn preset_names() -> Vec<&'static str> {
    Preset::ALL.iter().map(|p| p.name()).collect()
}
