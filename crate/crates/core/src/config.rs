//! Training configuration and its `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! preset = cls-aware
//! train_data = train.jsonl       # relative to the config file
//! iterations = 20000
//! lr_caption = 2.0
//! ```
//!
//! Keys:
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `preset` | base, base-ft-analog, cls-aware, fuse-1, fuse-2, fuse-3 | base |
//! | `train_data` | task-specific JSONL dataset | required |
//! | `general_data` | general caption JSONL dataset (fuse-1, fuse-2) | none |
//! | `brand_table` | extra brand phrase table for the tokenizer | none |
//! | `lr_caption` | learning rate of the caption parameters | 2.0 |
//! | `lr_ratings` | learning rate of the rating heads | 0.001 |
//! | `clip_norm` | global-norm clip of the caption gradient, 0 disables | 5.0 |
//! | `clip_norm_ratings` | same for the rating heads, 0 disables | 0 |
//! | `iterations` | total SGD updates | 20000 |
//! | `batch_size` | (image, caption) pairs averaged per update | 1 |
//! | `seed` | initialization, shuffling and fusion seed | 0 |
//! | `embed_dim`, `hidden_dim` | E and H | 64 |
//! | `min_count` | minimum token frequency for the vocabulary | 1 |
//! | `repeat` | oversampling of the specific set when fusing | 8 |
//! | `caption_term`, `cls_term`, `rating_term` | enable loss terms | preset |
//! | `w_caption`, `w_cls`, `w_rating` | loss weights | 1.0 |
//! | `caption_loss` | `mean` (per word) or `sum` over the caption | mean |
//! | `init_scale` | uniform init range of weights | 0.08 |
//! | `feature_view` | `fine-tuned` or `pretrained` | preset |
//! | `pretrained_noise` | noise std of the pretrained view | 0.7 |
//! | `image_every_step` | feed the image at every step | false |
//! | `rating_bias` | rating heads have a bias | true |
//! | `log_every` | iterations per log record | 100 |
//! | `checkpoint_every` | periodic checkpoints, 0 disables | 0 |

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureView;
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Base,
    BaseFtAnalog,
    ClsAware,
    #[serde(rename = "fuse-1")]
    Fuse1,
    #[serde(rename = "fuse-2")]
    Fuse2,
    #[serde(rename = "fuse-3")]
    Fuse3,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Base,
        Preset::BaseFtAnalog,
        Preset::ClsAware,
        Preset::Fuse1,
        Preset::Fuse2,
        Preset::Fuse3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Base => "base",
            Preset::BaseFtAnalog => "base-ft-analog",
            Preset::ClsAware => "cls-aware",
            Preset::Fuse1 => "fuse-1",
            Preset::Fuse2 => "fuse-2",
            Preset::Fuse3 => "fuse-3",
        }
    }

    pub fn uses_cls_loss(self) -> bool {
        matches!(self, Preset::ClsAware | Preset::Fuse3)
    }

    /// Trains on the specific set fused with a general caption set.
    pub fn fused(self) -> bool {
        matches!(self, Preset::Fuse1 | Preset::Fuse2)
    }

    pub fn fine_tuned(self) -> bool {
        matches!(self, Preset::BaseFtAnalog | Preset::Fuse2 | Preset::Fuse3)
    }

    /// Must start from another model's parameters.
    pub fn requires_init(self) -> bool {
        self == Preset::Fuse3
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown preset `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionLoss {
    /// Per-word mean of the negative log-likelihood.
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub train_data: Option<PathBuf>,
    pub general_data: Option<PathBuf>,
    pub brand_table: Option<PathBuf>,
    pub lr_caption: f64,
    pub lr_ratings: f64,
    pub clip_norm: Option<f64>,
    pub clip_norm_ratings: Option<f64>,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub min_count: usize,
    pub repeat: usize,
    pub loss: LossConfig,
    pub caption_loss: CaptionLoss,
    pub init_scale: f64,
    pub feature_view: FeatureView,
    pub image_every_step: bool,
    pub rating_bias: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

pub const DEFAULT_PRETRAINED_NOISE: f64 = 0.7;

impl TrainConfig {
    pub fn for_preset(preset: Preset) -> Self {
        TrainConfig {
            preset,
            train_data: None,
            general_data: None,
            brand_table: None,
            lr_caption: 2.0,
            lr_ratings: 0.001,
            clip_norm: Some(5.0),
            clip_norm_ratings: None,
            iterations: 20_000,
            batch_size: 1,
            seed: 0,
            embed_dim: 64,
            hidden_dim: 64,
            min_count: 1,
            repeat: 8,
            loss: LossConfig {
                cls: preset.uses_cls_loss(),
                ..LossConfig::default()
            },
            caption_loss: CaptionLoss::Mean,
            init_scale: 0.08,
            feature_view: if preset.fine_tuned() {
                FeatureView::FineTuned
            } else {
                FeatureView::Pretrained {
                    noise: DEFAULT_PRETRAINED_NOISE,
                }
            },
            image_every_step: false,
            rating_bias: true,
            log_every: 100,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr_caption", self.lr_caption)?;
        positive("lr_ratings", self.lr_ratings)?;
        positive("init_scale", self.init_scale)?;
        for c in [self.clip_norm, self.clip_norm_ratings].into_iter().flatten() {
            positive("clip norm", c)?;
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.min_count == 0 || self.repeat == 0 {
            return Err(Error::Config(
                "batch_size, embed_dim, hidden_dim, min_count and repeat must be at least 1".into(),
            ));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        self.loss.validate()?;
        self.feature_view.validate()
    }

    /// Parses a config file's text. `preset` overrides the file's preset
    /// before preset defaults are applied; relative paths are resolved
    /// against `base_dir`.
    pub fn parse(text: &str, origin: &str, preset: Option<Preset>, base_dir: &Path) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected `key = value`"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(origin, i + 1, "empty key"));
            }
            if entries.insert(key.to_owned(), (i + 1, value.trim().to_owned())).is_some() {
                return Err(Error::parse(origin, i + 1, format!("duplicate key `{key}`")));
            }
        }

        let preset = match (preset, entries.remove("preset")) {
            (Some(p), _) => p,
            (None, Some((line, v))) => v.parse().map_err(|e: Error| Error::parse(origin, line, e.to_string()))?,
            (None, None) => Preset::Base,
        };
        let mut c = TrainConfig::for_preset(preset);
        let mut noise = None;
        let mut view = None;
        for (key, (line, v)) in entries {
            let at = |msg: String| Error::parse(origin, line, msg);
            fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
                v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
            }
            fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
                match v {
                    "true" | "yes" | "on" | "1" => Ok(true),
                    "false" | "no" | "off" | "0" => Ok(false),
                    _ => Err(format!("invalid boolean `{v}` for `{key}`")),
                }
            }
            let clip = |v: &str| -> std::result::Result<Option<f64>, String> {
                let x: f64 = num(&key, v)?;
                Ok((x != 0.0).then_some(x))
            };
            let path = |v: &str| Some(base_dir.join(v));
            let k = key.as_str();
            let r: std::result::Result<(), String> = (|| {
                match k {
                    "train_data" => c.train_data = path(&v),
                    "general_data" => c.general_data = path(&v),
                    "brand_table" => c.brand_table = path(&v),
                    "lr_caption" => c.lr_caption = num(k, &v)?,
                    "lr_ratings" => c.lr_ratings = num(k, &v)?,
                    "clip_norm" => c.clip_norm = clip(&v)?,
                    "clip_norm_ratings" => c.clip_norm_ratings = clip(&v)?,
                    "iterations" => c.iterations = num(k, &v)?,
                    "batch_size" => c.batch_size = num(k, &v)?,
                    "seed" => c.seed = num(k, &v)?,
                    "embed_dim" => c.embed_dim = num(k, &v)?,
                    "hidden_dim" => c.hidden_dim = num(k, &v)?,
                    "min_count" => c.min_count = num(k, &v)?,
                    "repeat" => c.repeat = num(k, &v)?,
                    "caption_term" => c.loss.caption = flag(k, &v)?,
                    "cls_term" => c.loss.cls = flag(k, &v)?,
                    "rating_term" => c.loss.ratings = flag(k, &v)?,
                    "w_caption" => c.loss.w_caption = num(k, &v)?,
                    "w_cls" => c.loss.w_cls = num(k, &v)?,
                    "w_rating" => c.loss.w_rating = num(k, &v)?,
                    "caption_loss" => {
                        c.caption_loss = match v.as_str() {
                            "mean" => CaptionLoss::Mean,
                            "sum" => CaptionLoss::Sum,
                            _ => return Err(format!("caption_loss must be `mean` or `sum`, got `{v}`")),
                        }
                    }
                    "init_scale" => c.init_scale = num(k, &v)?,
                    "feature_view" => {
                        view = Some(match v.as_str() {
                            "fine-tuned" => false,
                            "pretrained" => true,
                            _ => return Err(format!("feature_view must be `fine-tuned` or `pretrained`, got `{v}`")),
                        })
                    }
                    "pretrained_noise" => noise = Some(num::<f64>(k, &v)?),
                    "image_every_step" => c.image_every_step = flag(k, &v)?,
                    "rating_bias" => c.rating_bias = flag(k, &v)?,
                    "log_every" => c.log_every = num(k, &v)?,
                    "checkpoint_every" => c.checkpoint_every = num(k, &v)?,
                    _ => return Err(format!("unknown key `{k}`")),
                }
                Ok(())
            })();
            r.map_err(at)?;
        }
        let pretrained = view.unwrap_or(!preset.fine_tuned());
        c.feature_view = if pretrained {
            FeatureView::Pretrained {
                noise: noise.unwrap_or(DEFAULT_PRETRAINED_NOISE),
            }
        } else {
            FeatureView::FineTuned
        };
        c.validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        Ok(c)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), preset, base)
    }
}
