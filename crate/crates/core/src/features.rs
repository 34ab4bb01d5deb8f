//! How stored feature vectors are presented to the model.
//!
//! There is no CNN here. A "fine-tuned" extractor sees the stored features
//! unchanged; a "pretrained" one sees them corrupted by fixed per-image noise,
//! so the same image always maps to the same (less class-informative) vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureView {
    #[default]
    FineTuned,
    Pretrained { noise: f64 },
}

impl FeatureView {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FeatureView::Pretrained { noise } if !(noise.is_finite() && noise >= 0.0) => {
                Err(Error::Config(format!("feature noise {noise} must be finite and non-negative")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, id: &str, features: &[f64]) -> Vec<f64> {
        match *self {
            FeatureView::FineTuned => features.to_vec(),
            FeatureView::Pretrained { noise } => {
                let mut rng = id_rng(id);
                features
                    .iter()
                    .map(|&x| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x + noise * z
                    })
                    .collect()
            }
        }
    }
}

fn id_rng(id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(id.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
