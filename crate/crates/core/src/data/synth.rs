//! Seeded synthetic datasets.
//!
//! Branded-product data: every class has a mean feature vector; an example's
//! features are its class mean plus Gaussian noise, its captions come from a
//! handful of templates that always mention the classword, and its ratings
//! are annotator integers scattered around a latent value that is linear in
//! the features.
//!
//! General data stands in for a large generic caption corpus: topic-driven
//! captions with no classwords, no class and no ratings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::dataset::{Dataset, Example, Ratings};
use crate::error::{Error, Result};

const BRANDS: &[&str] = &[
    "cocacola", "pepsi", "nike", "adidas", "starbucks", "redbull", "heineken", "mcdonalds",
    "apple", "samsung", "puma", "fanta", "sprite", "lego", "ikea", "colgate", "nutella",
    "haribo", "nivea", "lindt", "beck", "milka", "oreo", "kinder", "evian", "lipton",
];
const SUBJECTS: &[&str] = &["person", "man", "woman", "boy", "girl"];
const VERBS: &[&str] = &["holds", "drinks", "opens", "carries", "shows", "buys"];
const NOUNS: &[&str] = &["can", "bottle", "cup", "bag", "box", "pack"];
const PLACES: &[&str] = &["outside", "indoors", "downtown", "happily"];

/// Mean of the latent rating and its standard deviation across the population.
const RATING_CENTER: f64 = 2.0;
const RATING_SPREAD: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_examples: usize,
    pub dim: usize,
    /// Standard deviation of each annotator's deviation from the latent rating.
    pub rating_noise: f64,
    pub seed: u64,
    /// Standard deviation of the class-mean entries.
    pub class_separation: f64,
    /// Standard deviation of the per-example feature noise.
    pub feature_noise: f64,
    /// Class `c` is drawn with weight `1 / (c + 1)^imbalance`; 0 is uniform.
    pub imbalance: f64,
    pub captions_per_example: usize,
    pub annotators: usize,
    /// Fraction of examples that carry ratings.
    pub rated_fraction: f64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 4,
            n_examples: 100,
            dim: 64,
            rating_noise: 0.2,
            seed: 0,
            class_separation: 1.0,
            feature_noise: 1.0,
            imbalance: 0.0,
            captions_per_example: 5,
            annotators: 5,
            rated_fraction: 1.0,
            id_prefix: "img".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.dim < 4 {
            return bad(format!("feature dimension must be at least 4, got {}", self.dim));
        }
        if self.n_examples < self.n_classes {
            return bad(format!(
                "{} examples cannot cover {} classes",
                self.n_examples, self.n_classes
            ));
        }
        if !(1..=5).contains(&self.captions_per_example) || !(1..=5).contains(&self.annotators) {
            return bad("captions_per_example and annotators must lie in 1..=5".into());
        }
        for (name, v) in [
            ("rating_noise", self.rating_noise),
            ("class_separation", self.class_separation),
            ("feature_noise", self.feature_noise),
            ("imbalance", self.imbalance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.rated_fraction) {
            return bad("rated_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Classword of class `c` for generated data.
pub fn classword(c: usize) -> String {
    BRANDS
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("brand{c}"))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

fn branded_caption(rng: &mut ChaCha8Rng, brand: &str) -> Vec<String> {
    let subj = pick(rng, SUBJECTS);
    let verb = pick(rng, VERBS);
    let noun = pick(rng, NOUNS);
    let text = match rng.random_range(0..4) {
        0 => format!("a {subj} {verb} a {brand} {noun}"),
        1 => format!("a {subj} {verb} a {brand} {noun} {}", pick(rng, PLACES)),
        2 => format!("a {brand} {noun} held by a {subj}"),
        _ => format!("a {subj} with a {brand} {noun}"),
    };
    text.split(' ').map(str::to_owned).collect()
}

/// Generates a labeled, rated dataset. Bit-for-bit reproducible from the config.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;

    let means: Vec<Vec<f64>> = (0..config.n_classes)
        .map(|_| gaussian_vec(&mut rng, d, config.class_separation))
        .collect();
    let feature_var = config.class_separation.powi(2) + config.feature_noise.powi(2);
    let directions: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let v = gaussian_vec(&mut rng, d, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = RATING_SPREAD / (norm * feature_var.sqrt()).max(1e-12);
            v.into_iter().map(|x| x * scale).collect()
        })
        .collect();

    let weights: Vec<f64> = (0..config.n_classes)
        .map(|c| 1.0 / ((c + 1) as f64).powf(config.imbalance))
        .collect();
    let total: f64 = weights.iter().sum();
    let annot = Normal::new(0.0, config.rating_noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut examples = Vec::with_capacity(config.n_examples);
    for i in 0..config.n_examples {
        let class = if i < config.n_classes {
            i
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut c = 0;
            while c + 1 < weights.len() && u >= weights[c] {
                u -= weights[c];
                c += 1;
            }
            c
        };
        let brand = classword(class);
        let noise = gaussian_vec(&mut rng, d, config.feature_noise);
        let features: Vec<f64> = means[class].iter().zip(&noise).map(|(m, n)| m + n).collect();
        let captions = (0..config.captions_per_example)
            .map(|_| branded_caption(&mut rng, &brand))
            .collect();
        let rated = rng.random::<f64>() < config.rated_fraction;
        let ratings = if rated {
            let rows = directions
                .iter()
                .map(|dir| {
                    let latent = RATING_CENTER
                        + dir.iter().zip(&features).map(|(a, b)| a * b).sum::<f64>();
                    (0..config.annotators)
                        .map(|_| (latent + annot.sample(&mut rng)).round().clamp(0.0, 4.0) as u8)
                        .collect()
                })
                .collect();
            Some(Ratings::new(rows)?)
        } else {
            None
        };
        examples.push(Example {
            id: format!("{}-{:06}", config.id_prefix, i),
            features,
            captions,
            class: Some(brand),
            ratings,
        });
    }
    Dataset::new(examples)
}

/// Topic: agents, actions, and places that co-occur in generic captions.
struct Topic {
    agents: &'static [&'static str],
    actions: &'static [&'static str],
    places: &'static [&'static str],
}

const TOPICS: &[Topic] = &[
    Topic { agents: &["dog", "puppy"], actions: &["runs", "plays"], places: &["grass", "park"] },
    Topic { agents: &["man", "person"], actions: &["rides", "pushes"], places: &["street", "road"] },
    Topic { agents: &["cat", "kitten"], actions: &["sleeps", "sits"], places: &["couch", "bed"] },
    Topic { agents: &["woman", "girl"], actions: &["cooks", "eats"], places: &["kitchen", "table"] },
    Topic { agents: &["surfer", "boy"], actions: &["surfs", "swims"], places: &["ocean", "beach"] },
    Topic { agents: &["train", "bus"], actions: &["stops", "waits"], places: &["station", "city"] },
    Topic { agents: &["player", "man"], actions: &["throws", "catches"], places: &["field", "court"] },
    Topic { agents: &["bird", "plane"], actions: &["flies", "lands"], places: &["sky", "water"] },
];

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralConfig {
    pub n_examples: usize,
    pub dim: usize,
    pub n_topics: usize,
    pub topic_separation: f64,
    pub feature_noise: f64,
    pub captions_per_example: usize,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for GeneralConfig {
    fn default() -> Self {
        GeneralConfig {
            n_examples: 100,
            dim: 64,
            n_topics: TOPICS.len(),
            topic_separation: 1.0,
            feature_noise: 1.0,
            captions_per_example: 5,
            seed: 0,
            id_prefix: "gen".into(),
        }
    }
}

/// Generates an unlabeled generic caption dataset.
pub fn synth_general(config: &GeneralConfig) -> Result<Dataset> {
    if config.n_examples == 0 || config.dim < 4 {
        return Err(Error::Config("general data needs examples and dimension >= 4".into()));
    }
    if !(1..=TOPICS.len()).contains(&config.n_topics) {
        return Err(Error::Config(format!("n_topics must lie in 1..={}", TOPICS.len())));
    }
    if !(1..=5).contains(&config.captions_per_example) {
        return Err(Error::Config("captions_per_example must lie in 1..=5".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let means: Vec<Vec<f64>> = (0..config.n_topics)
        .map(|_| gaussian_vec(&mut rng, config.dim, config.topic_separation))
        .collect();
    let examples = (0..config.n_examples)
        .map(|i| {
            let t = rng.random_range(0..config.n_topics);
            let topic = &TOPICS[t];
            let noise = gaussian_vec(&mut rng, config.dim, config.feature_noise);
            let features = means[t].iter().zip(&noise).map(|(m, n)| m + n).collect();
            let captions = (0..config.captions_per_example)
                .map(|_| {
                    let text = format!(
                        "a {} {} near the {}",
                        pick(&mut rng, topic.agents),
                        pick(&mut rng, topic.actions),
                        pick(&mut rng, topic.places)
                    );
                    text.split(' ').map(str::to_owned).collect()
                })
                .collect();
            Example {
                id: format!("{}-{:06}", config.id_prefix, i),
                features,
                captions,
                class: None,
                ratings: None,
            }
        })
        .collect();
    Dataset::new(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{mean_ratings, parse_dataset, to_jsonl};
    use crate::data::tokenize::Tokenizer;

    #[test]
    fn every_caption_mentions_its_classword() {
        let ds = synth_generate(&SynthConfig {
            n_classes: 2,
            n_examples: 4,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(ds.len(), 4);
        for ex in ds.examples() {
            let c = ex.class.as_ref().unwrap();
            assert!(ex.captions.iter().all(|cap| cap.contains(c)));
        }
        assert_eq!(ds.registry().len(), 2);
        let k = ds.registry().mask(ds.vocab()).unwrap();
        assert_eq!(k.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn seeded_reproducibility() {
        let cfg = SynthConfig { seed: 9, ..Default::default() };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(to_jsonl(&a), to_jsonl(&b));
        let c = synth_generate(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(to_jsonl(&a), to_jsonl(&c));
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = synth_generate(&SynthConfig { n_examples: 30, dim: 8, ..Default::default() }).unwrap();
        let back = parse_dataset(&to_jsonl(&ds), "mem", &Tokenizer::default()).unwrap();
        assert_eq!(back, ds);
        let gen = synth_general(&GeneralConfig { n_examples: 20, dim: 8, ..Default::default() }).unwrap();
        let back = parse_dataset(&to_jsonl(&gen), "mem", &Tokenizer::default()).unwrap();
        assert_eq!(back, gen);
        assert!(gen.registry().is_empty());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { n_classes: 1, ..Default::default() },
            SynthConfig { dim: 3, ..Default::default() },
            SynthConfig { n_examples: 2, n_classes: 3, ..Default::default() },
            SynthConfig { rating_noise: -1.0, ..Default::default() },
            SynthConfig { annotators: 0, ..Default::default() },
        ] {
            assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn imbalance_skews_class_counts() {
        let ds = synth_generate(&SynthConfig {
            n_classes: 4,
            n_examples: 2000,
            imbalance: 1.5,
            ..Default::default()
        })
        .unwrap();
        let count = |c: usize| {
            let w = classword(c);
            ds.examples().iter().filter(|e| e.class.as_deref() == Some(w.as_str())).count()
        };
        assert!(count(0) > 2 * count(3), "{} vs {}", count(0), count(3));
        assert!(count(3) > 0);
    }

    /// Ordinary least squares via normal equations and Gaussian elimination.
    fn ols_r2(x: &[Vec<f64>], y: &[f64]) -> f64 {
        let p = x[0].len() + 1;
        let mut a = vec![vec![0.0; p + 1]; p];
        for (row, &t) in x.iter().zip(y) {
            let z: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += z[i] * z[j];
                }
                a[i][p] += z[i] * t;
            }
        }
        for col in 0..p {
            let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..p {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=p {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let beta: Vec<f64> = (0..p).map(|i| a[i][p] / a[i][i]).collect();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for (row, &t) in x.iter().zip(y) {
            let pred = beta[0] + row.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            ss_res += (t - pred).powi(2);
            ss_tot += (t - mean).powi(2);
        }
        1.0 - ss_res / ss_tot
    }

    #[test]
    fn latent_rating_is_linearly_recoverable() {
        let ds = synth_generate(&SynthConfig {
            n_classes: 4,
            n_examples: 1000,
            dim: 16,
            rating_noise: 0.2,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let x: Vec<Vec<f64>> = ds.examples().iter().map(|e| e.features.clone()).collect();
        for r in 0..3 {
            let y: Vec<f64> = ds.examples().iter().map(|e| mean_ratings(e).unwrap()[r]).collect();
            let r2 = ols_r2(&x, &y);
            assert!(r2 > 0.8, "rating {r}: R^2 = {r2}");
        }
    }
}
