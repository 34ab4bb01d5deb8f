//! Scores a checkpoint on a labelled test set.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::data::{mean_ratings, Dataset};
use crate::decode::{beam_search, BeamConfig, DEFAULT_BEAM, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::metrics::{
    annotator_baseline, bleu4, cider, rating_deviation, sca, MetricsReport, ReportMeta, SentenceSet, RATING_MAX,
    RATING_MIN,
};
use crate::model::RATING_KINDS;

/// Which metric groups to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricGroups {
    pub sca: bool,
    pub captions: bool,
    pub ratings: bool,
}

impl Default for MetricGroups {
    fn default() -> Self {
        MetricGroups {
            sca: true,
            captions: true,
            ratings: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub beam: usize,
    pub max_len: usize,
    pub groups: MetricGroups,
    /// Row label; defaults to the checkpoint's preset.
    pub name: Option<String>,
    /// Reject the checkpoint unless its vocabulary hash equals this.
    pub expected_vocab_hash: Option<String>,
    /// Worker threads for decoding; results do not depend on it.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            beam: DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
            groups: MetricGroups::default(),
            name: None,
            expected_vocab_hash: None,
            workers: 1,
        }
    }
}

/// Decoded output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Beam hypotheses as words, best first.
    pub sentences: SentenceSet,
    pub ratings: [f64; RATING_KINDS],
}

/// Runs the beam search and rating heads on every test image.
pub fn predict(ckpt: &Checkpoint, test: &Dataset, beam: usize, max_len: usize, workers: usize) -> Result<Vec<Prediction>> {
    if test.dim() != ckpt.model.hyper.feature_dim {
        return Err(Error::Data(format!(
            "checkpoint expects {} features, test set has {}",
            ckpt.model.hyper.feature_dim,
            test.dim()
        )));
    }
    let cfg = BeamConfig::new(beam, max_len);
    let one = |i: usize| -> Result<Prediction> {
        let e = &test.examples()[i];
        let f = ckpt.meta.feature_view.apply(&e.id, &e.features);
        let hyps = beam_search(&ckpt.model, &f, &cfg)?;
        Ok(Prediction {
            sentences: hyps.iter().map(|h| ckpt.vocab.decode(h.words())).collect(),
            ratings: ckpt.model.predict_ratings(&f)?,
        })
    };
    let n = test.len();
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(one).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|lo| {
                let one = &one;
                s.spawn(move || (lo..(lo + chunk).min(n)).map(one).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decoder thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Caption metrics use the top beam hypothesis against all references;
/// classification accuracy uses the whole beam.
pub fn evaluate(ckpt: &Checkpoint, test: &Dataset, opts: &EvalOptions) -> Result<MetricsReport> {
    if let Some(h) = &opts.expected_vocab_hash {
        ckpt.ensure_vocab(h)?;
    }
    let preds = predict(ckpt, test, opts.beam, opts.max_len, opts.workers)?;
    let examples = test.examples();

    let sca_report = if opts.groups.sca {
        let labels: BTreeMap<String, String> = examples
            .iter()
            .filter_map(|e| e.class.clone().map(|c| (e.id.clone(), c)))
            .collect();
        if labels.is_empty() {
            None
        } else {
            let predictions: BTreeMap<String, SentenceSet> = examples
                .iter()
                .zip(&preds)
                .map(|(e, p)| (e.id.clone(), p.sentences.clone()))
                .collect();
            Some(sca(&predictions, &labels, &ckpt.registry)?)
        }
    } else {
        None
    };

    let (bleu, cid) = if opts.groups.captions {
        let cands: Vec<Vec<String>> = preds
            .iter()
            .map(|p| p.sentences.first().cloned().unwrap_or_default())
            .collect();
        let refs: Vec<Vec<Vec<String>>> = examples.iter().map(|e| e.captions.clone()).collect();
        (Some(bleu4(&cands, &refs)?), Some(cider(&cands, &refs)?))
    } else {
        (None, None)
    };

    let deviations = if opts.groups.ratings {
        let mut p = BTreeMap::new();
        let mut t = BTreeMap::new();
        for (e, pr) in examples.iter().zip(&preds) {
            if e.ratings.is_some() {
                p.insert(e.id.clone(), pr.ratings);
                t.insert(e.id.clone(), mean_ratings(e)?);
            }
        }
        if t.is_empty() {
            None
        } else {
            Some(rating_deviation(&p, &t)?)
        }
    } else {
        None
    };

    let gt = annotator_baseline(test).ok().map(|mut g| {
        if !opts.groups.captions {
            g.bleu4 = None;
            g.cider = None;
        }
        if !opts.groups.ratings {
            g.deviations = None;
        }
        g
    });

    Ok(MetricsReport {
        model: opts.name.clone().unwrap_or_else(|| ckpt.meta.preset.clone()),
        n_images: test.len(),
        sca: sca_report,
        bleu4: bleu,
        cider: cid,
        meteor: None,
        deviations,
        gt,
        meta: ReportMeta {
            preset: ckpt.meta.preset.clone(),
            beam: opts.beam,
            max_len: opts.max_len,
            vocab_hash: ckpt.vocab_hash(),
            rating_clamp: [RATING_MIN, RATING_MAX],
            checkpoint_iteration: ckpt.meta.iteration,
        },
    })
}
