//! Show-and-Tell style caption decoder with linear rating heads.
//!
//! The image feature vector is projected to the embedding size and fed to
//! the LSTM once, before the start token; every following step consumes a
//! word embedding and emits logits over the vocabulary for the next word.
//! The three rating heads read the image features directly.
//!
//! Two evaluation routes exist: [`forward_caption`] records onto an autodiff
//! [`Graph`] for training, and [`CaptionModel::condition`] runs plain `f64`
//! arithmetic for decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, sigmoid, Graph, Tensor, Var};
use crate::data::{END, START};
use crate::error::{Error, Result};

pub const RATING_KINDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperParams {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Add the projected image to the word embedding at every step, not only
    /// at the initial image step.
    #[serde(default)]
    pub image_every_step: bool,
    #[serde(default = "yes")]
    pub rating_bias: bool,
}

fn yes() -> bool {
    true
}

impl HyperParams {
    pub fn new(vocab_size: usize, embed_dim: usize, hidden_dim: usize, feature_dim: usize) -> Self {
        HyperParams {
            vocab_size,
            embed_dim,
            hidden_dim,
            feature_dim,
            image_every_step: false,
            rating_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 || self.embed_dim == 0 || self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config(format!("invalid model dimensions {self:?}")));
        }
        if self.checked_param_count().is_none() {
            return Err(Error::Config(format!("model dimensions overflow {self:?}")));
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.checked_param_count().expect("validated dimensions")
    }

    fn checked_param_count(&self) -> Option<usize> {
        let (v, e, h, d) = (self.vocab_size, self.embed_dim, self.hidden_dim, self.feature_dim);
        let rating = RATING_KINDS.checked_mul(d.checked_add(usize::from(self.rating_bias))?)?;
        let lstm = h.checked_mul(4)?.checked_mul(e.checked_add(h)?.checked_add(1)?)?;
        [v.checked_mul(e)?, d.checked_mul(e)?, e, lstm, h.checked_mul(v)?, v, rating]
            .iter()
            .try_fold(0usize, |acc, &x| acc.checked_add(x))
    }
}

/// Which learning rate a parameter uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Caption,
    Rating,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel {
    pub hyper: HyperParams,
    /// `[V, E]`
    pub embedding: Tensor,
    /// `[D, E]`
    pub image_proj: Tensor,
    /// `[E]`
    pub image_bias: Tensor,
    /// `[4H, E + H]`, gate blocks in order input, forget, output, candidate.
    pub lstm_w: Tensor,
    /// `[4H]`
    pub lstm_b: Tensor,
    /// `[H, V]`
    pub out_w: Tensor,
    /// `[V]`
    pub out_b: Tensor,
    /// Three `[1, D]` rows.
    pub rating_w: [Tensor; RATING_KINDS],
    /// Three `[1]` biases.
    pub rating_b: [Tensor; RATING_KINDS],
}

const RATING_W_NAMES: [&str; 3] = ["rating_w1", "rating_w2", "rating_w3"];
const RATING_B_NAMES: [&str; 3] = ["rating_b1", "rating_b2", "rating_b3"];

impl CaptionModel {
    pub fn zeros(hyper: HyperParams) -> Result<Self> {
        hyper.validate()?;
        let (v, e, h, d) = (hyper.vocab_size, hyper.embed_dim, hyper.hidden_dim, hyper.feature_dim);
        Ok(CaptionModel {
            hyper,
            embedding: Tensor::zeros(&[v, e]),
            image_proj: Tensor::zeros(&[d, e]),
            image_bias: Tensor::zeros(&[e]),
            lstm_w: Tensor::zeros(&[4 * h, e + h]),
            lstm_b: Tensor::zeros(&[4 * h]),
            out_w: Tensor::zeros(&[h, v]),
            out_b: Tensor::zeros(&[v]),
            rating_w: std::array::from_fn(|_| Tensor::zeros(&[1, d])),
            rating_b: std::array::from_fn(|_| Tensor::zeros(&[1])),
        })
    }

    /// Weight matrices uniform in `[-scale, scale]`, biases zero.
    pub fn init(hyper: HyperParams, scale: f64, seed: u64) -> Result<Self> {
        let mut m = CaptionModel::zeros(hyper)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, _, t) in m.params_mut() {
            if name.contains("bias") || name.ends_with("_b") || name.starts_with("rating_b") {
                continue;
            }
            for v in t.data_mut() {
                *v = if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 };
            }
        }
        Ok(m)
    }

    /// Every trainable tensor with its name and learning-rate group, in a
    /// fixed order.
    pub fn params(&self) -> Vec<(&'static str, ParamGroup, &Tensor)> {
        use ParamGroup::*;
        let mut out: Vec<(&'static str, ParamGroup, &Tensor)> = vec![
            ("embedding", Caption, &self.embedding),
            ("image_proj", Caption, &self.image_proj),
            ("image_bias", Caption, &self.image_bias),
            ("lstm_w", Caption, &self.lstm_w),
            ("lstm_b", Caption, &self.lstm_b),
            ("out_w", Caption, &self.out_w),
            ("out_b", Caption, &self.out_b),
        ];
        for r in 0..RATING_KINDS {
            out.push((RATING_W_NAMES[r], Rating, &self.rating_w[r]));
            if self.hyper.rating_bias {
                out.push((RATING_B_NAMES[r], Rating, &self.rating_b[r]));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, ParamGroup, &mut Tensor)> {
        use ParamGroup::*;
        let with_bias = self.hyper.rating_bias;
        let mut out: Vec<(&'static str, ParamGroup, &mut Tensor)> = vec![
            ("embedding", Caption, &mut self.embedding),
            ("image_proj", Caption, &mut self.image_proj),
            ("image_bias", Caption, &mut self.image_bias),
            ("lstm_w", Caption, &mut self.lstm_w),
            ("lstm_b", Caption, &mut self.lstm_b),
            ("out_w", Caption, &mut self.out_w),
            ("out_b", Caption, &mut self.out_b),
        ];
        for (r, (w, b)) in self.rating_w.iter_mut().zip(self.rating_b.iter_mut()).enumerate() {
            out.push((RATING_W_NAMES[r], Rating, w));
            if with_bias {
                out.push((RATING_B_NAMES[r], Rating, b));
            }
        }
        out
    }

    /// Records every parameter as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut vars = self
            .params()
            .into_iter()
            .map(|(_, _, t)| g.param(t.clone()))
            .collect::<Vec<_>>()
            .into_iter();
        let mut next = || vars.next().expect("parameter list is fixed");
        let embedding = next();
        let image_proj = next();
        let image_bias = next();
        let lstm_w = next();
        let lstm_b = next();
        let out_w = next();
        let out_b = next();
        let mut rating_w = Vec::with_capacity(RATING_KINDS);
        let mut rating_b = Vec::with_capacity(RATING_KINDS);
        for r in 0..RATING_KINDS {
            rating_w.push(next());
            rating_b.push(if self.hyper.rating_bias {
                next()
            } else {
                g.constant(self.rating_b[r].clone())
            });
        }
        Bound {
            hyper: self.hyper,
            embedding,
            image_proj,
            image_bias,
            lstm_w,
            lstm_b,
            out_w,
            out_b,
            rating_w: rating_w.try_into().unwrap(),
            rating_b: rating_b.try_into().unwrap(),
        }
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.hyper.feature_dim {
            return Err(Error::Dimension(format!(
                "model expects {} features, got {}",
                self.hyper.feature_dim,
                features.len()
            )));
        }
        Ok(())
    }

    /// `(rho_1, rho_2, rho_3)`, unclamped.
    pub fn predict_ratings(&self, features: &[f64]) -> Result<[f64; RATING_KINDS]> {
        self.check_features(features)?;
        Ok(std::array::from_fn(|r| {
            self.rating_w[r]
                .data()
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum::<f64>()
                + self.rating_b[r].item()
        }))
    }

    /// One LSTM update on plain vectors.
    pub fn lstm_step(&self, x: &[f64], state: &DecoderState) -> Result<DecoderState> {
        let h = self.hyper.hidden_dim;
        if x.len() != self.hyper.embed_dim || state.h.len() != h || state.c.len() != h {
            return Err(Error::Dimension(format!(
                "lstm_step input {} / state {},{} vs E={} H={h}",
                x.len(),
                state.h.len(),
                state.c.len(),
                self.hyper.embed_dim
            )));
        }
        let xh: Vec<f64> = x.iter().chain(&state.h).copied().collect();
        let mut gates = autodiff::matvec(&self.lstm_w, &xh);
        for (z, b) in gates.iter_mut().zip(self.lstm_b.data()) {
            *z += b;
        }
        let mut next = DecoderState::zeros(h);
        for j in 0..h {
            let i = sigmoid(gates[j]);
            let f = sigmoid(gates[h + j]);
            let o = sigmoid(gates[2 * h + j]);
            let cand = gates[3 * h + j].tanh();
            next.c[j] = f * state.c[j] + i * cand;
            next.h[j] = o * next.c[j].tanh();
        }
        Ok(next)
    }

    fn project_image(&self, features: &[f64]) -> Vec<f64> {
        let mut x = autodiff::vecmat(features, &self.image_proj);
        for (v, b) in x.iter_mut().zip(self.image_bias.data()) {
            *v += b;
        }
        x
    }

    /// Runs the image step and returns a decoder bound to this image,
    /// together with the state after that step.
    pub fn condition(&self, features: &[f64]) -> Result<(Conditioned<'_>, DecoderState)> {
        self.check_features(features)?;
        let image = self.project_image(features);
        let state = self.lstm_step(&image, &DecoderState::zeros(self.hyper.hidden_dim))?;
        Ok((Conditioned { model: self, image }, state))
    }
}

/// LSTM hidden and cell vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl DecoderState {
    pub fn zeros(hidden: usize) -> Self {
        DecoderState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// A model with the image step already applied.
pub struct Conditioned<'m> {
    model: &'m CaptionModel,
    image: Vec<f64>,
}

impl Conditioned<'_> {
    pub fn vocab_size(&self) -> usize {
        self.model.hyper.vocab_size
    }

    /// Feeds `token` and returns logits for the next token plus the new state.
    pub fn step(&self, token: usize, state: &DecoderState) -> Result<(Vec<f64>, DecoderState)> {
        let m = self.model;
        let e = m.hyper.embed_dim;
        if token >= m.hyper.vocab_size {
            return Err(Error::Dimension(format!("token {token} outside vocabulary")));
        }
        let mut x = m.embedding.data()[token * e..(token + 1) * e].to_vec();
        if m.hyper.image_every_step {
            x.iter_mut().zip(&self.image).for_each(|(a, b)| *a += b);
        }
        let next = m.lstm_step(&x, state)?;
        let mut logits = autodiff::vecmat(&next.h, &m.out_w);
        for (l, b) in logits.iter_mut().zip(m.out_b.data()) {
            *l += b;
        }
        Ok((logits, next))
    }
}

/// Graph handles for every parameter of a [`CaptionModel`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub hyper: HyperParams,
    pub embedding: Var,
    pub image_proj: Var,
    pub image_bias: Var,
    pub lstm_w: Var,
    pub lstm_b: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub rating_w: [Var; RATING_KINDS],
    pub rating_b: [Var; RATING_KINDS],
}

impl Bound {
    /// Parameter vars in [`CaptionModel::params`] order.
    pub fn vars(&self) -> Vec<(&'static str, Var)> {
        let mut out = vec![
            ("embedding", self.embedding),
            ("image_proj", self.image_proj),
            ("image_bias", self.image_bias),
            ("lstm_w", self.lstm_w),
            ("lstm_b", self.lstm_b),
            ("out_w", self.out_w),
            ("out_b", self.out_b),
        ];
        for r in 0..RATING_KINDS {
            out.push((RATING_W_NAMES[r], self.rating_w[r]));
            if self.hyper.rating_bias {
                out.push((RATING_B_NAMES[r], self.rating_b[r]));
            }
        }
        out
    }
}

/// `(h, c)` as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct GraphState {
    pub h: Var,
    pub c: Var,
}

impl GraphState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        GraphState {
            h: g.constant(Tensor::zeros(&[hidden])),
            c: g.constant(Tensor::zeros(&[hidden])),
        }
    }
}

/// Standard LSTM cell: sigmoid input/forget/output gates, tanh candidate,
/// `c' = f*c + i*cand`, `h' = o*tanh(c')`.
pub fn lstm_step(g: &mut Graph, p: &Bound, x: Var, state: GraphState) -> Result<GraphState> {
    let h = p.hyper.hidden_dim;
    let xh = g.concat(&[x, state.h], 0)?;
    let z = g.matvec(p.lstm_w, xh)?;
    let z = g.add(z, p.lstm_b)?;
    let zi = g.slice(z, 0, h)?;
    let zf = g.slice(z, h, h)?;
    let zo = g.slice(z, 2 * h, h)?;
    let zc = g.slice(z, 3 * h, h)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let o = g.sigmoid(zo);
    let cand = g.tanh(zc);
    let keep = g.hadamard(f, state.c)?;
    let write = g.hadamard(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let hn = g.hadamard(o, tc)?;
    Ok(GraphState { h: hn, c })
}

fn check_caption(caption: &[usize], vocab_size: usize) -> Result<()> {
    if caption.len() < 2 || caption[0] != START || caption[caption.len() - 1] != END {
        return Err(Error::Contract(
            "caption must start with the start token and end with the end token".into(),
        ));
    }
    if let Some(&bad) = caption.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Dimension(format!(
            "token {bad} outside vocabulary of {vocab_size}"
        )));
    }
    Ok(())
}

/// Teacher-forced decoder pass. Returns one logit vector per predicted
/// position: `logits[t]` scores `caption[t + 1]`, so a caption of length `L`
/// yields `L - 1` vectors. The image step emits none.
pub fn forward_caption(
    g: &mut Graph,
    p: &Bound,
    features: Var,
    caption: &[usize],
) -> Result<Vec<Var>> {
    check_caption(caption, p.hyper.vocab_size)?;
    if g.value(features).shape() != [p.hyper.feature_dim] {
        return Err(Error::Dimension(format!(
            "features {:?} vs feature_dim {}",
            g.value(features).shape(),
            p.hyper.feature_dim
        )));
    }
    let img = g.vecmat(features, p.image_proj)?;
    let img = g.add(img, p.image_bias)?;
    let mut state = GraphState::zeros(g, p.hyper.hidden_dim);
    state = lstm_step(g, p, img, state)?;

    let mut logits = Vec::with_capacity(caption.len() - 1);
    for &tok in &caption[..caption.len() - 1] {
        let row = g.gather(p.embedding, &[tok])?;
        let mut x = g.reshape(row, &[p.hyper.embed_dim])?;
        if p.hyper.image_every_step {
            x = g.add(x, img)?;
        }
        state = lstm_step(g, p, x, state)?;
        let n = g.vecmat(state.h, p.out_w)?;
        logits.push(g.add(n, p.out_b)?);
    }
    Ok(logits)
}

/// Rating head outputs `W_r . features + b_r` as three scalar nodes.
pub fn predict_ratings(g: &mut Graph, p: &Bound, features: Var) -> Result<[Var; RATING_KINDS]> {
    let mut out = Vec::with_capacity(RATING_KINDS);
    for r in 0..RATING_KINDS {
        let rho = g.matvec(p.rating_w[r], features)?;
        out.push(g.add(rho, p.rating_b[r])?);
    }
    Ok(out.try_into().unwrap())
}

/// Caption negative log-likelihood, summed over predicted positions and
/// divided by their count.
#[derive(Clone, Copy, Debug)]
pub struct NllLoss {
    pub sum: Var,
    pub per_word: Var,
}

/// `-sum_t log softmax(logits[t])[caption[t + 1]]`.
pub fn nll_loss(g: &mut Graph, logits: &[Var], caption: &[usize]) -> Result<NllLoss> {
    if logits.is_empty() || logits.len() + 1 != caption.len() {
        return Err(Error::Contract(format!(
            "{} logit vectors for a caption of length {}",
            logits.len(),
            caption.len()
        )));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (t, &n) in logits.iter().enumerate() {
        let lp = g.log_softmax(n)?;
        terms.push(g.pick(lp, caption[t + 1])?);
    }
    let stacked = g.concat(&terms, 0)?;
    let total = g.sum(stacked);
    let sum = g.neg(total);
    let per_word = g.scale(sum, 1.0 / logits.len() as f64);
    Ok(NllLoss { sum, per_word })
}
