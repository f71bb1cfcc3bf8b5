//! Word-level duration prosody: a variational reference encoder over
//! aligned phoneme durations and a per-phoneme log-duration predictor.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::loss::kl_graph;
use crate::acoustic::{PhonemeEncoder, PosteriorVars, ReferenceEncoder, ResConvStack, SpeakerTable, WordProsodyPosterior};
use crate::autograd::{Graph, Mat, Var};
use crate::corpus::{check_word_map, Utterance};
use crate::error::{Error, Result};
use crate::nn::{broadcast_rows, Bound, Linear, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{normal, StdRng};
use crate::scalar::Scalar;

const SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationConfig {
    pub n_phonemes: usize,
    pub n_speakers: usize,
    pub speaker_dim: usize,
    pub latent_dim: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub ref_dim: usize,
    pub pred_dim: usize,
    pub pred_layers: usize,
    /// Weight of the KL term in the duration objective.
    pub kl_weight: f64,
}

impl DurationConfig {
    pub fn new(n_phonemes: usize, n_speakers: usize) -> Self {
        Self {
            n_phonemes,
            n_speakers,
            speaker_dim: 192,
            latent_dim: 2,
            enc_dim: 32,
            enc_layers: 2,
            ref_dim: 32,
            pred_dim: 32,
            pred_layers: 2,
            kl_weight: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_phonemes", self.n_phonemes),
            ("n_speakers", self.n_speakers),
            ("speaker_dim", self.speaker_dim),
            ("duration_latent_dim", self.latent_dim),
            ("duration_enc_dim", self.enc_dim),
            ("duration_ref_dim", self.ref_dim),
            ("duration_pred_dim", self.pred_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.kl_weight > 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::config("alpha_duration", "must be positive"));
        }
        Ok(())
    }
}

/// Scalar values of the duration objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DurationLossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

/// Training targets for one utterance.
#[derive(Clone, Debug)]
pub struct DurationItem {
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub word_map: Vec<usize>,
    pub speaker: usize,
}

impl DurationItem {
    pub fn new(u: &Utterance, speaker: usize) -> Self {
        Self {
            phonemes: u.phonemes.clone(),
            durations: u.durations.clone(),
            word_map: u.word_map.clone(),
            speaker,
        }
    }

    pub fn n_words(&self) -> usize {
        self.word_map.last().map_or(0, |w| w + 1)
    }
}

fn word_spans(word_map: &[usize]) -> Result<Vec<(usize, usize)>> {
    check_word_map(word_map)?;
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for (p, &w) in word_map.iter().enumerate() {
        if w == spans.len() {
            spans.push((p, p + 1));
        } else {
            spans[w].1 = p + 1;
        }
    }
    Ok(spans)
}

#[derive(Clone, Debug)]
pub struct DurationModel<T: Scalar> {
    pub config: DurationConfig,
    pub params: ParamStore<T>,
    pub speakers: SpeakerTable,
    reference: ReferenceEncoder,
    encoder: PhonemeEncoder,
    pred_speaker: Linear,
    pred_in: Linear,
    pred_stack: ResConvStack,
    pred_out: Linear,
}

impl<T: Scalar> DurationModel<T> {
    pub fn new<R: Rng>(config: DurationConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut s = ParamStore::new();
        let speakers = SpeakerTable::new(&mut s, rng, "dur.speaker", c.n_speakers, c.speaker_dim);
        let reference = ReferenceEncoder::new(&mut s, rng, "dur.ref", 1, c.ref_dim, c.speaker_dim, c.latent_dim, 2, 3);
        let encoder = PhonemeEncoder::new(&mut s, rng, "dur.enc", c.n_phonemes, c.enc_dim, c.enc_layers);
        let pred_speaker = Linear::new(&mut s, rng, "dur.pred.spk", c.speaker_dim, c.pred_dim);
        let pred_in = Linear::new(&mut s, rng, "dur.pred.in", c.enc_dim + c.latent_dim + c.pred_dim, c.pred_dim);
        let pred_stack = ResConvStack::new(&mut s, rng, "dur.pred.conv", c.pred_dim, c.pred_layers, 3, false);
        let pred_out = Linear::new(&mut s, rng, "dur.pred.out", c.pred_dim, 1);
        Ok(Self {
            config,
            params: s,
            speakers,
            reference,
            encoder,
            pred_speaker,
            pred_in,
            pred_stack,
            pred_out,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Posterior over `W × U^D` duration latents from aligned durations.
    pub fn reference_encode(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        durations: &[usize],
        word_map: &[usize],
        speaker: usize,
    ) -> Result<PosteriorVars> {
        if durations.len() != word_map.len() {
            return Err(Error::Shape(format!(
                "{} durations for a {}-phoneme word map",
                durations.len(),
                word_map.len()
            )));
        }
        if word_map.is_empty() {
            return Err(Error::Argument("duration reference encoder needs at least one word".into()));
        }
        let spans = word_spans(word_map)?;
        let feats = Array2::from_shape_fn((durations.len(), 1), |(i, _)| T::c((durations[i] as f64 + 1.0).ln()));
        let feats = g.constant(feats);
        let c = self.speakers.lookup(g, p, speaker, "duration.reference")?;
        self.reference.forward(g, p, feats, &spans, c)
    }

    /// Per-phoneme predicted log-durations, `P × 1`.
    pub fn predict_log_durations(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        phonemes: &[usize],
        word_map: &[usize],
        speaker: usize,
        z: Var,
    ) -> Result<Var> {
        if phonemes.len() != word_map.len() {
            return Err(Error::Shape(format!(
                "{} phonemes for a {}-phoneme word map",
                phonemes.len(),
                word_map.len()
            )));
        }
        check_word_map(word_map)?;
        let n_words = word_map.last().map_or(0, |w| w + 1);
        let (w, u) = g.shape(z);
        if w != n_words || u != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "duration latents are {w}×{u}, expected {n_words}×{}",
                self.config.latent_dim
            )));
        }
        let enc = self.encoder.forward(g, p, phonemes)?;
        let z_up = g.gather_rows(z, word_map.to_vec());
        let c = self.speakers.lookup(g, p, speaker, "duration.predictor")?;
        let s = self.pred_speaker.forward(g, p, c);
        let s = broadcast_rows(g, s, phonemes.len());
        let x = g.concat_cols(&[enc, z_up, s]);
        let h = self.pred_in.forward(g, p, x);
        let h = g.leaky_relu(h, T::c(SLOPE));
        let h = self.pred_stack.forward(g, p, h);
        Ok(self.pred_out.forward(g, p, h))
    }

    /// Posterior values without a graph.
    pub fn posterior(&self, durations: &[usize], word_map: &[usize], speaker: usize) -> Result<WordProsodyPosterior<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let post = self.reference_encode(&mut g, &p, durations, word_map, speaker)?;
        Ok(post.values(&g))
    }

    /// Positive real-valued durations in frames.
    pub fn predict_durations(&self, phonemes: &[usize], word_map: &[usize], speaker: usize, z: &Mat<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let ld = self.predict_log_durations(&mut g, &p, phonemes, word_map, speaker, zv)?;
        let out: Vec<f64> = g.value(ld).iter().map(|v| v.f64().exp()).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predicted durations".into()));
        }
        Ok(out)
    }
}

/// `mean((pred − ln max(d, 1))²)` against integer target durations.
pub fn duration_nll<T: Scalar>(g: &mut Graph<T>, pred_log: Var, target: &[usize]) -> Result<Var> {
    let (n, c) = g.shape(pred_log);
    if n != target.len() || c != 1 {
        return Err(Error::Shape(format!("{n}×{c} predictions for {} targets", target.len())));
    }
    let t = Array2::from_shape_fn((n, 1), |(i, _)| T::c((target[i].max(1) as f64).ln()));
    let t = g.constant(t);
    let d = g.sub(pred_log, t);
    Ok(g.mean_square(d))
}

/// Graph terms `(nll, kl, total)` for one item.
pub fn duration_losses<T: Scalar>(
    g: &mut Graph<T>,
    pred_log: Var,
    target: &[usize],
    post: PosteriorVars,
    kl_weight: f64,
) -> Result<(Var, Var, Var)> {
    let nll = duration_nll(g, pred_log, target)?;
    let kl = kl_graph(g, post.mean, post.log_sigma);
    let k = g.scale(kl, T::c(kl_weight));
    let total = g.add(nll, k);
    Ok((nll, kl, total))
}

/// Integer frames from real durations: round half up, at least one frame
/// each, then unit corrections toward `target_total` that keep the total
/// absolute rounding error minimal (largest remainders first).
pub fn quantize_durations(durations: &[f64], target_total: Option<usize>) -> Result<Vec<usize>> {
    if let Some(d) = durations.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(Error::Argument(format!("durations must be positive and finite, got {d}")));
    }
    let mut q: Vec<usize> = durations.iter().map(|&d| ((d + 0.5).floor() as usize).max(1)).collect();
    let Some(target) = target_total else {
        return Ok(q);
    };
    if target < durations.len() {
        return Err(Error::Argument(format!(
            "target total {target} is below one frame for each of {} phonemes",
            durations.len()
        )));
    }
    let mut total: usize = q.iter().sum();
    while total < target {
        let i = argbest(durations, &q, |_| true, |a, b| a > b);
        q[i] += 1;
        total += 1;
    }
    while total > target {
        let i = argbest(durations, &q, |n| n > 1, |a, b| a < b);
        q[i] -= 1;
        total -= 1;
    }
    Ok(q)
}

fn argbest(d: &[f64], q: &[usize], eligible: impl Fn(usize) -> bool, better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&x, &n)) in d.iter().zip(q).enumerate() {
        if !eligible(n) {
            continue;
        }
        let r = x - n as f64;
        if best.is_none_or(|(_, b)| better(r, b)) {
            best = Some((i, r));
        }
    }
    best.expect("an eligible phoneme exists").0
}

#[derive(Clone, Debug)]
pub struct DurationTrainer<T: Scalar> {
    pub model: DurationModel<T>,
    pub opt: Adam<T>,
    pub rng: StdRng,
    pub step: u64,
    pub divergence_limit: f64,
}

impl<T: Scalar> DurationTrainer<T> {
    pub fn new(model: DurationModel<T>, adam: AdamConfig, rng: StdRng) -> Self {
        let opt = Adam::new(adam, &model.params);
        Self {
            model,
            opt,
            rng,
            step: 0,
            divergence_limit: 1e6,
        }
    }

    /// Batch-averaged objective with latents drawn from `eps`.
    pub fn objective(
        &self,
        g: &mut Graph<T>,
        trainable: bool,
        items: &[&DurationItem],
        eps: &[Mat<T>],
    ) -> Result<(Var, Var, Var, Bound)> {
        let p = self.model.bind(g, trainable);
        let (mut nlls, mut kls, mut totals) = (Vec::new(), Vec::new(), Vec::new());
        for (it, e) in items.iter().zip(eps) {
            let post = self.model.reference_encode(g, &p, &it.durations, &it.word_map, it.speaker)?;
            let sigma = g.exp(post.log_sigma);
            let e = g.constant(e.clone());
            let noise = g.mul(sigma, e);
            let z = g.add(post.mean, noise);
            let pred = self.model.predict_log_durations(g, &p, &it.phonemes, &it.word_map, it.speaker, z)?;
            let (n, k, t) = duration_losses(g, pred, &it.durations, post, self.model.config.kl_weight)?;
            nlls.push(n);
            kls.push(k);
            totals.push(t);
        }
        let inv = T::c(1.0 / items.len() as f64);
        let mut avg = |xs: &[Var]| {
            let s = crate::acoustic::loss::sum_vars(g, xs);
            g.scale(s, inv)
        };
        let (nll, kl, total) = (avg(&nlls), avg(&kls), avg(&totals));
        Ok((nll, kl, total, p))
    }

    pub fn train_step(&mut self, items: &[&DurationItem]) -> Result<DurationLossBreakdown> {
        if items.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let u = self.model.config.latent_dim;
        let eps: Vec<Mat<T>> = items
            .iter()
            .map(|it| Array2::from_shape_fn((it.n_words(), u), |_| T::c(normal(&mut self.rng))))
            .collect();
        let mut g = Graph::new();
        let (nll, kl, total, p) = self.objective(&mut g, true, items, &eps)?;
        let b = DurationLossBreakdown {
            nll: g.scalar(nll).f64(),
            kl: g.scalar(kl).f64(),
            total: g.scalar(total).f64(),
        };
        for (term, value) in [("nll", b.nll), ("kl", b.kl), ("total", b.total)] {
            if !value.is_finite() || value.abs() > self.divergence_limit {
                return Err(Error::Diverged {
                    step: self.step + 1,
                    term: term.into(),
                    value,
                });
            }
        }
        let mut grads = g.backward(total);
        let gp: Vec<Option<Mat<T>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
        self.opt.update(&mut self.model.params, &gp);
        self.step += 1;
        Ok(b)
    }

    /// Random index batch from `n` items.
    pub fn pick(&mut self, n: usize, batch: usize) -> Vec<usize> {
        (0..batch).map(|_| self.rng.random_range(0..n)).collect()
    }
}
