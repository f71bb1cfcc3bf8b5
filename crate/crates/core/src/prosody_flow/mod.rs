//! Stage II: conditional normalizing flows from word-level prosody latents
//! to standard normal noise, conditioned on a multi-sentence text window
//! and the speaker, trained by exact likelihood.

mod context;
mod flow;
mod window;

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::loss::sum_vars;
use crate::acoustic::SpeakerTable;
use crate::autograd::{Graph, Mat, Var};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{normal, StdRng};
use crate::scalar::Scalar;

pub use context::{sentence_features, ContextConfig, ContextEncoder, WordVocab, UNKNOWN_WORD};
pub use flow::{ActNorm, Coupling, FlowStack, FlowStep, Mixing};
pub use window::{build_windows, ContextWindow, WindowRange};

/// `0.5·ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyFlowConfig {
    pub n_speakers: usize,
    pub speaker_dim: usize,
    pub latent_dim: usize,
    pub duration_latent_dim: usize,
    pub steps: usize,
    pub hidden: usize,
    pub context: ContextConfig,
    pub window: WindowRange,
}

impl ProsodyFlowConfig {
    pub fn new(n_speakers: usize) -> Self {
        Self {
            n_speakers,
            speaker_dim: 192,
            latent_dim: 4,
            duration_latent_dim: 2,
            steps: 12,
            hidden: 32,
            context: ContextConfig::default(),
            window: WindowRange::default(),
        }
    }
}

/// Latent rows and their log-determinants after the forward flows.
#[derive(Clone, Copy, Debug)]
pub struct FlowOutputs {
    pub z: Var,
    pub zd: Var,
    pub logdet_z: Var,
    pub logdet_zd: Var,
}

#[derive(Clone, Debug)]
pub struct ProsodyFlow<T: Scalar> {
    pub config: ProsodyFlowConfig,
    pub params: ParamStore<T>,
    pub vocab: WordVocab,
    pub speakers: SpeakerTable,
    pub context: ContextEncoder,
    pub acoustic_flow: FlowStack,
    pub duration_flow: FlowStack,
}

impl<T: Scalar> ProsodyFlow<T> {
    pub fn new<R: Rng>(config: ProsodyFlowConfig, vocab: WordVocab, rng: &mut R) -> Result<Self> {
        config.window.validate()?;
        if config.n_speakers == 0 || config.steps == 0 {
            return Err(Error::config("flow_steps", "speakers and steps must be positive"));
        }
        let mut s = ParamStore::new();
        let speakers = SpeakerTable::new(&mut s, rng, "flow.speaker", config.n_speakers, config.speaker_dim);
        let context = ContextEncoder::new(&mut s, rng, "flow.ctx", config.context.clone(), vocab.len(), config.speaker_dim)?;
        let cond = config.context.cond_dim;
        let acoustic_flow = FlowStack::new(&mut s, rng, "flow.z", config.latent_dim, config.steps, cond, config.hidden)?;
        let duration_flow = FlowStack::new(&mut s, rng, "flow.zd", config.duration_latent_dim, config.steps, cond, config.hidden)?;
        Ok(Self {
            config,
            params: s,
            vocab,
            speakers,
            context,
            acoustic_flow,
            duration_flow,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// One condition vector per word of the window; `offsets` mark its
    /// sentences as in [`ContextWindow::offsets`].
    pub fn conditions(&self, g: &mut Graph<T>, p: &Bound, words: &[usize], offsets: &[usize], speaker: usize) -> Result<Var> {
        let c = self.speakers.lookup(g, p, speaker, "flow.context")?;
        self.context.forward(g, p, words, offsets, c)
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, z: Var, zd: Var, cond: Var) -> Result<FlowOutputs> {
        let (zs, logdet_z) = self.acoustic_flow.forward(g, p, z, cond)?;
        let (zds, logdet_zd) = self.duration_flow.forward(g, p, zd, cond)?;
        Ok(FlowOutputs {
            z: zs,
            zd: zds,
            logdet_z,
            logdet_zd,
        })
    }

    /// Summed negative log-likelihood of the rows `z`, `zd` under the flows.
    pub fn nll_sum(&self, g: &mut Graph<T>, p: &Bound, z: Var, zd: Var, cond: Var) -> Result<Var> {
        let out = self.forward(g, p, z, zd, cond)?;
        let (w, u) = g.shape(out.z);
        let ud = g.shape(out.zd).1;
        let qz = g.square(out.z);
        let qz = g.sum(qz);
        let qd = g.square(out.zd);
        let qd = g.sum(qd);
        let q = g.add(qz, qd);
        let q = g.scale(q, T::c(0.5));
        let q = g.add_scalar(q, T::c(w as f64 * (u + ud) as f64 * HALF_LN_2PI));
        let ld = g.add(out.logdet_z, out.logdet_zd);
        Ok(g.sub(q, ld))
    }

    /// Per-word negative log-likelihood of target latents given conditions.
    pub fn nll(&self, g: &mut Graph<T>, p: &Bound, z: Var, zd: Var, cond: Var) -> Result<Var> {
        let w = g.shape(z).0;
        if w == 0 {
            return Err(Error::Argument("no words to score".into()));
        }
        let s = self.nll_sum(g, p, z, zd, cond)?;
        Ok(g.scale(s, T::c(1.0 / w as f64)))
    }

    /// Latents for every word of the window from given noise.
    pub fn decode_noise(&self, words: &[usize], offsets: &[usize], speaker: usize, eps_z: &Mat<T>, eps_zd: &Mat<T>) -> Result<(Mat<T>, Mat<T>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let cond = self.conditions(&mut g, &p, words, offsets, speaker)?;
        let ez = g.constant(eps_z.clone());
        let ed = g.constant(eps_zd.clone());
        let z = self.acoustic_flow.inverse(&mut g, &p, ez, cond)?;
        let zd = self.duration_flow.inverse(&mut g, &p, ed, cond)?;
        Ok((g.value(z).clone(), g.value(zd).clone()))
    }

    /// Draws noise at temperature `tau` over the whole window, inverts both
    /// flows and returns the rows of `target` (a word span of the window).
    pub fn sample<R: Rng>(
        &self,
        words: &[usize],
        offsets: &[usize],
        speaker: usize,
        target: (usize, usize),
        rng: &mut R,
        tau: f64,
    ) -> Result<(Mat<T>, Mat<T>)> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::Argument(format!("temperature must be non-negative, got {tau}")));
        }
        let (a, b) = target;
        if a >= b || b > words.len() {
            return Err(Error::Argument(format!("target span {a}..{b} outside a {}-word window", words.len())));
        }
        let w = words.len();
        let mut draw = |u: usize| Array2::from_shape_fn((w, u), |_| T::c(tau * normal(rng)));
        let ez = draw(self.config.latent_dim);
        let ed = draw(self.config.duration_latent_dim);
        let (z, zd) = self.decode_noise(words, offsets, speaker, &ez, &ed)?;
        let rows = ndarray::s![a..b, ..];
        Ok((z.slice(rows).to_owned(), zd.slice(rows).to_owned()))
    }
}

/// Stage I posterior for one utterance, as stored in the latent cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub id: String,
    pub n_words: usize,
    pub z_mean: Vec<Vec<f64>>,
    pub z_std: Vec<Vec<f64>>,
    pub zd_mean: Vec<Vec<f64>>,
    pub zd_std: Vec<Vec<f64>>,
}

impl LatentRecord {
    pub fn new<T: Scalar>(id: &str, z_mean: &Mat<T>, z_std: &Mat<T>, zd_mean: &Mat<T>, zd_std: &Mat<T>) -> Result<Self> {
        let rows = |m: &Mat<T>| -> Vec<Vec<f64>> { m.rows().into_iter().map(|r| r.iter().map(|v| v.f64()).collect()).collect() };
        let n_words = z_mean.nrows();
        if [z_std.nrows(), zd_mean.nrows(), zd_std.nrows()].iter().any(|&n| n != n_words) {
            return Err(Error::Shape(format!("latent rows disagree for {id}")));
        }
        Ok(Self {
            id: id.into(),
            n_words,
            z_mean: rows(z_mean),
            z_std: rows(z_std),
            zd_mean: rows(zd_mean),
            zd_std: rows(zd_std),
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("z_mean", &self.z_mean), ("z_std", &self.z_std), ("zd_mean", &self.zd_mean), ("zd_std", &self.zd_std)] {
            if m.len() != self.n_words {
                return Err(Error::validation(name, format!("{} rows for {} words", m.len(), self.n_words)));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::validation(name, "non-finite value"));
            }
        }
        if self.z_std.iter().chain(&self.zd_std).flatten().any(|&s| s <= 0.0) {
            return Err(Error::validation("z_std", "standard deviations must be positive"));
        }
        Ok(())
    }
}

fn to_mat<T: Scalar>(rows: &[Vec<f64>]) -> Mat<T> {
    let c = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), c), |(i, j)| T::c(rows[i][j]))
}

/// One training window: all its words for context, and the latents of the
/// target words whose utterances have cached latents.
#[derive(Clone, Debug)]
pub struct FlowWindowItem<T: Scalar> {
    pub words: Vec<usize>,
    pub speaker: usize,
    pub window: ContextWindow,
    /// Word positions within the window that carry targets.
    pub rows: Vec<usize>,
    pub z_mean: Mat<T>,
    pub z_std: Mat<T>,
    pub zd_mean: Mat<T>,
    pub zd_std: Mat<T>,
}

/// Builds training windows for every document of `corpus`. Sentences
/// without an entry in `latents` still provide context.
pub fn window_items<T: Scalar>(
    corpus: &Corpus,
    latents: &HashMap<String, LatentRecord>,
    vocab: &WordVocab,
    range: WindowRange,
) -> Result<Vec<FlowWindowItem<T>>> {
    let speakers = corpus.speakers();
    let mut items = Vec::new();
    for (_, idx) in corpus.documents() {
        let utts: Vec<_> = idx.iter().map(|&i| &corpus.utterances[i]).collect();
        let counts: Vec<usize> = utts.iter().map(|u| u.n_words()).collect();
        for window in build_windows(&counts, range)? {
            let words: Vec<usize> = window.sentences.clone().flat_map(|s| vocab.encode(&utts[s].text)).collect();
            let mut rows = Vec::new();
            let (mut zm, mut zs, mut dm, mut ds) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for s in window.targets.clone() {
                let Some(rec) = latents.get(&utts[s].id) else {
                    continue;
                };
                let (a, b) = window.sentence_span(s).unwrap();
                if rec.n_words != b - a {
                    return Err(Error::validation(
                        "n_words",
                        format!("latents for {} have {} words, text has {}", rec.id, rec.n_words, b - a),
                    ));
                }
                rows.extend(a..b);
                zm.extend(rec.z_mean.iter().cloned());
                zs.extend(rec.z_std.iter().cloned());
                dm.extend(rec.zd_mean.iter().cloned());
                ds.extend(rec.zd_std.iter().cloned());
            }
            if rows.is_empty() {
                continue;
            }
            let first = &utts[window.targets.start];
            let speaker = speakers.iter().position(|s| *s == first.speaker).expect("speaker of a corpus utterance");
            items.push(FlowWindowItem {
                words,
                speaker,
                window,
                rows,
                z_mean: to_mat(&zm),
                z_std: to_mat(&zs),
                zd_mean: to_mat(&dm),
                zd_std: to_mat(&ds),
            });
        }
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainOptions {
    pub adam: AdamConfig,
    /// Train on posterior samples instead of posterior means.
    pub sampled_targets: bool,
    pub divergence_limit: f64,
}

impl Default for FlowTrainOptions {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                ..AdamConfig::default()
            },
            sampled_targets: false,
            divergence_limit: 1e6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowTrainer<T: Scalar> {
    pub model: ProsodyFlow<T>,
    pub opt: Adam<T>,
    pub options: FlowTrainOptions,
    pub rng: StdRng,
    pub step: u64,
}

impl<T: Scalar> FlowTrainer<T> {
    pub fn new(model: ProsodyFlow<T>, options: FlowTrainOptions, rng: StdRng) -> Self {
        let opt = Adam::new(options.adam, &model.params);
        Self {
            model,
            opt,
            options,
            rng,
            step: 0,
        }
    }

    fn targets(&mut self, it: &FlowWindowItem<T>) -> (Mat<T>, Mat<T>) {
        if !self.options.sampled_targets {
            return (it.z_mean.clone(), it.zd_mean.clone());
        }
        let rng = &mut self.rng;
        let mut draw = |m: &Mat<T>, s: &Mat<T>| {
            Array2::from_shape_fn(m.dim(), |ix| m[ix] + s[ix] * T::c(normal(&mut *rng)))
        };
        (draw(&it.z_mean, &it.z_std), draw(&it.zd_mean, &it.zd_std))
    }

    /// Mean per-word NLL over the batch's target words.
    pub fn objective(&self, g: &mut Graph<T>, trainable: bool, items: &[&FlowWindowItem<T>], targets: &[(Mat<T>, Mat<T>)]) -> Result<(Var, Bound)> {
        let p = self.model.bind(g, trainable);
        let mut sums = Vec::new();
        let mut words = 0;
        for (it, (z, zd)) in items.iter().zip(targets) {
            let cond = self.model.conditions(g, &p, &it.words, &it.window.offsets, it.speaker)?;
            let cond = g.gather_rows(cond, it.rows.clone());
            let zv = g.constant(z.clone());
            let dv = g.constant(zd.clone());
            sums.push(self.model.nll_sum(g, &p, zv, dv, cond)?);
            words += it.rows.len();
        }
        let s = sum_vars(g, &sums);
        Ok((g.scale(s, T::c(1.0 / words.max(1) as f64)), p))
    }

    pub fn train_step(&mut self, items: &[&FlowWindowItem<T>]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let targets: Vec<_> = items.iter().map(|it| self.targets(it)).collect();
        let mut g = Graph::new();
        let (nll, p) = self.objective(&mut g, true, items, &targets)?;
        let value = g.scalar(nll).f64();
        if !value.is_finite() || value.abs() > self.options.divergence_limit {
            return Err(Error::Diverged {
                step: self.step + 1,
                term: "nll".into(),
                value,
            });
        }
        let mut grads = g.backward(nll);
        let gp: Vec<Option<Mat<T>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
        self.opt.update(&mut self.model.params, &gp);
        self.step += 1;
        Ok(value)
    }

    /// Mean per-word NLL without updating.
    pub fn evaluate(&self, items: &[&FlowWindowItem<T>]) -> Result<f64> {
        let targets: Vec<_> = items.iter().map(|it| (it.z_mean.clone(), it.zd_mean.clone())).collect();
        let mut g = Graph::new();
        let (nll, _) = self.objective(&mut g, false, items, &targets)?;
        Ok(g.scalar(nll).f64())
    }

    pub fn pick(&mut self, n: usize, batch: usize) -> Vec<usize> {
        (0..batch).map(|_| self.rng.random_range(0..n)).collect()
    }
}
