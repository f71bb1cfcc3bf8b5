use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{adv_d_loss, adv_g_loss, feature_matching_loss, kl_graph, masked_mel_l1, sum_vars, total_g_loss};
use super::{AcousticModel, DecodeInputs, Discriminators, LossWeights, PosteriorVars, Stage1LossBreakdown};
use crate::autograd::{Grads, Graph, Mat, Var};
use crate::corpus::{chunk_waveform, sample_chunk, ChunkSelection, FrameToWordAlignment, Utterance};
use crate::dsp::MelExtractor;
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{normal, StdRng};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub generator: AdamConfig,
    pub discriminator: AdamConfig,
    pub weights: LossWeights,
    /// Waveform chunk length in samples.
    pub chunk_samples: usize,
    pub pad_short: bool,
    pub divergence_limit: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            generator: AdamConfig::default(),
            discriminator: AdamConfig::default(),
            weights: LossWeights::default(),
            chunk_samples: 19_200,
            pad_short: true,
            divergence_limit: 1e6,
        }
    }
}

/// An utterance with its mel and alignment precomputed.
#[derive(Clone, Debug)]
pub struct Stage1Item<T: Scalar> {
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub word_map: Vec<usize>,
    pub speaker: usize,
    pub waveform: Vec<f32>,
    pub mel: Mat<T>,
    pub alignment: FrameToWordAlignment,
    /// Frames covered by both the alignment and the audio.
    pub n_frames: usize,
}

impl<T: Scalar> Stage1Item<T> {
    pub fn new(u: &Utterance, speaker: usize, mel: &MelExtractor<T>) -> Result<Self> {
        let hop = mel.config().hop;
        let n_frames = u.aligned_frames(hop);
        Ok(Self {
            phonemes: u.phonemes.clone(),
            durations: u.durations.clone(),
            word_map: u.word_map.clone(),
            speaker,
            waveform: u.waveform.clone(),
            mel: mel.extract(&u.waveform)?.frames,
            alignment: u.alignment(n_frames)?,
            n_frames,
        })
    }

    pub fn decode_inputs(&self, speaker: usize) -> DecodeInputs<'_> {
        DecodeInputs {
            phonemes: &self.phonemes,
            durations: &self.durations,
            word_map: &self.word_map,
            speaker,
        }
    }
}

/// Random choices for one item in one step: the chunk and the latent noise.
#[derive(Clone, Debug)]
pub struct Stage1Batch<T: Scalar> {
    pub chunks: Vec<ChunkSelection>,
    pub eps: Vec<Mat<T>>,
}

/// Graph nodes of the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub adv_g: Var,
    pub feat: Var,
    pub mel: Var,
    pub kl: Var,
    pub total: Var,
}

struct GenOut {
    fake: Var,
    post: PosteriorVars,
    real: Mat<f64>,
}

/// Owns the generator, discriminators, both optimizers and the step RNG.
#[derive(Clone, Debug)]
pub struct Stage1Trainer<T: Scalar> {
    pub model: AcousticModel<T>,
    pub disc: Discriminators<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub options: TrainOptions,
    pub rng: StdRng,
    pub step: u64,
    mel: MelExtractor<T>,
}

fn collect<T: Scalar>(grads: &mut Grads<T>, bound: &Bound) -> Vec<Option<Mat<T>>> {
    bound.vars().iter().map(|&v| grads.take(v)).collect()
}

impl<T: Scalar> Stage1Trainer<T> {
    pub fn new(
        model: AcousticModel<T>,
        disc: Discriminators<T>,
        options: TrainOptions,
        mel: MelExtractor<T>,
        rng: StdRng,
    ) -> Result<Self> {
        options.weights.validate()?;
        if options.chunk_samples % model.config.hop != 0 {
            return Err(Error::config("chunk_samples", "must be a multiple of the hop"));
        }
        let opt_g = Adam::new(options.generator, &model.params);
        let opt_d = Adam::new(options.discriminator, &disc.params);
        Ok(Self {
            model,
            disc,
            opt_g,
            opt_d,
            options,
            rng,
            step: 0,
            mel,
        })
    }

    pub fn mel(&self) -> &MelExtractor<T> {
        &self.mel
    }

    /// Draws a chunk and latent noise for every item.
    pub fn draw(&mut self, items: &[&Stage1Item<T>]) -> Result<Stage1Batch<T>> {
        let hop = self.model.config.hop;
        let u = self.model.config.latent_dim;
        let mut chunks = Vec::new();
        let mut eps = Vec::new();
        for it in items {
            chunks.push(sample_chunk(it.n_frames, self.options.chunk_samples, hop, self.options.pad_short, &mut self.rng)?);
            let w = it.alignment.n_words();
            eps.push(Array2::from_shape_fn((w, u), |_| T::c(normal(&mut self.rng))));
        }
        Ok(Stage1Batch { chunks, eps })
    }

    fn generate(&self, g: &mut Graph<T>, p: &Bound, items: &[&Stage1Item<T>], batch: &Stage1Batch<T>) -> Result<Vec<GenOut>> {
        let hop = self.model.config.hop;
        let mut outs = Vec::new();
        for ((it, sel), eps) in items.iter().zip(&batch.chunks).zip(&batch.eps) {
            let mel = g.constant(it.mel.clone());
            let post = self.model.reference_encode(g, p, mel, &it.alignment, it.speaker)?;
            let sigma = g.exp(post.log_sigma);
            let e = g.constant(eps.clone());
            let noise = g.mul(sigma, e);
            let z = g.add(post.mean, noise);
            let b = self.model.decode(g, p, &it.decode_inputs(it.speaker), z)?;
            let rows = g.slice_rows(b, sel.frame_start, sel.valid_frames);
            let mut fake = self.model.vocode(g, p, rows)?;
            if sel.is_padded() {
                fake = g.pad_rows(fake, 0, (sel.frame_count - sel.valid_frames) * hop);
            }
            let real = chunk_waveform(&it.waveform, sel, hop);
            let real = Array2::from_shape_fn((real.len(), 1), |(i, _)| real[i] as f64);
            outs.push(GenOut { fake, post, real });
        }
        Ok(outs)
    }

    fn generator_terms(
        &self,
        g: &mut Graph<T>,
        pd: &Bound,
        outs: &[GenOut],
        batch: &Stage1Batch<T>,
    ) -> Result<GeneratorLoss> {
        let m = self.options.chunk_samples;
        let (mut adv, mut feat, mut mel, mut kl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (o, sel) in outs.iter().zip(&batch.chunks) {
            let real = g.constant(o.real.mapv(T::c));
            let dr = self.disc.forward(g, pd, real, m)?;
            let df = self.disc.forward(g, pd, o.fake, m)?;
            let fake_scores: Vec<Var> = df.iter().map(|d| d.score).collect();
            adv.push(adv_g_loss(g, &fake_scores));
            feat.push(feature_matching_loss(g, &dr, &df));
            let xr = self.mel.graph_mel(g, real);
            let xf = self.mel.graph_mel(g, o.fake);
            mel.push(masked_mel_l1(g, xr, xf, sel.valid_frames));
            kl.push(kl_graph(g, o.post.mean, o.post.log_sigma));
        }
        let inv = T::c(1.0 / outs.len() as f64);
        let mut avg = |xs: &[Var]| {
            let s = sum_vars(g, xs);
            g.scale(s, inv)
        };
        let (adv_g, feat, mel, kl) = (avg(&adv), avg(&feat), avg(&mel), avg(&kl));
        let total = total_g_loss(g, &self.options.weights, adv_g, feat, mel, kl);
        Ok(GeneratorLoss {
            adv_g,
            feat,
            mel,
            kl,
            total,
        })
    }

    /// Builds the generator objective for fixed random draws. With
    /// `trainable`, generator parameters are tracked; discriminator
    /// parameters are always constants here.
    pub fn generator_objective(
        &self,
        g: &mut Graph<T>,
        trainable: bool,
        items: &[&Stage1Item<T>],
        batch: &Stage1Batch<T>,
    ) -> Result<(GeneratorLoss, Bound)> {
        let p = self.model.bind(g, trainable);
        let outs = self.generate(g, &p, items, batch)?;
        let pd = self.disc.params.bind(g, false);
        let loss = self.generator_terms(g, &pd, &outs, batch)?;
        Ok((loss, p))
    }

    /// Discriminator loss on real chunks and (detached) generated chunks.
    pub fn discriminator_objective(&self, g: &mut Graph<T>, reals: &[Mat<f64>], fakes: &[Mat<T>]) -> Result<(Var, Bound)> {
        let pd = self.disc.params.bind(g, true);
        let m = self.options.chunk_samples;
        let mut terms = Vec::new();
        for (r, f) in reals.iter().zip(fakes) {
            let rv = g.constant(r.mapv(T::c));
            let fv = g.constant(f.clone());
            let dr = self.disc.forward(g, &pd, rv, m)?;
            let df = self.disc.forward(g, &pd, fv, m)?;
            let rs: Vec<Var> = dr.iter().map(|d| d.score).collect();
            let fs: Vec<Var> = df.iter().map(|d| d.score).collect();
            terms.push(adv_d_loss(g, &rs, &fs));
        }
        let s = sum_vars(g, &terms);
        let s = g.scale(s, T::c(1.0 / reals.len() as f64));
        Ok((s, pd))
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, items: &[&Stage1Item<T>]) -> Result<Stage1LossBreakdown> {
        if items.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let batch = self.draw(items)?;
        let mut gg = Graph::new();
        let pg = self.model.bind(&mut gg, true);
        let outs = self.generate(&mut gg, &pg, items, &batch)?;

        let reals: Vec<Mat<f64>> = outs.iter().map(|o| o.real.clone()).collect();
        let fakes: Vec<Mat<T>> = outs.iter().map(|o| gg.value(o.fake).clone()).collect();
        let mut gd = Graph::new();
        let (adv_d, pd) = self.discriminator_objective(&mut gd, &reals, &fakes)?;
        let adv_d_value = gd.scalar(adv_d).f64();
        if !adv_d_value.is_finite() || adv_d_value.abs() > self.options.divergence_limit {
            return Err(Error::Diverged {
                step: self.step + 1,
                term: "adv_d".into(),
                value: adv_d_value,
            });
        }
        let mut grads = gd.backward(adv_d);
        let dg = collect(&mut grads, &pd);
        drop(gd);
        self.opt_d.update(&mut self.disc.params, &dg);

        let pdc = self.disc.params.bind(&mut gg, false);
        let loss = self.generator_terms(&mut gg, &pdc, &outs, &batch)?;
        let v = |x: Var| gg.scalar(x).f64();
        let breakdown = Stage1LossBreakdown {
            adv_g: v(loss.adv_g),
            adv_d: adv_d_value,
            feat: v(loss.feat),
            mel: v(loss.mel),
            kl: v(loss.kl),
            total_g: v(loss.total),
            total_d: adv_d_value,
        };
        breakdown.check(self.step + 1, self.options.divergence_limit)?;
        let mut grads = gg.backward(loss.total);
        let gp = collect(&mut grads, &pg);
        self.opt_g.update(&mut self.model.params, &gp);
        self.step += 1;
        Ok(breakdown)
    }

    /// Random index batch from `n` items.
    pub fn pick(&mut self, n: usize, batch: usize) -> Vec<usize> {
        (0..batch).map(|_| self.rng.random_range(0..n)).collect()
    }
}
