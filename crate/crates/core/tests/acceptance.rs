//! Acceptance gates for the whole pipeline, one line per criterion.
//!
//! `cargo test --test acceptance` runs every criterion except the long
//! four-speaker transfer run, which is enabled with `PROSODY_ACCEPTANCE_FPT=1`
//! (several CPU hours). Criterion numbers given as arguments select a subset,
//! e.g. `cargo test --test acceptance -- 1 3`.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array2, Axis};
use prosody_core::acoustic::loss::{adv_d_loss, adv_g_loss, total_g_loss};
use prosody_core::acoustic::{
    kl_gaussian, AcousticConfig, AcousticModel, DiscriminatorConfig, Discriminators, LossWeights, Stage1Item, Stage1Trainer,
    TrainOptions,
};
use prosody_core::autograd::{Graph, Mat};
use prosody_core::corpus::{generate_synthetic_corpus, Corpus, SyntheticCorpus, SyntheticCorpusSpec, Utterance};
use prosody_core::dsp::{MelConfig, MelExtractor};
use prosody_core::duration::{DurationConfig, DurationItem, DurationModel, DurationTrainer};
use prosody_core::harness::{self, ModelScale, RunConfig, RunDir, StageRun};
use prosody_core::inference::{encode_reference, infer_fpt, infer_tts, synthesize_from_latents, SentenceInput, TransferOptions};
use prosody_core::nn::init_normal;
use prosody_core::optim::AdamConfig;
use prosody_core::prosody_flow::{
    window_items, ContextConfig, FlowTrainOptions, FlowTrainer, FlowWindowItem, LatentRecord, ProsodyFlow, ProsodyFlowConfig,
    WordVocab,
};
use prosody_core::rng::{normal, rng_from_seed};
use prosody_core::Scalar;
use rand::Rng;

type Outcome = Result<String, String>;

fn gate(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- flows

fn flow_config(n_speakers: usize) -> ProsodyFlowConfig {
    ProsodyFlowConfig {
        speaker_dim: 16,
        context: ContextConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            ff_dim: 32,
            cond_dim: 8,
        },
        hidden: 16,
        ..ProsodyFlowConfig::new(n_speakers)
    }
}

/// A flow whose steps are all perturbed away from the identity.
fn random_flow<T: Scalar>(seed: u64) -> ProsodyFlow<T> {
    let vocab = WordVocab::from_texts(["w0 w1 w2 w3"]);
    let mut rng = rng_from_seed(seed);
    let mut m = ProsodyFlow::new(flow_config(2), vocab, &mut rng).unwrap();
    let ids: Vec<_> = m.params.ids().filter(|&id| m.params.name(id).starts_with("flow.z")).collect();
    for id in ids {
        let (r, c) = m.params.get(id).dim();
        let noise: Mat<T> = init_normal(&mut rng, r, c, 0.1);
        let v = m.params.get_mut(id);
        *v = &*v + &noise;
    }
    m
}

fn forward<T: Scalar>(m: &ProsodyFlow<T>, z: &Mat<T>, zd: &Mat<T>, cond: &Mat<T>) -> (Mat<T>, Mat<T>, f64) {
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let (zv, dv, cv) = (g.constant(z.clone()), g.constant(zd.clone()), g.constant(cond.clone()));
    let o = m.forward(&mut g, &p, zv, dv, cv).unwrap();
    let ld = g.scalar(o.logdet_z).f64() + g.scalar(o.logdet_zd).f64();
    (g.value(o.z).clone(), g.value(o.zd).clone(), ld)
}

fn inverse<T: Scalar>(m: &ProsodyFlow<T>, z: &Mat<T>, zd: &Mat<T>, cond: &Mat<T>) -> (Mat<T>, Mat<T>) {
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let (zv, dv, cv) = (g.constant(z.clone()), g.constant(zd.clone()), g.constant(cond.clone()));
    let a = m.acoustic_flow.inverse(&mut g, &p, zv, cv).unwrap();
    let b = m.duration_flow.inverse(&mut g, &p, dv, cv).unwrap();
    (g.value(a).clone(), g.value(b).clone())
}

fn log_abs_det(mut a: Mat<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[[i, k]].abs().total_cmp(&a[[j, k]].abs())).unwrap();
        for j in 0..n {
            a.swap([k, j], [piv, j]);
        }
        let d = a[[k, k]];
        acc += d.abs().ln();
        for i in k + 1..n {
            let f = a[[i, k]] / d;
            for j in k..n {
                a[[i, j]] -= f * a[[k, j]];
            }
        }
    }
    acc
}

/// Sum over words of log|det| of the dense per-word Jacobians, each column
/// from central differences.
fn numeric_logdet(m: &ProsodyFlow<f64>, z: &Mat<f64>, zd: &Mat<f64>, cond: &Mat<f64>, h: f64) -> f64 {
    let mut total = 0.0;
    for acoustic in [true, false] {
        let x = if acoustic { z } else { zd };
        for word in 0..x.nrows() {
            let c = x.ncols();
            let mut jac = Array2::zeros((c, c));
            for j in 0..c {
                let eval = |delta: f64| {
                    let mut xp = x.clone();
                    xp[[word, j]] += delta;
                    let (a, b, _) = if acoustic { forward(m, &xp, zd, cond) } else { forward(m, z, &xp, cond) };
                    (if acoustic { a } else { b }).row(word).to_owned()
                };
                jac.column_mut(j).assign(&((eval(h) - eval(-h)) / (2.0 * h)));
            }
            total += log_abs_det(jac);
        }
    }
    total
}

fn criterion_1() -> Outcome {
    let (mut worst_trip, mut worst_ld) = (0.0f64, 0.0f64);
    for case in 0..100u64 {
        let w = 1 + (case as usize % 5);
        let mut rng = rng_from_seed(500 + case);
        let mut draw = |c: usize| Array2::from_shape_fn((w, c), |_| normal(&mut rng));
        let (z, zd, cond) = (draw(4), draw(2), draw(8));

        let m32 = random_flow::<f32>(case);
        let (z32, zd32, c32) = (z.mapv(|v| v as f32), zd.mapv(|v| v as f32), cond.mapv(|v| v as f32));
        let (a, b, _) = forward(&m32, &z32, &zd32, &c32);
        let (zi, zdi) = inverse(&m32, &a, &b, &c32);
        worst_trip = worst_trip.max(max_abs(&zi, &z32)).max(max_abs(&zdi, &zd32));

        let m64 = random_flow::<f64>(case);
        let (_, _, analytic) = forward(&m64, &z, &zd, &cond);
        let numeric = numeric_logdet(&m64, &z, &zd, &cond, 1e-5);
        worst_ld = worst_ld.max((analytic - numeric).abs() / numeric.abs().max(1e-12));
    }
    gate(
        worst_trip < 1e-4 && worst_ld < 1e-3,
        format!("round-trip max error {worst_trip:.2e} (< 1e-4), log-det relative error {worst_ld:.2e} (< 1e-3)"),
    )
}

// ------------------------------------------------------- flow overfit

/// Stage I stand-in targets from the synthetic ground truth: standardised
/// pitch offset, log energy, log duration and previous-word pitch for Z;
/// log duration and previous-word log duration for Z^D.
fn truth_latents(synth: &SyntheticCorpus) -> HashMap<String, LatentRecord> {
    let raw: Vec<(Mat<f64>, Mat<f64>)> = synth
        .truth
        .iter()
        .map(|t| {
            let feat = |i: usize| [t[i].pitch_offset_st, t[i].energy_scale.ln(), t[i].duration_scale.ln()];
            let prev = |i: usize, k: usize| if i == 0 { 0.0 } else { feat(i - 1)[k] };
            let z = Array2::from_shape_fn((t.len(), 4), |(i, j)| if j < 3 { feat(i)[j] } else { prev(i, 0) });
            let zd = Array2::from_shape_fn((t.len(), 2), |(i, j)| if j == 0 { feat(i)[2] } else { prev(i, 2) });
            (z, zd)
        })
        .collect();
    let standardise = |pick: fn(&(Mat<f64>, Mat<f64>)) -> &Mat<f64>| {
        let views: Vec<_> = raw.iter().map(|r| pick(r).view()).collect();
        let all = ndarray::concatenate(Axis(0), &views).unwrap();
        let mean = all.mean_axis(Axis(0)).unwrap();
        let std = all.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-9));
        raw.iter().map(|r| (pick(r) - &mean) / &std).collect::<Vec<_>>()
    };
    let zs = standardise(|r| &r.0);
    let zds = standardise(|r| &r.1);
    synth
        .corpus
        .utterances
        .iter()
        .zip(zs.iter().zip(&zds))
        .map(|(u, (z, zd))| {
            let s = Array2::from_elem(z.dim(), 0.1);
            let sd = Array2::from_elem(zd.dim(), 0.1);
            (u.id.clone(), LatentRecord::new::<f64>(&u.id, z, &s, zd, &sd).unwrap())
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let identity = 0.5 * 6.0 * (2.0 * std::f64::consts::PI).ln();
    let spec = SyntheticCorpusSpec::default().with_documents(2, 40);
    let synth = generate_synthetic_corpus(&spec, 2).unwrap();
    let latents = truth_latents(&synth);
    let mut corpus = synth.corpus.clone();
    let docs = corpus.documents();
    let keep: Vec<usize> = docs.iter().take(8).flat_map(|(_, v)| v.clone()).collect();
    corpus.utterances = keep.iter().map(|&i| synth.corpus.utterances[i].clone()).collect();
    let held: HashSet<String> = corpus
        .documents()
        .iter()
        .flat_map(|(_, v)| v[v.len() - v.len() / 10..].iter().map(|&i| corpus.utterances[i].id.clone()).collect::<Vec<_>>())
        .collect();
    let (train, test): (HashMap<_, _>, HashMap<_, _>) = latents
        .into_iter()
        .filter(|(id, _)| corpus.utterances.iter().any(|u| &u.id == id))
        .partition(|(id, _)| !held.contains(id));
    let vocab = WordVocab::from_texts(corpus.utterances.iter().map(|u| u.text.as_str()));
    let cfg = ProsodyFlowConfig {
        speaker_dim: 16,
        ..ProsodyFlowConfig::new(corpus.speakers().len())
    };
    let train: Vec<FlowWindowItem<f32>> = window_items(&corpus, &train, &vocab, cfg.window).unwrap();
    let test: Vec<FlowWindowItem<f32>> = window_items(&corpus, &test, &vocab, cfg.window).unwrap();

    let mut rng = rng_from_seed(2);
    let m = ProsodyFlow::<f32>::new(cfg, vocab, &mut rng).unwrap();
    let fresh = {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let it = &test[0];
        let cond = m.conditions(&mut g, &p, &it.words, &it.window.offsets, it.speaker).unwrap();
        let z = g.constant(Array2::zeros((it.words.len(), 4)));
        let zd = g.constant(Array2::zeros((it.words.len(), 2)));
        let nll = m.nll(&mut g, &p, z, zd, cond).unwrap();
        g.scalar(nll).f64()
    };
    let mut opts = FlowTrainOptions::default();
    opts.adam.lr = 3e-4;
    let mut t = FlowTrainer::new(m, opts, rng);
    let refs: Vec<&FlowWindowItem<f32>> = train.iter().collect();
    let held: Vec<&FlowWindowItem<f32>> = test.iter().collect();
    for _ in 0..500 {
        let idx = t.pick(refs.len(), 8);
        let batch: Vec<_> = idx.iter().map(|&i| refs[i]).collect();
        if !t.train_step(&batch).unwrap().is_finite() {
            return Err("non-finite training NLL".into());
        }
    }
    let after = t.evaluate(&held).unwrap();
    gate(
        (fresh - identity).abs() < 1e-3 && (identity - 5.5135).abs() < 1e-3 && after < identity,
        format!("untrained NLL {fresh:.5} (target {identity:.5}), held-out NLL after 500 steps {after:.4} (< {identity:.4})"),
    )
}

// ------------------------------------------------------------------ KL

fn criterion_3() -> Outcome {
    let mut rng = rng_from_seed(3);
    let n = 100_000;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let dim = rng.random_range(1..5);
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2f64..3.0)).collect();
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|d| {
                        let e = normal(&mut rng);
                        let z = mu[d] + sigma[d] * e;
                        (-0.5 * e * e - sigma[d].ln()) + 0.5 * z * z
                    })
                    .sum()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        worst = worst.max((mean - kl_gaussian(&mu, &sigma).unwrap()).abs() / se);
    }
    gate(worst < 3.0, format!("largest deviation {worst:.2} standard errors over 50 cases (< 3)"))
}

// -------------------------------------------------------- Stage I pieces

fn tone_utterance(durations: Vec<usize>, word_map: Vec<usize>, speaker: &str, f0: f64) -> Utterance {
    let frames: usize = durations.iter().sum();
    let n_words = word_map.last().unwrap() + 1;
    Utterance {
        id: format!("{speaker}-{f0}"),
        waveform: (0..frames * 256)
            .map(|i| {
                let t = i as f64 / 24_000.0;
                ((std::f64::consts::TAU * f0 * t).sin() * 0.2 + (std::f64::consts::TAU * 2.0 * f0 * t).sin() * 0.05) as f32
            })
            .collect(),
        text: (0..n_words).map(|w| format!("w{w}")).collect::<Vec<_>>().join(" "),
        speaker: speaker.into(),
        phonemes: (0..durations.len()).map(|i| 1 + i % 5).collect(),
        durations,
        word_map,
        split: None,
        document: None,
        sentence: 0,
    }
}

fn tiny_trainer(seed: u64, chunk_frames: usize) -> (Stage1Trainer<f64>, Vec<Stage1Item<f64>>) {
    let corpus = Corpus::new(vec![
        tone_utterance(vec![3, 4, 5], vec![0, 0, 1], "a", 120.0),
        tone_utterance(vec![6, 6], vec![0, 1], "b", 180.0),
    ]);
    let mel = MelExtractor::new(MelConfig::default()).unwrap();
    let items: Vec<_> = corpus.utterances.iter().enumerate().map(|(i, u)| Stage1Item::new(u, i, &mel).unwrap()).collect();
    let mut rng = rng_from_seed(seed);
    let model = AcousticModel::new(AcousticConfig::tiny(8, 2), &mut rng).unwrap();
    let disc = Discriminators::new(DiscriminatorConfig::tiny(), &mut rng);
    let options = TrainOptions {
        chunk_samples: chunk_frames * 256,
        ..Default::default()
    };
    (Stage1Trainer::new(model, disc, options, mel, rng).unwrap(), items)
}

fn criterion_4() -> Outcome {
    let w = LossWeights::default();
    let mut rng = rng_from_seed(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let terms: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..10.0)).collect();
        let mut g = Graph::<f64>::new();
        let v: Vec<_> = terms.iter().map(|&t| g.constant(Array2::from_elem((1, 1), t))).collect();
        let total = total_g_loss(&mut g, &w, v[0], v[1], v[2], v[3]);
        let want = terms[0] + 4.0 * terms[1] + 45.0 * terms[2] + 1e-3 * terms[3];
        worst = worst.max((g.scalar(total) - want).abs() / (want.abs() * f64::EPSILON));
    }
    let (mut t, items) = tiny_trainer(4, 8);
    let refs: Vec<_> = items.iter().collect();
    for _ in 0..3 {
        let b = t.train_step(&refs).unwrap();
        let want = b.adv_g + 4.0 * b.feat + 45.0 * b.mel + 1e-3 * b.kl;
        worst = worst.max((b.total_g - want).abs() / (want.abs() * f64::EPSILON));
    }
    let d = DiscriminatorConfig::default();
    let k = d.periods.len() + d.resolutions.len();
    let mut g = Graph::<f64>::new();
    let real: Vec<_> = (0..k).map(|_| g.constant(Array2::ones((7, 1)))).collect();
    let fake: Vec<_> = (0..k).map(|_| g.constant(Array2::zeros((7, 1)))).collect();
    let adv_d = adv_d_loss(&mut g, &real, &fake);
    let adv_g = adv_g_loss(&mut g, &fake);
    let (adv_d, adv_g) = (g.scalar(adv_d), g.scalar(adv_g));
    gate(
        worst <= 4.0 && adv_d == 0.0 && adv_g == k as f64 && k == 8,
        format!("total_g residual {worst:.1} ulp (≤ 4), perfect discriminators adv_d {adv_d}, adv_g {adv_g} over {k}"),
    )
}

fn criterion_5() -> Outcome {
    let (mut t, items) = tiny_trainer(21, 12);
    let refs = vec![&items[1]];
    let batch = t.draw(&refs).unwrap();
    let mut g = Graph::new();
    let (loss, bound) = t.generator_objective(&mut g, true, &refs, &batch).unwrap();
    let mut grads = g.backward(loss.total);
    let analytic: Vec<Option<Mat<f64>>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    let candidates: Vec<(usize, (usize, usize))> = analytic
        .iter()
        .enumerate()
        .filter_map(|(k, a)| a.as_ref().map(|a| (k, a)))
        .flat_map(|(k, a)| a.indexed_iter().filter(|(_, v)| v.abs() > 1e-8).map(move |(i, _)| (k, i)).collect::<Vec<_>>())
        .collect();
    let ids: Vec<_> = t.model.params.ids().collect();
    let objective = |t: &Stage1Trainer<f64>| {
        let mut g = Graph::new();
        let (l, _) = t.generator_objective(&mut g, false, &refs, &batch).unwrap();
        (g.scalar(l.total), g.branch_pattern())
    };
    let (h, mut worst, mut checked) = (1e-3, 0.0f64, 0);
    let mut rng = rng_from_seed(5);
    while checked < 10 {
        let (k, idx) = candidates[rng.random_range(0..candidates.len())];
        let orig = t.model.params.get(ids[k])[idx];
        t.model.params.get_mut(ids[k])[idx] = orig + h;
        let (up, up_branches) = objective(&t);
        t.model.params.get_mut(ids[k])[idx] = orig - h;
        let (down, down_branches) = objective(&t);
        t.model.params.get_mut(ids[k])[idx] = orig;
        // A difference straddling a kink (L1, clamp, leaky ReLU) says nothing
        // about the derivative, so the draw is replaced.
        if up_branches != down_branches {
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[k].as_ref().unwrap()[idx];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
        checked += 1;
    }
    gate(worst < 1e-2, format!("largest relative error {worst:.2e} over 10 parameters (< 1e-2)"))
}

fn criterion_6() -> Outcome {
    let spec = SyntheticCorpusSpec::default().with_documents(1, 2);
    let synth = generate_synthetic_corpus(&spec, 1).unwrap();
    let speakers = synth.corpus.speakers();
    let mel = MelExtractor::<f32>::new(MelConfig::default()).unwrap();
    let items: Vec<Stage1Item<f32>> = synth
        .corpus
        .utterances
        .iter()
        .map(|u| Stage1Item::new(u, speakers.iter().position(|s| *s == u.speaker).unwrap(), &mel).unwrap())
        .collect();
    assert_eq!(items.len(), 8);
    let mut rng = rng_from_seed(6);
    let model = AcousticModel::new(AcousticConfig::tiny(spec.n_phonemes, speakers.len()), &mut rng).unwrap();
    let disc = Discriminators::new(DiscriminatorConfig::tiny(), &mut rng);
    let adam = AdamConfig {
        lr: 1e-3,
        ..Default::default()
    };
    let options = TrainOptions {
        generator: adam,
        discriminator: adam,
        ..Default::default()
    };
    let mut t = Stage1Trainer::new(model, disc, options, mel, rng).unwrap();
    let refs: Vec<&Stage1Item<f32>> = items.iter().collect();
    let start = Instant::now();
    let mut mels = Vec::with_capacity(2000);
    for step in 1..=2000 {
        let idx = t.pick(refs.len(), 4);
        let batch: Vec<_> = idx.iter().map(|&i| refs[i]).collect();
        let b = match t.train_step(&batch) {
            Ok(b) => b,
            Err(e) => return Err(format!("step {step}: {e}")),
        };
        if b.terms().iter().any(|(_, v)| !v.is_finite()) {
            return Err(format!("non-finite loss at step {step}"));
        }
        mels.push(b.mel);
    }
    let early = mels[..50].iter().sum::<f64>() / 50.0;
    let late = mels[1950..].iter().sum::<f64>() / 50.0;
    let secs = start.elapsed().as_secs_f64();
    gate(
        late <= 0.5 * early && secs <= 1800.0,
        format!("chunk mel-L1 moving average {early:.3} -> {late:.3} ({:.0}% of start, ≤ 50%) in {secs:.0} s", 100.0 * late / early),
    )
}

// -------------------------------------------------------------- duration

fn criterion_7() -> Outcome {
    let spec = SyntheticCorpusSpec::default().with_documents(1, 4);
    let synth = generate_synthetic_corpus(&spec, 7).unwrap();
    let speakers = synth.corpus.speakers();
    let items: Vec<DurationItem> = synth
        .corpus
        .utterances
        .iter()
        .take(8)
        .map(|u| DurationItem::new(u, speakers.iter().position(|s| *s == u.speaker).unwrap()))
        .collect();
    let config = DurationConfig {
        speaker_dim: 32,
        ..DurationConfig::new(spec.n_phonemes, speakers.len())
    };
    let mut rng = rng_from_seed(7);
    let model = DurationModel::<f32>::new(config, &mut rng).unwrap();
    let adam = AdamConfig {
        lr: 3e-3,
        beta1: 0.9,
        beta2: 0.999,
        ..AdamConfig::default()
    };
    let mut t = DurationTrainer::new(model, adam, rng);
    let refs: Vec<&DurationItem> = items.iter().collect();
    let losses: Vec<f64> = (0..400).map(|_| t.train_step(&refs).unwrap().total).collect();
    let means: Vec<f64> = losses.chunks_exact(100).map(|c| c.iter().sum::<f64>() / 100.0).collect();
    let (mut err, mut n) = (0.0, 0usize);
    for it in &items {
        let post = t.model.posterior(&it.durations, &it.word_map, it.speaker).unwrap();
        let pred = t.model.predict_durations(&it.phonemes, &it.word_map, it.speaker, &post.means).unwrap();
        err += pred.iter().zip(&it.durations).map(|(p, &d)| (p - d as f64).abs()).sum::<f64>();
        n += pred.len();
    }
    let mae = err / n as f64;
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    gate(
        mae < 1.0 && decreasing,
        format!(
            "MAE {mae:.3} frames/phoneme (< 1), 100-step loss means [{}]",
            means.iter().map(|m| format!("{m:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ------------------------------------------------------------- pipeline

fn smoke_config() -> RunConfig {
    RunConfig {
        seed: 10,
        scale: ModelScale::Tiny,
        speaker_dim: 8,
        documents_per_speaker: 1,
        sentences_per_document: 2,
        chunk_samples: 8 * 256,
        stage1_batch: 2,
        duration_batch: 2,
        flow_batch: 2,
        stage1_steps: 5,
        duration_steps: 5,
        flow_train_steps: 5,
        flow_steps: 2,
        flow_hidden: 8,
        context_dim: 8,
        context_layers: 1,
        context_ff: 16,
        cond_dim: 8,
        log_every: 1,
        ..RunConfig::default()
    }
}

fn run_pipeline(cfg: &RunConfig, run: &RunDir) -> prosody_core::Result<harness::EvalReport> {
    run.write_config(cfg)?;
    harness::prepare_data(cfg, run)?;
    harness::train_stage1(cfg, run, StageRun::default())?;
    harness::train_duration(cfg, run, StageRun::default())?;
    harness::export_latents(cfg, run)?;
    harness::train_stage2(cfg, run, StageRun::default())?;
    harness::evaluate(cfg, run)
}

fn criterion_9(root: &Path) -> Outcome {
    let run = RunDir::new(root.join("tts"));
    let cfg = smoke_config();
    run_pipeline(&cfg, &run).map_err(|e| e.to_string())?;
    let bundle = harness::load_bundle(&run, true).map_err(|e| e.to_string())?;
    let corpus = harness::load_corpus(&cfg, &run).map_err(|e| e.to_string())?;
    let (mut deterministic, mut lengths, mut seam, mut cases) = (true, true, true, 0);
    for (_, doc) in corpus.documents() {
        let sentences: Vec<SentenceInput> = doc.iter().map(|&i| SentenceInput::from(&corpus.utterances[i])).collect();
        for (k, &i) in doc.iter().enumerate() {
            for spk in &bundle.speakers {
                let a = infer_tts(&bundle, &sentences, k, spk, &mut rng_from_seed(1), 0.0).map_err(|e| e.to_string())?;
                let b = infer_tts(&bundle, &sentences, k, spk, &mut rng_from_seed(2), 0.0).map_err(|e| e.to_string())?;
                deterministic &= a == b && a.waveform.iter().zip(&b.waveform).all(|(x, y)| x.to_bits() == y.to_bits());
                lengths &= a.waveform.len() == 256 * a.durations.iter().sum::<usize>();
                cases += 1;
            }
            let src = &corpus.utterances[i];
            let fpt = infer_fpt(&bundle, src, &src.speaker, TransferOptions::default()).map_err(|e| e.to_string())?;
            let (z, zd) = encode_reference(&bundle, src).map_err(|e| e.to_string())?;
            let s = bundle.speaker_index(&src.speaker).map_err(|e| e.to_string())?;
            let oracle = synthesize_from_latents(&bundle, &src.phonemes, &src.word_map, s, &z, &zd, None).map_err(|e| e.to_string())?;
            seam &= fpt == oracle && fpt.waveform.iter().zip(&oracle.waveform).all(|(x, y)| x.to_bits() == y.to_bits());
            lengths &= fpt.waveform.len() == 256 * fpt.durations.iter().sum::<usize>();
        }
    }
    gate(
        deterministic && lengths && seam,
        format!("{cases} τ=0 syntheses: bit-identical reruns {deterministic}, length contract {lengths}, oracle seam equals self-transfer {seam}"),
    )
}

fn criterion_10(root: &Path) -> Outcome {
    let cfg = smoke_config();
    let digests = |name: &str| {
        let run = RunDir::new(root.join(name));
        let report = run_pipeline(&cfg, &run).map_err(|e| e.to_string())?;
        let digests = harness::artifact_digests(&run).map_err(|e| e.to_string())?;
        Ok::<_, String>((digests, serde_json::to_string(&report).unwrap()))
    };
    let (a, ra) = digests("first")?;
    let (b, rb) = digests("second")?;
    let checkpoints = a.keys().filter(|k| k.starts_with("checkpoints")).count();
    gate(
        a == b && ra == rb && checkpoints >= 3 && a.contains_key("report.json"),
        format!("{} artifact digests ({checkpoints} checkpoints) identical across reruns: {}", a.len(), a == b && ra == rb),
    )
}

// ---------------------------------------------------- transfer gates

fn fpt_config() -> RunConfig {
    RunConfig {
        seed: 8,
        scale: ModelScale::Reduced,
        stage1_lr: 1e-3,
        stage1_batch: 8,
        stage1_steps: 6000,
        duration_batch: 32,
        duration_steps: 3000,
        flow_batch: 16,
        flow_train_steps: 3000,
        checkpoint_every: 500,
        log_every: 50,
        ..RunConfig::default()
    }
}

/// Trains the full pipeline on four speakers with 200 utterances each. The
/// run directory persists under the cargo target directory, so an
/// interrupted run resumes from its last checkpoints.
fn criterion_8() -> Outcome {
    let cfg = fpt_config();
    let run = RunDir::new(Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-fpt"));
    let resume = StageRun { steps: None, resume: true };
    let start = Instant::now();
    let outcome = (|| {
        run.write_config(&cfg)?;
        let data = harness::prepare_data(&cfg, &run)?;
        eprintln!("  data: {data:?}");
        for (name, f) in [
            ("stage1", harness::train_stage1 as fn(&RunConfig, &RunDir, StageRun) -> _),
            ("duration", harness::train_duration),
        ] {
            let r = f(&cfg, &run, resume)?;
            eprintln!("  {name}: step {} after {:.0} s", r.step, start.elapsed().as_secs_f64());
        }
        harness::export_latents(&cfg, &run)?;
        let r = harness::train_stage2(&cfg, &run, resume)?;
        eprintln!("  stage2: step {} after {:.0} s", r.step, start.elapsed().as_secs_f64());
        harness::evaluate(&cfg, &run)
    })();
    let report = outcome.map_err(|e| e.to_string())?;
    let v = |m: &str| report.value(m).unwrap_or(f64::NAN);
    let (dur, f0, spk, leak, leak_chance) = (
        v("fpt_duration_pattern_r"),
        v("fpt_f0_pattern_r"),
        v("fpt_target_speaker_accuracy"),
        v("latent_leakage_accuracy"),
        v("latent_leakage_chance"),
    );
    let hours = start.elapsed().as_secs_f64() / 3600.0;
    gate(
        dur > 0.8 && f0 > 0.6 && spk >= 0.9 && leak <= leak_chance + 0.15,
        format!(
            "duration r {dur:.3} (> 0.8), F0 r {f0:.3} (> 0.6), target-speaker accuracy {spk:.3} (≥ 0.9), \
             leakage {leak:.3} (≤ {:.3}), {hours:.2} h",
            leak_chance + 0.15
        ),
    )
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let long_run = std::env::var("PROSODY_ACCEPTANCE_FPT").is_ok_and(|v| v == "1");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "flow invertibility and log-determinant", Box::new(criterion_1)),
        (2, "identity-initialised NLL and held-out overfit", Box::new(criterion_2)),
        (3, "Gaussian KL against Monte Carlo", Box::new(criterion_3)),
        (4, "generator loss algebra", Box::new(criterion_4)),
        (5, "generator gradient check", Box::new(criterion_5)),
        (6, "Stage I overfit smoke", Box::new(criterion_6)),
        (7, "duration overfit smoke", Box::new(criterion_7)),
        (8, "four-speaker transfer gates", Box::new(criterion_8)),
        (9, "TTS determinism, length and seam", Box::new({
            let root = root.clone();
            move || criterion_9(&root)
        })),
        (10, "pipeline determinism", Box::new(move || criterion_10(&root))),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if !selected.is_empty() && !selected.contains(n) {
            continue;
        }
        if *n == 8 && !long_run {
            println!("criterion {n:>2} NOT RUN {name}: set PROSODY_ACCEPTANCE_FPT=1 (several CPU hours)");
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
