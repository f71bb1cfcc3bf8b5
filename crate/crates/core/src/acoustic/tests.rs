use ndarray::Array2;
use proptest::prelude::*;

use super::*;
use crate::corpus::{Corpus, Utterance};
use crate::dsp::{MelConfig, MelExtractor};
use crate::optim::AdamConfig;
use crate::rng::rng_from_seed;

fn model<T: Scalar>(cfg: AcousticConfig) -> AcousticModel<T> {
    AcousticModel::new(cfg, &mut rng_from_seed(1)).unwrap()
}

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

#[test]
fn encoder_shapes_and_sequence_awareness() {
    let m = model::<f64>(AcousticConfig::tiny(8, 2));
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let one = m.encode_phonemes(&mut g, &p, &[3]).unwrap();
    assert_eq!(g.shape(one), (1, 8));
    let a = m.encode_phonemes(&mut g, &p, &[1, 2, 3, 4, 5]).unwrap();
    let b = m.encode_phonemes(&mut g, &p, &[1, 2, 3, 4, 5]).unwrap();
    assert_eq!(g.value(a), g.value(b));
    let c = m.encode_phonemes(&mut g, &p, &[1, 4, 3, 2, 5]).unwrap();
    for moved in [1, 3] {
        assert_ne!(g.value(a).row(moved), g.value(c).row(moved));
    }
    assert!(m.encode_phonemes(&mut g, &p, &[99]).is_err());
}

#[test]
fn upsample_replicates_and_drops_zero_durations() {
    let mut g = Graph::<f64>::new();
    let enc = g.constant(Array2::from_shape_fn((3, 2), |(i, j)| (i * 10 + j) as f64));
    let up = upsample(&mut g, enc, &[2, 1, 3]).unwrap();
    assert_eq!(g.shape(up), (6, 2));
    assert_eq!(g.value(up).row(0), g.value(enc).row(0));
    assert_eq!(g.value(up).row(1), g.value(enc).row(0));
    let enc2 = g.constant(Array2::from_shape_fn((2, 2), |(i, _)| i as f64));
    let up = upsample(&mut g, enc2, &[0, 4]).unwrap();
    assert!(g.value(up).iter().all(|&v| v == 1.0));
    assert!(upsample(&mut g, enc2, &[1]).is_err());
}

proptest! {
    #[test]
    fn upsample_matches_brute_force(d in prop::collection::vec(0usize..=5, 1..=8)) {
        let mut g = Graph::<f64>::new();
        let enc = g.constant(Array2::from_shape_fn((d.len(), 3), |(i, j)| (i * 7 + j) as f64));
        let up = upsample(&mut g, enc, &d).unwrap();
        prop_assert_eq!(g.shape(up).0, d.iter().sum::<usize>());
        let mut t = 0;
        for (p, &dp) in d.iter().enumerate() {
            for _ in 0..dp {
                prop_assert_eq!(g.value(up).row(t), g.value(enc).row(p));
                t += 1;
            }
        }
    }
}

#[test]
fn reference_encoder_shape_and_initial_kl() {
    let m = model::<f64>(AcousticConfig::new(8, 2));
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let mel = g.constant(Array2::from_shape_fn((12, 80), |(i, j)| ((i * 3 + j) as f64 * 0.1).sin()));
    let align = crate::corpus::frame_alignment(&[4, 4, 4], &[0, 1, 2]).unwrap();
    let post = m.reference_encode(&mut g, &p, mel, &align, 1).unwrap();
    assert_eq!(g.shape(post.mean), (3, 4));
    let v = post.values(&g);
    assert!(v.stddevs.iter().all(|&s| s == 1.0));
    let mu: Vec<f64> = v.means.iter().copied().collect();
    let kl = kl_gaussian(&mu, &vec![1.0; mu.len()]).unwrap();
    let want: f64 = 0.5 * mu.iter().map(|m| m * m).sum::<f64>();
    assert!((kl - want).abs() < 1e-12);
    let empty = FrameToWordAlignment { word_spans: vec![] };
    assert!(m.reference_encode(&mut g, &p, mel, &empty, 0).is_err());
}

#[test]
fn pooling_only_posterior_is_local_to_its_word() {
    let mut cfg = AcousticConfig::new(8, 2);
    cfg.pooling_only = true;
    let m = model::<f64>(cfg);
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let base = Array2::from_shape_fn((12, 80), |(i, j)| ((i * 5 + j) as f64 * 0.07).cos());
    let mut doubled = base.clone();
    doubled.slice_mut(ndarray::s![4..8, ..]).mapv_inplace(|v| v * 2.0);
    let align = crate::corpus::frame_alignment(&[4, 4, 4], &[0, 1, 2]).unwrap();
    let a = g.constant(base);
    let b = g.constant(doubled);
    let pa = m.reference_encode(&mut g, &p, a, &align, 0).unwrap().values(&g);
    let pb = m.reference_encode(&mut g, &p, b, &align, 0).unwrap().values(&g);
    assert_eq!(pa.means.row(0), pb.means.row(0));
    assert_eq!(pa.means.row(2), pb.means.row(2));
    assert_ne!(pa.means.row(1), pb.means.row(1));
}

#[test]
fn latent_sampling_limits_and_moments() {
    let mut g = Graph::<f64>::new();
    let mean = g.constant(Array2::from_elem((2, 4), 0.7));
    let log_sigma = g.constant(Array2::from_elem((2, 4), -40.0));
    let z = sample_latents(&mut g, PosteriorVars { mean, log_sigma }, Some(&mut rng_from_seed(3)));
    assert!(g.value(z).iter().all(|&v| (v - 0.7).abs() < 1e-12));

    let ls = g.constant(Array2::from_elem((1, 1), 0.3f64.ln()));
    let m1 = g.constant(Array2::from_elem((1, 1), -1.2));
    let post = PosteriorVars { mean: m1, log_sigma: ls };
    let a = sample_latents(&mut g, post, Some(&mut rng_from_seed(9)));
    let b = sample_latents(&mut g, post, Some(&mut rng_from_seed(9)));
    assert_eq!(g.value(a), g.value(b));

    let mut rng = rng_from_seed(4);
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let z = sample_latents(&mut g, post, Some(&mut rng));
            g.scalar(z)
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se_mean = 0.3 / (n as f64).sqrt();
    let se_sd = 0.3 / (2.0 * (n as f64 - 1.0)).sqrt();
    assert!((mean + 1.2).abs() < 3.0 * se_mean, "{mean}");
    assert!((sd - 0.3).abs() < 3.0 * se_sd, "{sd}");
}

#[test]
fn decoder_shape_and_conditioning() {
    let m = model::<f64>(AcousticConfig::new(8, 2));
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let durations = [20, 25, 30];
    let inputs = DecodeInputs {
        phonemes: &[1, 2, 3],
        durations: &durations,
        word_map: &[0, 1, 1],
        speaker: 0,
    };
    let z0 = Array2::from_elem((2, 4), 0.1);
    let zv = g.constant(z0.clone());
    let b = m.decode(&mut g, &p, &inputs, zv).unwrap();
    assert_eq!(g.shape(b), (75, 80));
    let mut z1 = z0.clone();
    z1[[1, 2]] += 0.5;
    let zv1 = g.constant(z1);
    let b1 = m.decode(&mut g, &p, &inputs, zv1).unwrap();
    let diff: f64 = (g.value(b) - g.value(b1)).mapv(f64::abs).sum();
    assert!(diff > 0.0);
    let other = DecodeInputs { speaker: 1, ..inputs.clone() };
    let b2 = m.decode(&mut g, &p, &other, zv).unwrap();
    assert_ne!(g.value(b), g.value(b2));
    let wrong = g.constant(Array2::zeros((3, 4)));
    assert!(m.decode(&mut g, &p, &inputs, wrong).is_err());
}

#[test]
fn vocoder_length_init_and_sensitivity() {
    let m = model::<f32>(AcousticConfig::new(8, 2));
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let b = g.constant(Array2::from_shape_fn((75, 80), |(i, j)| ((i + 2 * j) as f32 * 0.05).sin()));
    let x = m.vocode(&mut g, &p, b).unwrap();
    assert_eq!(g.shape(x), (19_200, 1));
    let rms = (g.value(x).iter().map(|v| v * v).sum::<f32>() / 19_200.0).sqrt();
    assert!(rms < 0.05, "initial output rms {rms}");
    let b2 = g.scale(b, 2.0);
    let x2 = m.vocode(&mut g, &p, b2).unwrap();
    assert_ne!(g.value(x), g.value(x2));
}

#[test]
fn unknown_speaker_is_rejected() {
    let m = model::<f32>(AcousticConfig::tiny(8, 2));
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    assert!(matches!(
        m.speakers.lookup(&mut g, &p, 2, "test"),
        Err(Error::UnknownSpeaker(_))
    ));
}

fn tiny_trainer(seed: u64, lr: f64, chunk_frames: usize) -> (Stage1Trainer<f64>, Vec<Stage1Item<f64>>) {
    let corpus = Corpus::new(vec![
        tone_utterance(vec![3, 4, 5], vec![0, 0, 1], "a", 120.0),
        tone_utterance(vec![6, 6], vec![0, 1], "b", 180.0),
    ]);
    let mel = MelExtractor::new(MelConfig::default()).unwrap();
    let items: Vec<_> = corpus
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| Stage1Item::new(u, i, &mel).unwrap())
        .collect();
    let mut rng = rng_from_seed(seed);
    let model = AcousticModel::new(AcousticConfig::tiny(8, 2), &mut rng).unwrap();
    let disc = Discriminators::new(DiscriminatorConfig::tiny(), &mut rng);
    let adam = AdamConfig { lr, ..Default::default() };
    let options = TrainOptions {
        generator: adam,
        discriminator: adam,
        chunk_samples: chunk_frames * 256,
        ..Default::default()
    };
    (Stage1Trainer::new(model, disc, options, mel, rng).unwrap(), items)
}

#[test]
fn train_steps_are_deterministic() {
    let run = || {
        let (mut t, items) = tiny_trainer(5, 1e-3, 8);
        let refs: Vec<&Stage1Item<f64>> = items.iter().collect();
        (0..10).map(|_| t.train_step(&refs).unwrap().total_g).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let (mut t, items) = tiny_trainer(6, 0.0, 8);
    let before = t.model.params.clone();
    let before_d = t.disc.params.clone();
    let refs: Vec<&Stage1Item<f64>> = items.iter().collect();
    t.train_step(&refs).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(t.model.params.iter()) {
        assert_eq!(a, b);
    }
    for ((_, a), (_, b)) in before_d.iter().zip(t.disc.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn identical_real_and_fake_give_zero_feat_and_mel() {
    let (t, items) = tiny_trainer(7, 0.0, 8);
    let mut g = Graph::new();
    let pd = t.disc.params.bind(&mut g, false);
    let w: Vec<f64> = items[0].waveform[..2048].iter().map(|&v| v as f64).collect();
    let x = g.constant(Array2::from_shape_vec((2048, 1), w).unwrap());
    let y = g.constant(g.value(x).clone());
    let dr = t.disc.forward(&mut g, &pd, x, 2048).unwrap();
    let df = t.disc.forward(&mut g, &pd, y, 2048).unwrap();
    let fm = loss::feature_matching_loss(&mut g, &dr, &df);
    let mx = t.mel().graph_mel(&mut g, x);
    let my = t.mel().graph_mel(&mut g, y);
    let ml = loss::masked_mel_l1(&mut g, mx, my, 8);
    assert_eq!(g.scalar(fm), 0.0);
    assert_eq!(g.scalar(ml), 0.0);
}

#[test]
fn loss_total_is_the_weighted_sum() {
    let (mut t, items) = tiny_trainer(8, 1e-3, 8);
    let refs: Vec<&Stage1Item<f64>> = items.iter().collect();
    let b = t.train_step(&refs).unwrap();
    let w = LossWeights::default();
    let recomputed = b.adv_g + w.feat * b.feat + w.mel * b.mel + w.kl * b.kl;
    assert!((b.total_g - recomputed).abs() <= 1e-12 * b.total_g.abs().max(1.0));
    assert_eq!(b.total_d, b.adv_d);
    assert!(b.adv_g >= 0.0 && b.adv_d >= 0.0 && b.feat >= 0.0 && b.mel >= 0.0 && b.kl >= 0.0);
}

#[test]
fn padded_chunk_mel_matches_truncated_computation() {
    // Utterance of 12 frames inside a 16-frame chunk: the 4 padded frames
    // must not change the mel term.
    let (mut t, items) = tiny_trainer(9, 0.0, 16);
    let refs = vec![&items[1]];
    let batch = t.draw(&refs).unwrap();
    assert!(batch.chunks[0].is_padded());
    let mut g = Graph::new();
    let (padded, _) = t.generator_objective(&mut g, false, &refs, &batch).unwrap();

    let mut t12 = t.clone();
    t12.options.chunk_samples = 12 * 256;
    let mut exact = batch.clone();
    exact.chunks[0] = crate::corpus::ChunkSelection {
        frame_count: 12,
        sample_count: 12 * 256,
        ..exact.chunks[0]
    };
    let mut g2 = Graph::new();
    let (truncated, _) = t12.generator_objective(&mut g2, false, &refs, &exact).unwrap();
    let (a, b) = (g.scalar(padded.mel), g2.scalar(truncated.mel));
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn synthesize_length_is_hop_times_frames() {
    let m = model::<f32>(AcousticConfig::tiny(8, 2));
    let durations = [3, 5, 2];
    let inputs = DecodeInputs {
        phonemes: &[1, 2, 3],
        durations: &durations,
        word_map: &[0, 0, 1],
        speaker: 1,
    };
    let w = m.synthesize(&inputs, &Array2::zeros((2, 4))).unwrap();
    assert_eq!(w.len(), 10 * 256);
}

/// Central differences of the generator objective on a sampled set of
/// parameter entries, in double precision with fixed chunk and noise.
pub(crate) fn generator_gradient_check(seed: u64, n_params: usize, h: f64) -> Vec<(String, f64, f64)> {
    use rand::Rng;
    let (mut t, items) = tiny_trainer(seed, 0.0, 12);
    let refs = vec![&items[1]];
    let batch = t.draw(&refs).unwrap();
    let mut g = Graph::new();
    let (loss, bound) = t.generator_objective(&mut g, true, &refs, &batch).unwrap();
    let mut grads = g.backward(loss.total);
    let analytic: Vec<Option<Mat<f64>>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    let mut candidates = Vec::new();
    for (k, a) in analytic.iter().enumerate() {
        if let Some(a) = a {
            for (idx, &v) in a.indexed_iter() {
                if v.abs() > 1e-8 {
                    candidates.push((k, idx));
                }
            }
        }
    }
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let ids: Vec<_> = t.model.params.ids().collect();
    let objective = |t: &Stage1Trainer<f64>| {
        let mut g = Graph::new();
        let (l, _) = t.generator_objective(&mut g, false, &refs, &batch).unwrap();
        (g.scalar(l.total), g.branch_pattern())
    };
    let mut out = Vec::new();
    // Central differences are meaningless when ±h straddles a kink of an
    // L1, clamp or leaky ReLU, so such draws are replaced.
    while out.len() < n_params {
        let (k, idx) = candidates[rng.random_range(0..candidates.len())];
        let id = ids[k];
        let orig = t.model.params.get(id)[idx];
        t.model.params.get_mut(id)[idx] = orig + h;
        let (up, up_branches) = objective(&t);
        t.model.params.get_mut(id)[idx] = orig - h;
        let (down, down_branches) = objective(&t);
        t.model.params.get_mut(id)[idx] = orig;
        if up_branches != down_branches {
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[k].as_ref().unwrap()[idx];
        out.push((format!("{}{:?}", t.model.params.name(id), idx), a, numeric));
    }
    out
}

#[test]
fn generator_gradients_match_finite_differences() {
    for (name, a, n) in generator_gradient_check(21, 10, 1e-3) {
        let rel = (a - n).abs() / a.abs().max(n.abs());
        assert!(rel < 1e-2, "{name}: analytic {a}, numeric {n}, rel {rel}");
    }
}

