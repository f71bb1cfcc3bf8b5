use super::*;
use crate::corpus::{frame_alignment, generate_synthetic_corpus, SyntheticCorpusSpec};
use crate::rng::normal;
use proptest::prelude::*;

const SR: f64 = 24_000.0;

fn tone(f0: f64, frames: usize, amp: f32) -> Vec<f32> {
    (0..frames * 256)
        .map(|i| amp * (std::f64::consts::TAU * f0 * i as f64 / SR).sin() as f32)
        .collect()
}

fn spans(d: &[usize]) -> FrameToWordAlignment {
    frame_alignment(d, &(0..d.len()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn tone_word_has_its_frequency_and_silence_has_none() {
    let mut wave = tone(440.0, 30, 0.3);
    wave.extend(vec![0.0; 20 * 256]);
    let f = extract_prosody_features(&wave, &spans(&[30, 20]), &PitchTracker::default());
    let f0 = f.f0[0].unwrap();
    assert!((f0 - 440.0).abs() / 440.0 < 0.02, "{f0}");
    assert_eq!(f.f0[1], None);
    assert_eq!(f.durations, vec![30, 20]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tone_f0_within_two_percent(f0 in 80.0f64..400.0) {
        let f = extract_prosody_features(&tone(f0, 40, 0.2), &spans(&[40]), &PitchTracker::default());
        let got = f.f0[0].unwrap();
        prop_assert!((got - f0).abs() / f0 < 0.02, "{} -> {}", f0, got);
    }
}

#[test]
fn doubling_amplitude_adds_ln_four_to_log_energy() {
    let tr = PitchTracker::default();
    let a = extract_prosody_features(&tone(200.0, 12, 0.1), &spans(&[5, 7]), &tr);
    let b = extract_prosody_features(&tone(200.0, 12, 0.2), &spans(&[5, 7]), &tr);
    for (x, y) in a.log_energy.iter().zip(&b.log_energy) {
        assert!((y - x - 4f64.ln()).abs() < 1e-6, "{}", y - x);
    }
}

fn features(f0: Vec<Option<f64>>, e: Vec<f64>, d: Vec<usize>) -> ProsodyFeatures {
    ProsodyFeatures {
        f0,
        log_energy: e,
        durations: d,
    }
}

#[test]
fn similarity_of_identical_and_mirrored_features() {
    let a = features(vec![Some(100.0), Some(120.0), None, Some(90.0)], vec![1.0, 2.0, 0.5, 3.0], vec![3, 5, 4, 9]);
    let s = prosody_similarity(&a, &a).unwrap();
    assert_eq!((s.f0, s.energy, s.duration), (1.0, 1.0, 1.0));
    let b = features(
        vec![Some(-100.0), Some(-120.0), Some(7.0), Some(-90.0)],
        vec![-1.0, -2.0, -0.5, -3.0],
        vec![9, 7, 8, 3],
    );
    let s = prosody_similarity(&a, &b).unwrap();
    assert!((s.f0 + 1.0).abs() < 1e-12 && (s.energy + 1.0).abs() < 1e-12 && (s.duration + 1.0).abs() < 1e-12);
}

#[test]
fn similarity_errors() {
    let two = features(vec![Some(1.0), Some(2.0)], vec![1.0, 2.0], vec![1, 2]);
    assert!(matches!(prosody_similarity(&two, &two), Err(Error::InsufficientData(_))));
    let three = features(vec![Some(1.0), Some(2.0), Some(3.0)], vec![1.0, 2.0, 3.0], vec![1, 2, 3]);
    assert!(matches!(prosody_similarity(&three, &two), Err(Error::Shape(_))));
    let sparse = features(vec![Some(1.0), None, Some(3.0)], vec![1.0, 2.0, 3.0], vec![1, 2, 3]);
    assert!(matches!(prosody_similarity(&sparse, &three), Err(Error::InsufficientData(_))));
    let flat = features(vec![Some(1.0), Some(2.0), Some(3.0)], vec![1.0, 1.0, 1.0], vec![1, 2, 3]);
    assert!(matches!(prosody_similarity(&flat, &three), Err(Error::InsufficientData(_))));
}

#[test]
fn unrelated_prosody_is_weakly_correlated() {
    let spec = SyntheticCorpusSpec::default().with_documents(1, 6);
    let a = generate_synthetic_corpus(&spec, 1).unwrap();
    let b = generate_synthetic_corpus(&spec, 2).unwrap();
    let (mut fa, mut fb) = (
        features(vec![], vec![], vec![]),
        features(vec![], vec![], vec![]),
    );
    for (ta, tb) in a.truth.iter().zip(&b.truth) {
        for (x, y) in ta.iter().zip(tb) {
            fa.f0.push(Some(x.pitch_offset_st));
            fb.f0.push(Some(y.pitch_offset_st));
            fa.log_energy.push(x.energy_scale.ln());
            fb.log_energy.push(y.energy_scale.ln());
            fa.durations.push((x.duration_scale * 100.0) as usize);
            fb.durations.push((y.duration_scale * 100.0) as usize);
        }
    }
    assert!(fa.n_words() > 100);
    let s = prosody_similarity(&fa, &fb).unwrap();
    assert!(s.f0.abs() < 0.5 && s.energy.abs() < 0.5 && s.duration.abs() < 0.5, "{s:?}");
}

#[test]
fn pattern_similarity_ignores_sentence_level_offsets() {
    let a = features(vec![Some(100.0), Some(130.0), None, Some(90.0)], vec![1.0, 2.0, 0.5, 3.0], vec![3, 5, 4, 9]);
    // Same pattern an octave up, twice as loud and twice as slow.
    let b = features(
        vec![Some(200.0), Some(260.0), Some(150.0), Some(180.0)],
        a.log_energy.iter().map(|e| e + 4f64.ln()).collect(),
        a.durations.iter().map(|d| 2 * d).collect(),
    );
    let c = features(vec![Some(120.0), Some(110.0), Some(100.0)], vec![0.0, 1.0, 0.0], vec![2, 2, 6]);
    let s = pattern_similarity(&[(a.clone(), b), (c.clone(), c)]).unwrap();
    for r in [s.f0, s.energy, s.duration] {
        assert!((r - 1.0).abs() < 1e-12, "{s:?}");
    }
    let short = features(vec![Some(1.0)], vec![1.0], vec![1]);
    assert!(matches!(pattern_similarity(&[(a, short)]), Err(Error::Shape(_))));
}

#[test]
fn mel_l1_identities() {
    let a = Array2::from_shape_fn((6, 80), |(i, j)| (i * j) as f64 * 0.01);
    assert_eq!(mel_l1(&a, &a), 0.0);
    let b = &a + 1.0;
    assert!((mel_l1(&a, &b) - 1.0).abs() < 1e-12);
    let longer = ndarray::concatenate(Axis(0), &[b.view(), a.view()]).unwrap();
    assert!((mel_l1(&a, &longer) - 1.0).abs() < 1e-12);
}

/// Four speakers with 30 recordings each: 20 for training, 10 held out.
fn speaker_sets(seed: u64) -> (Vec<(Vec<f32>, usize)>, Vec<(Vec<f32>, usize)>) {
    let synth = generate_synthetic_corpus(&SyntheticCorpusSpec::default().with_documents(3, 10), seed).unwrap();
    let names = synth.corpus.speakers();
    let mut seen = vec![0; names.len()];
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for u in &synth.corpus.utterances {
        let s = names.iter().position(|n| *n == u.speaker).unwrap();
        seen[s] += 1;
        // Every third recording is held out, so each document's topic shift
        // shows up on both sides.
        if seen[s] % 3 != 0 {
            train.push((u.waveform.clone(), s));
        } else {
            eval.push((u.waveform.clone(), s));
        }
    }
    (train, eval)
}

fn refs(v: &[(Vec<f32>, usize)]) -> Vec<(&[f32], usize)> {
    v.iter().map(|(w, l)| (w.as_slice(), *l)).collect()
}

/// Accuracy bound `chance + 3σ` of a binomial over `n` draws.
fn chance_band(chance: f64, n: usize) -> f64 {
    chance + 3.0 * (chance * (1.0 - chance) / n as f64).sqrt()
}

#[test]
fn speaker_probe_separates_synthetic_voices_and_not_shuffled_labels() {
    let (train, eval) = speaker_sets(3);
    let f = SpeakerFeaturizer::default();
    let r = speaker_probe(&refs(&train), &refs(&eval), &f).unwrap();
    assert!(r.accuracy >= 0.95, "{r:?}");

    let mut labels: Vec<usize> = train.iter().map(|t| t.1).collect();
    labels.shuffle(&mut rng_from_seed(9));
    let shuffled: Vec<(&[f32], usize)> = train.iter().zip(&labels).map(|(t, &l)| (t.0.as_slice(), l)).collect();
    let r = speaker_probe(&shuffled, &refs(&eval), &f).unwrap();
    assert!(r.accuracy <= chance_band(0.25, r.n_eval), "{r:?}");
}

#[test]
fn probes_check_their_labels() {
    let x: Vec<Vec<f64>> = (0..60).map(|i| vec![i as f64]).collect();
    assert!(matches!(latent_leakage_probe(&x, &[0; 60], 1), Err(Error::InsufficientData(_))));
    let few: Vec<usize> = (0..30).map(|i| i % 2).collect();
    assert!(matches!(latent_leakage_probe(&x[..30], &few, 1), Err(Error::InsufficientData(_))));
    let mut skewed = vec![0; 60];
    skewed.extend(vec![1; 20]);
    let mut big = vec![0; 220];
    big.extend(vec![1; 21]);
    let xb: Vec<Vec<f64>> = (0..big.len()).map(|i| vec![i as f64]).collect();
    assert!(latent_leakage_probe(&xb[..80], &skewed, 1).is_ok());
    assert!(matches!(latent_leakage_probe(&xb, &big, 1), Err(Error::Validation { .. })));
}

#[test]
fn leakage_probe_controls() {
    let mut rng = rng_from_seed(4);
    let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
    let noise: Vec<Vec<f64>> = labels.iter().map(|_| (0..4).map(|_| normal(&mut rng)).collect()).collect();
    let r = latent_leakage_probe(&noise, &labels, 5).unwrap();
    assert!(r.accuracy <= chance_band(r.chance, r.n_eval), "{r:?}");
    let tagged: Vec<Vec<f64>> = noise
        .iter()
        .zip(&labels)
        .map(|(z, &l)| {
            let mut v = z.clone();
            v.extend((0..4).map(|k| f64::from(u8::from(k == l))));
            v
        })
        .collect();
    let r = latent_leakage_probe(&tagged, &labels, 5).unwrap();
    assert!(r.accuracy > 0.99, "{r:?}");
}

#[test]
fn stratified_split_keeps_class_shares() {
    let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 60)).collect();
    let (a, b) = stratified_split(&labels, 0.7, 3);
    assert_eq!(a.len() + b.len(), 100);
    assert_eq!(a.iter().filter(|&&i| labels[i] == 1).count(), 28);
    assert_eq!(stratified_split(&labels, 0.7, 3), (a, b));
}

#[test]
fn metric_record_is_one_json_line() {
    let r = MetricRecord {
        metric: "mel_l1".into(),
        value: 0.5,
        split: "test".into(),
        seed: 1,
        model_version: "v1".into(),
    };
    let line = serde_json::to_string(&r).unwrap();
    assert!(!line.contains('\n'));
    assert_eq!(serde_json::from_str::<MetricRecord>(&line).unwrap(), r);
}
