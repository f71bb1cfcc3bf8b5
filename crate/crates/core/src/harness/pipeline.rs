//! The stage commands: data preparation, the three trainers, latent export,
//! synthesis and evaluation, all reading and writing one run directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticModel, Discriminators, Stage1Item, Stage1Trainer};
use crate::corpus::{frame_alignment, generate_synthetic_corpus, load_manifest, write_manifest, Corpus, Split, Utterance};
use crate::dsp::{MelExtractor, PitchTracker};
use crate::duration::{DurationItem, DurationModel, DurationTrainer};
use crate::error::{Error, Result};
use crate::evalkit::{
    extract_prosody_features, latent_leakage_probe, mel_l1, pattern_similarity, speaker_probe, MetricRecord, SpeakerFeaturizer,
};
use crate::inference::{
    batch_synthesize, infer_fpt, reference_posteriors, BatchReport, ModelBundle, ModelVersions, SynthesisRequest, TransferOptions,
};
use crate::prosody_flow::{window_items, FlowTrainer, FlowWindowItem, LatentRecord, ProsodyFlow, WordVocab};
use crate::rng::{derived_rng, StdRng};

use super::checkpoint::{file_digest, Checkpoint};
use super::config::{stage_steps, RunConfig};
use super::log::{rng_digest, ExperimentLog, LogEntry};
use super::state::{
    acoustic_from_checkpoint, duration_checkpoint, duration_from_checkpoint, flow_checkpoint, flow_from_checkpoint,
    restore_duration, restore_flow, restore_stage1, stage1_checkpoint, DURATION, STAGE1, STAGE2,
};

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.jsonl")
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.ckpt"))
    }

    pub fn numbered_checkpoint(&self, stage: &str, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}-{step:08}.ckpt"))
    }

    pub fn latents(&self) -> PathBuf {
        self.root.join("latents").join("latents.jsonl")
    }

    pub fn latents_meta(&self) -> PathBuf {
        self.root.join("latents").join("meta.json")
    }

    pub fn audio_dir(&self) -> PathBuf {
        self.root.join("audio")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.root.join("checkpoints"), self.root.join("latents"), self.audio_dir()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    /// Records the configuration a command ran with.
    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        self.create()?;
        let path = self.config();
        fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::io(&path, e))
    }

    fn require_checkpoint(&self, stage: &str) -> Result<PathBuf> {
        let path = self.checkpoint(stage);
        if !path.exists() {
            return Err(Error::Missing(format!("checkpoint {} (train {stage} first)", path.display())));
        }
        Ok(path)
    }
}

/// How far to train and whether to continue from the stage's checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageRun {
    /// Total steps; the config decides when `None`.
    pub steps: Option<u64>,
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub step: u64,
    pub checkpoint: PathBuf,
    pub digest: String,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSummary {
    pub utterances: usize,
    pub speakers: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub manifest: PathBuf,
}

/// Generates the synthetic corpus (or reads the configured manifest),
/// assigns splits and writes the run's copy of the data.
pub fn prepare_data(cfg: &RunConfig, run: &RunDir) -> Result<DataSummary> {
    let mut corpus = match &cfg.manifest {
        Some(path) => load_manifest(path, cfg.sample_rate, cfg.hop)?,
        None => generate_synthetic_corpus(&cfg.corpus_spec(), cfg.seed)?.corpus,
    };
    if corpus.is_empty() {
        return Err(Error::InsufficientData("the corpus has no utterances".into()));
    }
    if cfg.assign_splits {
        corpus.assign_splits(cfg.seed);
    }
    run.create()?;
    let manifest = write_manifest(&corpus, &run.data_dir(), cfg.sample_rate)?;
    let count = |s| corpus.in_split(s).count();
    Ok(DataSummary {
        utterances: corpus.len(),
        speakers: corpus.speakers().len(),
        train: count(Split::Train),
        valid: count(Split::Valid),
        test: count(Split::Test),
        manifest,
    })
}

pub fn load_corpus(cfg: &RunConfig, run: &RunDir) -> Result<Corpus> {
    let path = run.manifest();
    if !path.exists() {
        return Err(Error::Missing(format!("prepared data {} (run prepare-data first)", path.display())));
    }
    load_manifest(&path, cfg.sample_rate, cfg.hop)
}

/// The training split, or every utterance when none is labelled.
pub fn training_utterances(corpus: &Corpus) -> Vec<&Utterance> {
    if corpus.utterances.iter().any(|u| u.split.is_some()) {
        corpus.in_split(Split::Train).collect()
    } else {
        corpus.utterances.iter().collect()
    }
}

/// The test split, or every utterance when none is labelled.
pub fn evaluation_utterances(corpus: &Corpus) -> Vec<&Utterance> {
    if corpus.utterances.iter().any(|u| u.split.is_some()) {
        corpus.in_split(Split::Test).collect()
    } else {
        corpus.utterances.iter().collect()
    }
}

fn n_phonemes(corpus: &Corpus) -> usize {
    corpus.utterances.iter().flat_map(|u| u.phonemes.iter()).max().map_or(0, |&p| p + 1)
}

fn speaker_of(speakers: &[String], u: &Utterance) -> Result<usize> {
    speakers
        .iter()
        .position(|s| *s == u.speaker)
        .ok_or_else(|| Error::UnknownSpeaker(u.speaker.clone()))
}

fn check_speakers(ck: &Checkpoint, speakers: &[String]) -> Result<()> {
    let stored: Vec<String> = ck.meta("speakers")?;
    if stored != speakers {
        return Err(Error::validation(
            "speakers",
            format!("the {} checkpoint was trained on {stored:?}, the corpus has {speakers:?}", ck.kind),
        ));
    }
    Ok(())
}

/// A trainer the shared loop can drive.
trait StageTrainer {
    fn step(&self) -> u64;
    fn advance(&mut self) -> Result<BTreeMap<String, f64>>;
    fn rng(&self) -> &StdRng;
    fn checkpoint(&self) -> Result<Checkpoint>;
}

struct Stage1Run<'a> {
    trainer: Stage1Trainer<f32>,
    items: &'a [Stage1Item<f32>],
    batch: usize,
    speakers: &'a [String],
}

impl StageTrainer for Stage1Run<'_> {
    fn step(&self) -> u64 {
        self.trainer.step
    }

    fn advance(&mut self) -> Result<BTreeMap<String, f64>> {
        let idx = self.trainer.pick(self.items.len(), self.batch);
        let refs: Vec<&Stage1Item<f32>> = idx.iter().map(|&i| &self.items[i]).collect();
        let b = self.trainer.train_step(&refs)?;
        Ok(b.terms().iter().map(|&(k, v)| (k.to_owned(), v)).collect())
    }

    fn rng(&self) -> &StdRng {
        &self.trainer.rng
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        stage1_checkpoint(&self.trainer, self.speakers)
    }
}

struct DurationRun<'a> {
    trainer: DurationTrainer<f32>,
    items: &'a [DurationItem],
    batch: usize,
    speakers: &'a [String],
}

impl StageTrainer for DurationRun<'_> {
    fn step(&self) -> u64 {
        self.trainer.step
    }

    fn advance(&mut self) -> Result<BTreeMap<String, f64>> {
        let idx = self.trainer.pick(self.items.len(), self.batch);
        let refs: Vec<&DurationItem> = idx.iter().map(|&i| &self.items[i]).collect();
        let b = self.trainer.train_step(&refs)?;
        Ok(BTreeMap::from([("nll".into(), b.nll), ("kl".into(), b.kl), ("total".into(), b.total)]))
    }

    fn rng(&self) -> &StdRng {
        &self.trainer.rng
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        duration_checkpoint(&self.trainer, self.speakers)
    }
}

struct FlowRun<'a> {
    trainer: FlowTrainer<f32>,
    items: &'a [FlowWindowItem<f32>],
    batch: usize,
    speakers: &'a [String],
}

impl StageTrainer for FlowRun<'_> {
    fn step(&self) -> u64 {
        self.trainer.step
    }

    fn advance(&mut self) -> Result<BTreeMap<String, f64>> {
        let idx = self.trainer.pick(self.items.len(), self.batch);
        let refs: Vec<&FlowWindowItem<f32>> = idx.iter().map(|&i| &self.items[i]).collect();
        let nll = self.trainer.train_step(&refs)?;
        Ok(BTreeMap::from([("nll".into(), nll)]))
    }

    fn rng(&self) -> &StdRng {
        &self.trainer.rng
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        flow_checkpoint(&self.trainer, self.speakers)
    }
}

/// Steps `t` to `total`, logging and checkpointing along the way. Steps the
/// log already holds (after a resume) are not logged twice.
fn drive(cfg: &RunConfig, run: &RunDir, stage: &str, t: &mut dyn StageTrainer, total: u64) -> Result<StageReport> {
    let mut log = ExperimentLog::open(&run.log())?;
    let start = Instant::now();
    let mut losses = BTreeMap::new();
    while t.step() < total {
        losses = t.advance()?;
        let step = t.step();
        if (step % cfg.log_every == 0 || step == total) && log.last_step(stage).is_none_or(|l| step > l) {
            log.append(&LogEntry {
                stage: stage.into(),
                step,
                wall_time: start.elapsed().as_secs_f64(),
                losses: losses.clone(),
                metrics: BTreeMap::new(),
                rng_digest: rng_digest(t.rng()),
            })?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            t.checkpoint()?.save(&run.numbered_checkpoint(stage, step))?;
        }
    }
    let path = run.checkpoint(stage);
    t.checkpoint()?.save(&path)?;
    Ok(StageReport {
        stage: stage.into(),
        step: t.step(),
        digest: file_digest(&path)?,
        checkpoint: path,
        losses,
    })
}

fn resume_from(run: &RunDir, stage: &str, opts: StageRun) -> Result<Option<Checkpoint>> {
    let path = run.checkpoint(stage);
    if opts.resume && path.exists() {
        Ok(Some(Checkpoint::load(&path, stage)?))
    } else {
        Ok(None)
    }
}

pub fn train_stage1(cfg: &RunConfig, run: &RunDir, opts: StageRun) -> Result<StageReport> {
    let corpus = load_corpus(cfg, run)?;
    let speakers = corpus.speakers();
    let mel = MelExtractor::<f32>::new(cfg.mel())?;
    let items = training_utterances(&corpus)
        .into_iter()
        .map(|u| Stage1Item::new(u, speaker_of(&speakers, u)?, &mel))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::InsufficientData("no training utterances".into()));
    }
    let trainer = match resume_from(run, STAGE1, opts)? {
        Some(ck) => {
            check_speakers(&ck, &speakers)?;
            restore_stage1(&ck)?
        }
        None => {
            let mut init = derived_rng(cfg.seed, "stage1.init");
            let model = AcousticModel::new(cfg.acoustic(n_phonemes(&corpus), speakers.len()), &mut init)?;
            let disc = Discriminators::new(cfg.discriminators(), &mut init);
            Stage1Trainer::new(model, disc, cfg.stage1_options(), mel, derived_rng(cfg.seed, "stage1.train"))?
        }
    };
    let total = opts
        .steps
        .unwrap_or_else(|| stage_steps(cfg.stage1_steps, cfg.stage1_epochs, items.len(), cfg.stage1_batch));
    let mut r = Stage1Run {
        trainer,
        batch: cfg.stage1_batch.min(items.len()),
        items: &items,
        speakers: &speakers,
    };
    drive(cfg, run, STAGE1, &mut r, total)
}

pub fn train_duration(cfg: &RunConfig, run: &RunDir, opts: StageRun) -> Result<StageReport> {
    let corpus = load_corpus(cfg, run)?;
    let speakers = corpus.speakers();
    let items = training_utterances(&corpus)
        .into_iter()
        .map(|u| Ok(DurationItem::new(u, speaker_of(&speakers, u)?)))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::InsufficientData("no training utterances".into()));
    }
    let trainer = match resume_from(run, DURATION, opts)? {
        Some(ck) => {
            check_speakers(&ck, &speakers)?;
            restore_duration(&ck)?
        }
        None => {
            let mut init = derived_rng(cfg.seed, "duration.init");
            let model = DurationModel::new(cfg.duration(n_phonemes(&corpus), speakers.len()), &mut init)?;
            DurationTrainer::new(model, cfg.duration_adam(), derived_rng(cfg.seed, "duration.train"))
        }
    };
    let total = opts
        .steps
        .unwrap_or_else(|| stage_steps(cfg.duration_steps, cfg.duration_epochs, items.len(), cfg.duration_batch));
    let mut r = DurationRun {
        trainer,
        batch: cfg.duration_batch.min(items.len()),
        items: &items,
        speakers: &speakers,
    };
    drive(cfg, run, DURATION, &mut r, total)
}

/// Which checkpoints a latent cache was computed from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentCacheMeta {
    pub model_version: u32,
    pub stage1_digest: String,
    pub duration_digest: String,
    pub records: usize,
}

/// Acoustic and duration models from their checkpoints, with the flow when
/// `with_flow`.
pub fn load_bundle(run: &RunDir, with_flow: bool) -> Result<ModelBundle<f32>> {
    let a = Checkpoint::load(&run.require_checkpoint(STAGE1)?, STAGE1)?;
    let d = Checkpoint::load(&run.require_checkpoint(DURATION)?, DURATION)?;
    let speakers: Vec<String> = a.meta("speakers")?;
    check_speakers(&d, &speakers)?;
    let flow = if with_flow {
        let f = Checkpoint::load(&run.require_checkpoint(STAGE2)?, STAGE2)?;
        check_speakers(&f, &speakers)?;
        Some(f)
    } else {
        None
    };
    let versions = ModelVersions {
        acoustic: a.model_version,
        duration: d.model_version,
        flow: flow.as_ref().map(|f| f.model_version),
    };
    ModelBundle::new(
        acoustic_from_checkpoint(&a)?,
        duration_from_checkpoint(&d)?,
        flow.as_ref().map(flow_from_checkpoint).transpose()?,
        a.meta("mel")?,
        speakers,
        versions,
    )
}

/// Posterior means and deviations of every utterance under the trained
/// Stage I models.
pub fn export_latents(cfg: &RunConfig, run: &RunDir) -> Result<LatentCacheMeta> {
    let bundle = load_bundle(run, false)?;
    let corpus = load_corpus(cfg, run)?;
    let mut lines = String::new();
    for u in &corpus.utterances {
        let (z, zd) = reference_posteriors(&bundle, u)?;
        let rec = LatentRecord::new(&u.id, &z.means, &z.stddevs, &zd.means, &zd.stddevs)?;
        rec.validate()?;
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    let meta = LatentCacheMeta {
        model_version: bundle.versions.acoustic,
        stage1_digest: file_digest(&run.checkpoint(STAGE1))?,
        duration_digest: file_digest(&run.checkpoint(DURATION))?,
        records: corpus.len(),
    };
    run.create()?;
    let path = run.latents();
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    let mpath = run.latents_meta();
    fs::write(&mpath, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(meta)
}

/// The cached latents, refused when the Stage I checkpoints changed since
/// the export.
pub fn read_latents(run: &RunDir) -> Result<HashMap<String, LatentRecord>> {
    let (path, mpath) = (run.latents(), run.latents_meta());
    if !path.exists() || !mpath.exists() {
        return Err(Error::Missing(format!("latent cache {} (run export-latents first)", path.display())));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: LatentCacheMeta = serde_json::from_str(&text)?;
    let current = (file_digest(&run.checkpoint(STAGE1))?, file_digest(&run.checkpoint(DURATION))?);
    if current != (meta.stage1_digest.clone(), meta.duration_digest.clone()) {
        return Err(Error::validation("latents", "the cache predates the current Stage I checkpoints; rerun export-latents"));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: LatentRecord = serde_json::from_str(line).map_err(|e| Error::Record {
            index: i,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Record {
            index: i,
            message: e.to_string(),
        })?;
        out.insert(rec.id.clone(), rec);
    }
    Ok(out)
}

fn subset(latents: &HashMap<String, LatentRecord>, utts: &[&Utterance]) -> HashMap<String, LatentRecord> {
    utts.iter().filter_map(|u| latents.get(&u.id).map(|r| (u.id.clone(), r.clone()))).collect()
}

pub fn train_stage2(cfg: &RunConfig, run: &RunDir, opts: StageRun) -> Result<StageReport> {
    run.require_checkpoint(STAGE1)?;
    run.require_checkpoint(DURATION)?;
    let latents = read_latents(run)?;
    let corpus = load_corpus(cfg, run)?;
    let speakers = corpus.speakers();
    let train = training_utterances(&corpus);
    let targets = subset(&latents, &train);
    let trainer = match resume_from(run, STAGE2, opts)? {
        Some(ck) => {
            check_speakers(&ck, &speakers)?;
            restore_flow(&ck)?
        }
        None => {
            let vocab = WordVocab::from_texts(train.iter().map(|u| u.text.as_str()));
            let model = ProsodyFlow::new(cfg.flow(speakers.len()), vocab, &mut derived_rng(cfg.seed, "stage2.init"))?;
            FlowTrainer::new(model, cfg.flow_options(), derived_rng(cfg.seed, "stage2.train"))
        }
    };
    let items = window_items::<f32>(&corpus, &targets, &trainer.model.vocab, trainer.model.config.window)?;
    if items.is_empty() {
        return Err(Error::InsufficientData("no context window has training targets".into()));
    }
    let total = opts
        .steps
        .unwrap_or_else(|| stage_steps(cfg.flow_train_steps, cfg.flow_epochs, items.len(), cfg.flow_batch));
    let mut r = FlowRun {
        trainer,
        batch: cfg.flow_batch.min(items.len()),
        items: &items,
        speakers: &speakers,
    };
    drive(cfg, run, STAGE2, &mut r, total)
}

/// Runs synthesis requests against the run's models, writing audio under
/// the run's `audio/` directory.
pub fn synthesize(cfg: &RunConfig, run: &RunDir, requests: &[SynthesisRequest]) -> Result<BatchReport> {
    let needs_flow = requests.iter().any(|r| matches!(r, SynthesisRequest::Tts { .. }));
    let bundle = load_bundle(run, needs_flow)?;
    let corpus = load_corpus(cfg, run)?;
    run.create()?;
    Ok(batch_synthesize(&bundle, &corpus, requests, &run.audio_dir()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<MetricRecord>,
    /// Metrics that could not be computed, with the reason.
    pub skipped: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn value(&self, metric: &str) -> Option<f64> {
        self.records.iter().find(|r| r.metric == metric).map(|r| r.value)
    }
}

/// Objective metrics on the evaluation utterances: resynthesis mel L1,
/// prosody-pattern correlations and speaker-probe accuracy of transfers to
/// the next speaker, latent speaker leakage, and held-out flow NLL when a
/// Stage II checkpoint exists.
pub fn evaluate(cfg: &RunConfig, run: &RunDir) -> Result<EvalReport> {
    let has_flow = run.checkpoint(STAGE2).exists();
    let bundle = load_bundle(run, has_flow)?;
    let corpus = load_corpus(cfg, run)?;
    let eval = evaluation_utterances(&corpus);
    if eval.is_empty() {
        return Err(Error::InsufficientData("no evaluation utterances".into()));
    }
    let split = if corpus.utterances.iter().any(|u| u.split.is_some()) { "test" } else { "all" };
    let version = file_digest(&run.checkpoint(STAGE1))?[..12].to_owned();
    let mut report = EvalReport::default();
    let mut record = |metric: &str, value: f64| {
        report.records.push(MetricRecord {
            metric: metric.into(),
            value,
            split: split.into(),
            seed: cfg.seed,
            model_version: version.clone(),
        })
    };

    let mel = MelExtractor::<f32>::new(bundle.mel.clone())?;
    let tracker = PitchTracker {
        sample_rate: cfg.sample_rate,
        hop: cfg.hop,
        ..PitchTracker::default()
    };
    let n = bundle.speakers.len();
    let mut mel_err = 0.0;
    let mut pairs = Vec::new();
    let mut outputs = Vec::new();
    for u in &eval {
        let s = bundle.speaker_index(&u.speaker)?;
        let copy = TransferOptions { copy_durations: true };
        let resynth = infer_fpt(&bundle, u, &u.speaker, copy)?;
        let frames = u.aligned_frames(cfg.hop);
        let real = mel.extract(&u.waveform)?.frames;
        let fake = mel.extract(&resynth.waveform)?.frames;
        mel_err += mel_l1(&real.slice(ndarray::s![..frames, ..]).to_owned(), &fake);

        let target = (s + 1) % n;
        let out = infer_fpt(&bundle, u, &bundle.speakers[target], TransferOptions::default())?;
        let src = extract_prosody_features(&u.waveform, &u.alignment(frames)?, &tracker);
        let got = extract_prosody_features(&out.waveform, &frame_alignment(&out.durations, &u.word_map)?, &tracker);
        pairs.push((src, got));
        outputs.push((out.waveform, target));
    }
    record("mel_l1", mel_err / eval.len() as f64);
    match pattern_similarity(&pairs) {
        Ok(sim) => {
            record("fpt_f0_pattern_r", sim.f0);
            record("fpt_energy_pattern_r", sim.energy);
            record("fpt_duration_pattern_r", sim.duration);
        }
        Err(e) => {
            report.skipped.insert("fpt_pattern_r".into(), e.to_string());
        }
    }

    let featurizer = SpeakerFeaturizer {
        sample_rate: cfg.sample_rate,
        ..SpeakerFeaturizer::default()
    };
    let train = training_utterances(&corpus);
    let probe_train = train
        .iter()
        .map(|u| Ok((u.waveform.as_slice(), bundle.speaker_index(&u.speaker)?)))
        .collect::<Result<Vec<_>>>()?;
    let probe_eval: Vec<(&[f32], usize)> = outputs.iter().map(|(w, t)| (w.as_slice(), *t)).collect();
    match speaker_probe(&probe_train, &probe_eval, &featurizer) {
        Ok(r) => {
            record("fpt_target_speaker_accuracy", r.accuracy);
            record("fpt_target_speaker_chance", r.chance);
        }
        Err(e) => {
            report.skipped.insert("fpt_target_speaker_accuracy".into(), e.to_string());
        }
    }

    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    for u in &corpus.utterances {
        let (z, zd) = reference_posteriors(&bundle, u)?;
        let s = bundle.speaker_index(&u.speaker)?;
        for (a, b) in z.means.rows().into_iter().zip(zd.means.rows()) {
            rows.push(a.iter().chain(b.iter()).map(|&v| f64::from(v)).collect::<Vec<_>>());
            labels.push(s);
        }
    }
    match latent_leakage_probe(&rows, &labels, cfg.seed) {
        Ok(r) => {
            record("latent_leakage_accuracy", r.accuracy);
            record("latent_leakage_chance", r.chance);
        }
        Err(e) => {
            report.skipped.insert("latent_leakage_accuracy".into(), e.to_string());
        }
    }

    if let Some(flow) = &bundle.flow {
        let held: Vec<&Utterance> = eval.clone();
        let outcome = read_latents(run).and_then(|latents| {
            let items = window_items::<f32>(&corpus, &subset(&latents, &held), &flow.vocab, flow.config.window)?;
            if items.is_empty() {
                return Err(Error::InsufficientData("no window has evaluation targets".into()));
            }
            let t = FlowTrainer::new(flow.clone(), cfg.flow_options(), derived_rng(cfg.seed, "evaluate"));
            t.evaluate(&items.iter().collect::<Vec<_>>())
        });
        match outcome {
            Ok(nll) => record("flow_nll", nll),
            Err(e) => {
                report.skipped.insert("flow_nll".into(), e.to_string());
            }
        }
    }

    let path = run.report();
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    let mut log = ExperimentLog::open(&run.log())?;
    let step = log.last_step("evaluate").map_or(1, |s| s + 1);
    log.append(&LogEntry {
        stage: "evaluate".into(),
        step,
        wall_time: 0.0,
        losses: BTreeMap::new(),
        metrics: report.records.iter().map(|r| (r.metric.clone(), r.value)).collect(),
        rng_digest: String::new(),
    })?;
    Ok(report)
}

/// Digest of every checkpoint, the latent cache and the metrics report
/// present in `run`, keyed by path relative to the run root.
pub fn artifact_digests(run: &RunDir) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut paths: Vec<PathBuf> = Vec::new();
    let ckdir = run.root.join("checkpoints");
    if ckdir.exists() {
        for e in fs::read_dir(&ckdir).map_err(|e| Error::io(&ckdir, e))? {
            paths.push(e.map_err(|e| Error::io(&ckdir, e))?.path());
        }
    }
    paths.extend([run.latents(), run.report(), run.manifest()]);
    for p in paths.into_iter().filter(|p| p.is_file()) {
        let rel = p.strip_prefix(&run.root).unwrap_or(&p).to_string_lossy().into_owned();
        out.insert(rel, file_digest(&p)?);
    }
    Ok(out)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
