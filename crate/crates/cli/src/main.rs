use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use prosody_core::harness::{self, RunConfig, RunDir, StageRun};
use prosody_core::inference::SynthesisRequest;
use serde_json::json;

/// Train and run the two-stage multispeaker prosody pipeline.
#[derive(Debug, Parser)]
#[command(name = "prosody", version)]
struct Cli {
    /// Run configuration (TOML). Defaults to the run directory's copy, then
    /// to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding data, checkpoints, latents, audio and logs.
    #[arg(long, global = true, default_value = "run")]
    run: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Training {
    /// Total steps, overriding the configured steps or epochs.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from the stage's latest checkpoint.
    #[arg(long)]
    resume: bool,
}

impl From<&Training> for StageRun {
    fn from(t: &Training) -> Self {
        StageRun {
            steps: t.steps,
            resume: t.resume,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or import the corpus and assign splits.
    PrepareData,
    /// Train the acoustic model against its discriminators.
    TrainStage1(Training),
    /// Train the duration model.
    TrainDuration(Training),
    /// Cache Stage I posteriors for every utterance.
    ExportLatents,
    /// Train the context flows on the cached latents.
    TrainStage2(Training),
    /// Synthesize one sentence of a document with sampled prosody.
    InferTts {
        #[arg(long)]
        document: String,
        #[arg(long)]
        sentence: usize,
        #[arg(long)]
        speaker: String,
        /// Sampling temperature; defaults to the configured value.
        #[arg(long)]
        tau: Option<f64>,
        /// Output WAV, relative to the run's audio directory.
        #[arg(long, default_value = "tts.wav")]
        output: PathBuf,
    },
    /// Render a recording's prosody in another speaker's voice.
    InferFpt {
        /// Utterance id of the source recording.
        #[arg(long)]
        source: String,
        #[arg(long)]
        speaker: String,
        /// Reuse the source durations instead of predicting them.
        #[arg(long)]
        copy_durations: bool,
        #[arg(long, default_value = "fpt.wav")]
        output: PathBuf,
    },
    /// Compute the objective metrics and write the report.
    Evaluate,
}

fn config(cli: &Cli, run: &RunDir) -> prosody_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None if run.config().exists() => RunConfig::load(&run.config())?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> anyhow::Result<serde_json::Value> {
    let run = RunDir::new(&cli.run);
    let cfg = config(cli, &run)?;
    run.write_config(&cfg).context("writing the run configuration")?;
    let out = match &cli.command {
        Command::PrepareData => serde_json::to_value(harness::prepare_data(&cfg, &run)?)?,
        Command::TrainStage1(t) => serde_json::to_value(harness::train_stage1(&cfg, &run, t.into())?)?,
        Command::TrainDuration(t) => serde_json::to_value(harness::train_duration(&cfg, &run, t.into())?)?,
        Command::ExportLatents => serde_json::to_value(harness::export_latents(&cfg, &run)?)?,
        Command::TrainStage2(t) => serde_json::to_value(harness::train_stage2(&cfg, &run, t.into())?)?,
        Command::InferTts {
            document,
            sentence,
            speaker,
            tau,
            output,
        } => synthesize(
            &cfg,
            &run,
            SynthesisRequest::Tts {
                document: document.clone(),
                sentence: *sentence,
                speaker: speaker.clone(),
                seed: cfg.seed,
                tau: tau.unwrap_or(cfg.tau),
                output: output.clone(),
            },
        )?,
        Command::InferFpt {
            source,
            speaker,
            copy_durations,
            output,
        } => synthesize(
            &cfg,
            &run,
            SynthesisRequest::Fpt {
                source: source.clone(),
                speaker: speaker.clone(),
                seed: cfg.seed,
                copy_durations: *copy_durations,
                output: output.clone(),
            },
        )?,
        Command::Evaluate => serde_json::to_value(harness::evaluate(&cfg, &run)?)?,
    };
    Ok(out)
}

fn synthesize(cfg: &RunConfig, run: &RunDir, req: SynthesisRequest) -> anyhow::Result<serde_json::Value> {
    let report = harness::synthesize(cfg, run, &[req])?;
    let r = &report.requests[0];
    if let Some(e) = &r.error {
        anyhow::bail!("{e}");
    }
    Ok(json!({
        "output": r.output,
        "samples": r.samples,
        "frames": r.durations.iter().sum::<usize>(),
        "z_norm": r.z_norm,
        "zd_norm": r.zd_norm,
    }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
