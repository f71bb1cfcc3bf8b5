use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = r#"
seed = 3
scale = "tiny"
speaker_dim = 8
documents_per_speaker = 1
sentences_per_document = 2
chunk_samples = 2048
stage1_batch = 2
duration_batch = 2
flow_batch = 2
stage1_steps = 4
duration_steps = 4
flow_train_steps = 4
flow_steps = 2
flow_hidden = 8
context_dim = 8
context_layers = 1
context_ff = 16
cond_dim = 8
log_every = 1
"#;

fn prosody(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prosody"))
        .arg("--run")
        .arg(run)
        .args(args)
        .output()
        .expect("the binary runs")
}

fn ok(run: &Path, args: &[&str]) -> serde_json::Value {
    let out = prosody(run, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn smoke_config(dir: &Path) -> String {
    let path = dir.join("smoke.toml");
    fs::write(&path, SMOKE).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(prosody(dir.path(), &["sing"]).status.code(), Some(2));
    assert_eq!(prosody(dir.path(), &["train-stage1", "--bogus"]).status.code(), Some(2));
    assert_eq!(prosody(dir.path(), &["train-stage1", "--steps", "many"]).status.code(), Some(2));
    assert_eq!(prosody(dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn config_violations_exit_with_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "chunk_samples = 1000\n").unwrap();
    let out = prosody(&dir.path().join("run"), &["prepare-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("chunk_samples"));
}

#[test]
fn stages_out_of_order_report_the_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let run = dir.path().join("run");
    ok(&run, &["prepare-data", "--config", &cfg]);
    for cmd in ["export-latents", "train-stage2", "evaluate"] {
        let out = prosody(&run, &[cmd]);
        assert_eq!(out.status.code(), Some(1), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"), "{cmd}");
    }
}

#[test]
fn repeated_stage1_runs_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let digest = |name: &str| {
        let run = dir.path().join(name);
        ok(&run, &["prepare-data", "--config", &cfg, "--seed", "7"]);
        let r = ok(&run, &["train-stage1", "--config", &cfg, "--steps", "10", "--seed", "7"]);
        assert_eq!(r["step"], 10);
        r["digest"].as_str().unwrap().to_owned()
    };
    assert_eq!(digest("a"), digest("b"));
}

#[test]
fn full_smoke_pipeline_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let run = dir.path().join("run");
    let data = ok(&run, &["prepare-data", "--config", &cfg]);
    assert_eq!(data["utterances"], 8);
    ok(&run, &["train-stage1"]);
    ok(&run, &["train-duration"]);
    ok(&run, &["export-latents"]);
    ok(&run, &["train-stage2"]);
    // Resuming past the end trains the extra steps only.
    let more = ok(&run, &["train-stage2", "--steps", "6", "--resume"]);
    assert_eq!(more["step"], 6);

    let manifest = fs::read_to_string(run.join("data/manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let (doc, id) = (first["document"].as_str().unwrap(), first["id"].as_str().unwrap());
    let tts = ok(&run, &["infer-tts", "--document", doc, "--sentence", "0", "--speaker", "spk1", "--tau", "0"]);
    assert_eq!(tts["samples"].as_u64().unwrap(), 256 * tts["frames"].as_u64().unwrap());
    assert!(run.join("audio/tts.wav").exists());
    let fpt = ok(&run, &["infer-fpt", "--source", id, "--speaker", "spk0", "--copy-durations", "--output", "x/fpt.wav"]);
    assert!(fpt["samples"].as_u64().unwrap() > 0);
    assert!(run.join("audio/x/fpt.wav").exists());
    let bad = prosody(&run, &["infer-fpt", "--source", id, "--speaker", "nobody"]);
    assert_eq!(bad.status.code(), Some(1));

    let report = ok(&run, &["evaluate"]);
    let names: Vec<&str> = report["records"].as_array().unwrap().iter().map(|r| r["metric"].as_str().unwrap()).collect();
    assert!(names.contains(&"mel_l1"), "{names:?}");
    assert!(run.join("report.json").exists() && run.join("metrics.jsonl").exists() && run.join("config.toml").exists());
}
