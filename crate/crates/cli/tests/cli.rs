use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use newsclf::experiments::{BackendSpec, CheckpointSource, Experiment, ExperimentManifest, FitSetup, SyntheticConfig};
use newsclf::inference::PredictionSet;
use newsclf::model::ModelConfig;
use newsclf::corpus::Subtask;
use newsclf::train::TrainConfig;

const TINY_MODEL: &str = r#"{"vocab_size":400,"d_model":16,"n_layers":1,"n_heads":2,"d_ff":32,"max_len":48,"dropout":0.1}"#;

fn newsclf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_newsclf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = newsclf(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_model() -> ModelConfig {
    serde_json::from_str(TINY_MODEL).unwrap()
}

/// Synthetic corpus, vocabulary and split in `dir`.
fn fixture(dir: &Path) {
    fs::write(dir.join("synth.json"), r#"{"languages":["en","fr"],"articles_per_language":12}"#).unwrap();
    ok(dir, &["synth", "--config", "synth.json", "--out", "corpus"]);
    ok(dir, &["vocab", "--data", "en=corpus/en", "--data", "fr=corpus/fr", "--clean", "--size", "400", "--out", "v"]);
    ok(dir, &[
        "split", "--data", "en=corpus/en", "--data", "fr=corpus/fr", "--labels", "corpus/labels/genre.tsv",
        "--subtask", "genre", "--seed", "3", "--out", "s",
    ]);
    let mut schedule = TrainConfig::st1_full().desk_scaled();
    schedule.epochs = 4;
    let job = format!(
        r#"{{"task":"genre","data":{{"en":"corpus/en","fr":"corpus/fr"}},"labels":"corpus/labels/genre.tsv",
"vocab":"v/vocab.txt","split":"s/split.json","train":{},"oversample":true,"clean":true,"model":{TINY_MODEL}}}"#,
        serde_json::to_string(&schedule).unwrap()
    );
    fs::write(dir.join("train.json"), job).unwrap();
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = newsclf(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = newsclf(dir.path(), &["evaluate", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--gold"));
}

#[test]
fn missing_input_exits_2_and_bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = newsclf(dir.path(), &["evaluate", "--pred", "p.tsv", "--gold", "g.tsv", "--subtask", "genre"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("bad.json"), r#"{"task":"genre"}"#).unwrap();
    let out = newsclf(dir.path(), &["train", "--config", "bad.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_series_metrics_and_a_replayable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let stdout = ok(d, &["train", "--config", "train.json", "--seed", "7", "--out", "runs/a"]);
    assert!(stdout.contains("4 epochs"));
    for f in ["metrics.tsv", "series.json", "selection.json", "manifest.json", "epoch_001/checkpoint.json", "epoch_004/params.bin"] {
        assert!(d.join("runs/a").join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(d.join("runs/a/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch\tlanguage\tf1_macro\ttrain_loss"));
    assert_eq!(metrics.lines().count(), 1 + 4 * 3);

    ok(d, &["train", "--config", "runs/a/manifest.json", "--out", "runs/b"]);
    assert_eq!(files_under(&d.join("runs/a")), files_under(&d.join("runs/b")));

    let sel = ok(d, &["select", "--run", "runs/a", "--strategy", "per_language", "--out", "sel"]);
    assert!(sel.contains("per_language"));
    ok(d, &["report", "--metrics", "runs/a/metrics.tsv", "--out", "rep"]);
    assert!(fs::read_to_string(d.join("rep/curves.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn evaluate_prints_micro_and_macro_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let gold = "corpus/labels/genre.tsv";
    let stdout = ok(d, &["evaluate", "--pred", gold, "--gold", gold, "--subtask", "genre", "--out", "ev"]);
    assert!(stdout.contains("micro\tP=1.0000\tR=1.0000\tF1=1.0000"), "{stdout}");
    assert!(stdout.contains("macro\tP=1.0000\tR=1.0000\tF1=1.0000"), "{stdout}");
    assert!(fs::read_to_string(d.join("ev/report.csv")).unwrap().contains("micro"));

    ok(d, &["train", "--config", "train.json", "--out", "run"]);
    ok(d, &[
        "predict", "--data", "en=corpus/en", "--data", "fr=corpus/fr", "--clean", "--subtask", "genre", "--vocab",
        "v/vocab.txt", "--checkpoint", "run/epoch_004", "--split", "s/split.json", "--part", "2", "--out", "pr",
    ]);
    let out = newsclf(d, &["evaluate", "--pred", "pr/predictions.json", "--gold", gold, "--subtask", "genre"]);
    assert_eq!(out.status.code(), Some(1), "partial coverage must be rejected without --predicted-only");
    ok(d, &[
        "evaluate", "--pred", "pr/predictions.json", "--gold", gold, "--subtask", "genre", "--predicted-only", "--out",
        "ev2",
    ]);
    let per_lang = fs::read_to_string(d.join("ev2/per_language.csv")).unwrap();
    assert!(per_lang.lines().any(|l| l.starts_with("en,")) && per_lang.lines().any(|l| l.starts_with("all,")));
}

/// English goes to a three-member monolingual ensemble, French to a single
/// multilingual model through translate-test; the routed output must match
/// the members run separately and voted by `ensemble`.
#[test]
fn routing_reproduces_two_system_topology() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    for s in ["1", "2", "3"] {
        ok(d, &["train", "--config", "train.json", "--seed", s, "--out", &format!("run{s}")]);
    }
    fs::write(
        d.join("routing.json"),
        r#"{"en":{"plan":"direct","model":"mono"},"fr":{"plan":"translate_test","target":"en","model":"multi"}}"#,
    )
    .unwrap();
    let data = ["--data", "en=corpus/en", "--data", "fr=corpus/fr", "--subtask", "genre", "--vocab", "v/vocab.txt"];
    let mut args: Vec<&str> = vec!["predict"];
    args.extend(data);
    args.extend([
        "--routing", "routing.json", "--model", "mono=run1/epoch_004", "--model", "mono=run2/epoch_004", "--model",
        "mono=run3/epoch_004", "--model", "multi=run2/epoch_002", "--scores", "0.5,0.6,0.7,0", "--out", "routed",
    ]);
    ok(d, &args);
    for (s, ckpt) in [("1", "run1/epoch_004"), ("2", "run2/epoch_004"), ("3", "run3/epoch_004"), ("m", "run2/epoch_002")] {
        let mut args: Vec<&str> = vec!["predict"];
        args.extend(data);
        let out = format!("p{s}");
        args.extend(["--checkpoint", ckpt, "--out", &out]);
        ok(d, &args);
    }
    ok(d, &[
        "ensemble", "--members", "p1/predictions.json,p2/predictions.json,p3/predictions.json", "--vote", "majority",
        "--scores", "0.5,0.6,0.7", "--out", "ens",
    ]);
    let routed = PredictionSet::load(&d.join("routed/predictions.json")).unwrap();
    let voted = PredictionSet::load(&d.join("ens/ensemble.json")).unwrap();
    let multi = PredictionSet::load(&d.join("pm/predictions.json")).unwrap();
    assert_eq!(routed.items.len(), 24);
    for (key, item) in &routed.items {
        let route = item.route.as_ref().expect("route provenance");
        let expected = if key.starts_with("en") {
            assert_eq!(route.model, "mono");
            &voted.items[key]
        } else {
            assert_eq!(route.model, "multi");
            assert_eq!(route.model_language.as_str(), "en");
            &multi.items[key]
        };
        assert_eq!(item.labels, expected.labels, "{key}");
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let mut setup = FitSetup::desk_full();
    setup.model = tiny_model();
    setup.train.epochs = 3;
    let manifest = ExperimentManifest {
        name: "sweep".into(),
        corpus: SyntheticConfig {
            languages: vec!["en".into(), "fr".into()],
            articles_per_language: 10,
            ..SyntheticConfig::default()
        },
        split_seed: 7,
        vocab_size: 400,
        seeds: vec![0],
        experiment: Experiment::TranslateTestSweep {
            task: Subtask::Genre,
            setup,
            backend: BackendSpec::Lexicon,
            checkpoints: CheckpointSource::Mono,
        },
    };
    fs::write(d.join("exp.json"), serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    for run in ["x", "y"] {
        ok(d, &["experiment", "--config", "exp.json", "--out", &format!("{run}/exp")]);
        ok(d, &["train", "--config", "train.json", "--out", &format!("{run}/train")]);
        ok(d, &[
            "predict", "--data", "en=corpus/en", "--data", "fr=corpus/fr", "--subtask", "genre", "--vocab", "v/vocab.txt",
            "--checkpoint", &format!("{run}/train/epoch_003"), "--out", &format!("{run}/pred"),
        ]);
        ok(d, &[
            "evaluate", "--pred", &format!("{run}/pred/predictions.json"), "--gold", "corpus/labels/genre.tsv", "--subtask",
            "genre", "--out", &format!("{run}/eval"),
        ]);
    }
    let (x, y) = (files_under(&d.join("x")), files_under(&d.join("y")));
    assert!(x.keys().any(|p| p.ends_with("checkpoint.json")) && x.keys().any(|p| p.ends_with("provenance.json")));
    assert_eq!(x, y);
}
