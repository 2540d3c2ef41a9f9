mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;

use common::{dissent, manifest, stderr, Toy};

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn set(kv: String) -> [String; 2] {
    ["--set".to_string(), kv]
}

#[test]
fn full_pipeline_runs_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = Toy::default().config(d, "[optimizer]\nmax_epochs = 3\n[evaluation]\nn_boot = 100");
    let cfg = p(&cfg);
    let out = |n: &str| d.join(n);
    let ok = |args: Vec<String>| {
        let o = dissent(&args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    let run = |cmd: &str, name: &str, extra: &[String]| {
        let mut args = vec![cmd.to_string(), "-c".into(), cfg.into(), "-o".into(), p(&out(name)).into()];
        args.extend_from_slice(extra);
        ok(args);
        assert_eq!(manifest(&out(name))["status"], "ok");
    };
    run("ingest", "ingest", &[]);
    run("stats", "stats", &[]);
    run("split", "split", &[]);
    run("train", "train", &[]);
    let model = out("train/model.json").display().to_string();
    let split = out("train/split.json").display().to_string();
    let with_model = [set(format!("data.checkpoint={model}")), set(format!("data.split={split}"))].concat();
    run("evaluate", "eval", &with_model);
    run("analyze-experts", "analyze", &with_model);
    run("generate-synthetic", "gen", &set(format!("data.split={split}")));
    let synth = [
        set(format!("data.split={split}")),
        set(format!("data.synthetic={}", out("gen/synthetic.jsonl").display())),
        set(format!("data.persona_profiles={}", out("gen/personas.jsonl").display())),
        set("blend.pretrain_epochs=2".into()),
        set("blend.finetune_epochs=2".into()),
    ]
    .concat();
    for strategy in ["pt_ft", "unweighted", "weighted"] {
        let mut args = synth.clone();
        args.extend(set(format!("blend.strategy={strategy}")));
        args.extend(set(format!("data.reference_checkpoint={model}")));
        run("blend-train", &format!("blend_{strategy}"), &args);
    }
    let runs: Vec<String> = ["stats", "eval", "analyze", "gen"].iter().map(|n| format!("{:?}", p(&out(n)))).collect();
    ok(vec!["report".into(), "-o".into(), p(&out("report")).into(), "--set".into(), format!("report.runs=[{}]", runs.join(","))]);

    for (name, files) in [
        ("ingest", &["annotations.jsonl", "profiles.jsonl", "corpus.json"][..]),
        ("stats", &["stats.json", "stats.csv", "demographic_signal.csv"]),
        ("split", &["split.json"]),
        ("train", &["model.json", "training_log.json", "split.json"]),
        ("eval", &["predictions.csv", "summary.csv", "groups.csv", "groups_plot.csv", "comparisons.csv", "distribution.json", "error_density.json"]),
        ("analyze", &["specialization.csv", "usage_heatmap.csv", "cross_group.csv", "usage.json"]),
        ("gen", &["synthetic.jsonl", "personas.jsonl", "plan.json", "failures.jsonl", "alignment.csv"]),
        ("blend_weighted", &["model.json", "blend_log.json", "weights.csv", "clusters.json"]),
        ("blend_pt_ft", &["model.json", "blend_log.json"]),
        ("report", &["runs.csv", "summary.csv", "stats.csv", "specialization.csv", "alignment.csv", "report.md"]),
    ] {
        let m = manifest(&out(name));
        for f in files {
            assert!(out(name).join(f).exists(), "{name}/{f}");
            assert!(m["outputs"][*f].is_string(), "{name}: {f} missing from manifest outputs");
        }
    }
    let summary = std::fs::read_to_string(out("eval/summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("mean,toy,") && l.ends_with(",0.000000,true")), "{summary}");
    let log: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out("blend_pt_ft/blend_log.json")).unwrap()).unwrap();
    let stages: Vec<&str> = log["stages"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(stages, ["pretrain", "finetune"]);
    let ingested = std::fs::read_to_string(out("ingest/annotations.jsonl")).unwrap();
    assert_eq!(ingested.lines().count(), 40 * 5);
}

#[test]
fn repeated_runs_give_identical_digests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = Toy::default().config(d, "[optimizer]\nmax_epochs = 3\n[evaluation]\nn_boot = 100\n[synthesis]\nparallelism = 4");
    let cfg = p(&cfg);
    for r in ["r1", "r2"] {
        let o = dissent(["train", "-c", cfg, "-o", p(&d.join(r).join("train"))]);
        assert!(o.status.success(), "{}", stderr(&o));
        let model = format!("data.checkpoint={}", d.join("r1/train/model.json").display());
        let o = dissent(["evaluate", "-c", cfg, "-o", p(&d.join(r).join("eval")), "--set", &model]);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = dissent(["generate-synthetic", "-c", cfg, "-o", p(&d.join(r).join("gen"))]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for c in ["train", "eval", "gen"] {
        let a = manifest(&d.join("r1").join(c));
        let b = manifest(&d.join("r2").join(c));
        assert_eq!(a["outputs"], b["outputs"], "{c}");
        assert_eq!(a["artifact_version"], b["artifact_version"], "{c}");
        assert!(!a["outputs"].as_object().unwrap().is_empty());
    }
}

#[test]
fn seed_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Toy::default().config(dir.path(), "[optimizer]\nmax_epochs = 2");
    for s in ["1", "2"] {
        let o = dissent(["train", "-c", p(&cfg), "--seed", s, "-o", p(&dir.path().join(s))]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_ne!(manifest(&dir.path().join("1"))["outputs"]["model.json"], manifest(&dir.path().join("2"))["outputs"]["model.json"]);
    assert_eq!(manifest(&dir.path().join("2"))["seeds"]["master"], 2);
}

#[test]
fn empty_corpus_stats_fails_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Toy::default().config(dir.path(), "");
    std::fs::write(dir.path().join("annotations.jsonl"), "").unwrap();
    let out = dir.path().join("out");
    let o = dissent(["stats", "-c", p(&cfg), "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["status"], "failed");
    assert_eq!(m["error"]["exit_code"], 1);
    assert!(m["inputs"]["annotations"]["sha256"].is_string());
}

#[test]
fn presets_set_top_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Toy::default().config(dir.path(), "[optimizer]\nmax_epochs = 1");
    for (preset, k) in [("offensiveness", 2), ("pcc", 3)] {
        let out = dir.path().join(preset);
        let o = dissent(["train", "-c", p(&cfg), "--preset", preset, "-o", p(&out), "--set", "model.n_experts=4"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
        assert_eq!(model["model"]["config"]["top_k"], k, "{preset}");
    }
}

#[test]
fn help_lists_configuration_keys() {
    let o = dissent(["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["hyper.topk_experts", "optimizer.max_epochs", "data.annotations", "schedule.tau_ab"] {
        assert!(text.contains(key), "{key} missing from help");
    }
    let text = String::from_utf8_lossy(&dissent(["stats", "--help"]).stdout).into_owned();
    assert!(text.contains("statistics.alpha_metric") && !text.contains("hyper.topk_experts"));
    assert_eq!(dissent(["--version"]).status.code(), Some(0));
    assert_eq!(dissent(["frobnicate"]).status.code(), Some(1));
}

#[test]
fn all_bad_keys_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Toy::default().config(dir.path(), "");
    let out = dir.path().join("out");
    let o = dissent([
        "train", "-c", p(&cfg), "-o", p(&out),
        "--set", "optimizer.max_epochs=abc",
        "--set", "model.bogus=1",
        "--set", "optimizer.batch_size=0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for key in ["optimizer.max_epochs", "model.bogus", "optimizer.batch_size"] {
        assert!(err.contains(key), "{key} not reported: {err}");
    }
    assert_eq!(manifest(&out)["status"], "failed");
}

#[test]
fn missing_input_file_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Toy::default().config(dir.path(), "");
    let o = dissent(["ingest", "-c", p(&cfg), "-o", p(&dir.path().join("o")), "--set", "data.profiles=/nonexistent/profiles.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/profiles.jsonl"));
}

#[test]
fn template_outside_rating_scale_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Toy::default().config(dir.path(), "");
    let schema = common::SCHEMA.replace("min = 1", "min = 2");
    std::fs::write(dir.path().join("schema.toml"), schema).unwrap();
    let annotations = std::fs::read_to_string(dir.path().join("annotations.jsonl")).unwrap().replace("\"rating\":1.0", "\"rating\":2.0");
    std::fs::write(dir.path().join("annotations.jsonl"), annotations).unwrap();
    let o = dissent(["generate-synthetic", "-c", p(&cfg), "-o", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("synthesis.template"));
}

#[test]
fn provider_without_credentials_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Toy::default().config(dir.path(), "[provider]\nkind = \"openai\"\nendpoint = \"http://127.0.0.1:9/v1\"\nmodel = \"m\"");
    let out = dir.path().join("o");
    let o = dissent(["generate-synthetic", "-c", p(&cfg), "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("DISSENT_API_KEY"));
    assert_eq!(manifest(&out)["error"]["kind"], "provider");
}

/// Answers every request with HTTP 400 until the test process ends.
fn rejecting_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            let mut stream = stream;
            let _ = write!(stream, "HTTP/1.1 400 Bad Request\r\nContent-Length: 4\r\nConnection: close\r\n\r\nnope");
        }
    });
    url
}

#[test]
fn provider_failures_above_threshold_exit_3_after_writing_outputs() {
    let url = rejecting_server();
    let dir = tempfile::tempdir().unwrap();
    let toy = Toy { instances: 4, annotators: 4, per_instance: 2, ..Toy::default() };
    let cfg = toy.config(dir.path(), &format!("[provider]\nkind = \"openai\"\nendpoint = {url:?}\nmodel = \"m\"\napi_key_env = \"DISSENT_TEST_KEY\""));
    let out = dir.path().join("o");
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_dissent"))
        .args(["generate-synthetic", "-c", p(&cfg), "-o", p(&out), "--set", "split.fractions=[0.5, 0.25, 0.25]"])
        .env("DISSENT_TEST_KEY", "k")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let m = manifest(&out);
    assert!(m["counters"]["failures"].as_f64().unwrap() > 0.0);
    assert_eq!(m["counters"]["annotations"], 0.0);
    let failures = std::fs::read_to_string(out.join("failures.jsonl")).unwrap();
    assert!(failures.contains("400"), "{failures}");
}
