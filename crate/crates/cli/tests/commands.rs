use std::path::Path;
use std::process::{Command, Output};

use efim::corpus::default_vocabulary;
use efim::report::Comparison;
use efim::sim::{self, EngineConfig, MetricsReport, Scheme};
use efim::workload;

fn efim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efim"))
        .args(args)
        .env_remove("EFIM_CONFIG")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_exit_codes() {
    let help = efim(&["simulate", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("--trace"));

    let missing = efim(&["simulate", "--scheme", "efim", "--out", "r.json"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--trace"));

    assert_eq!(efim(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(efim(&["simulate", "--trace", "t", "--scheme", "spm", "--out", "r"]).status.code(), Some(1));

    let runtime = efim(&["simulate", "--trace", "/nonexistent/trace.jsonl", "--scheme", "fim", "--out", "r.json"]);
    assert_eq!(runtime.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"block_sise": 4}"#).unwrap();
    let out = efim(&["--config", path(&bad), "tokenizer", "encode", "--text", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_reproduces_scheme_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let trace = d.join("trace.jsonl");
    let out = efim(&["workload", "gen", "--users", "6", "--rounds", "4", "--seed", "5", "--out", path(&trace)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut report_paths = Vec::new();
    for scheme in ["baseline", "fim", "efim"] {
        let p = d.join(format!("{scheme}.json"));
        let out = efim(&["simulate", "--trace", path(&trace), "--scheme", scheme, "--out", path(&p)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(p.with_extension("csv").exists());
        report_paths.push(p);
    }

    // The CLI's reports equal the in-process simulator's on the same trace.
    let scripts = workload::from_jsonl(&trace).unwrap();
    for (p, scheme) in report_paths.iter().zip(Scheme::ALL) {
        let from_cli: MetricsReport = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        let direct = sim::run(&scripts, &EngineConfig::default().with_scheme(scheme), default_vocabulary()).unwrap();
        assert_eq!(from_cli, direct);
        let csv = std::fs::read_to_string(p.with_extension("csv")).unwrap();
        assert_eq!(csv, direct.rounds_csv());
    }

    let cmp_base = d.join("cmp");
    let mut args = vec!["report", "compare"];
    args.extend(report_paths.iter().map(|p| path(p)));
    args.extend(["--out", path(&cmp_base)]);
    let out = efim(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");
    let cmp: Comparison = serde_json::from_str(&std::fs::read_to_string(cmp_base.with_extension("json")).unwrap()).unwrap();
    let [b, f, e] = [&cmp.rows[0], &cmp.rows[1], &cmp.rows[2]];
    assert!(e.avg_latency < f.avg_latency && f.avg_latency < b.avg_latency);
    assert!(e.reuse_rate > f.reuse_rate && f.reuse_rate > 0.0 && b.reuse_rate == 0.0);
    assert!(e.cost_reduction > f.cost_reduction && f.cost_reduction > 0.0);
    let csv = std::fs::read_to_string(cmp_base.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), efim::report::CSV_HEADER);

    // A report from another workload is refused.
    let other_trace = d.join("other.jsonl");
    assert!(efim(&["workload", "gen", "--users", "2", "--rounds", "2", "--out", path(&other_trace)]).status.success());
    let other = d.join("other.json");
    assert!(efim(&["simulate", "--trace", path(&other_trace), "--scheme", "fim", "--out", path(&other)]).status.success());
    let out = efim(&["report", "compare", path(&report_paths[0]), path(&other)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_point_per_count() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"rounds": 2, "initial_prefix_chars": {"fixed": 400}, "suffix_chars": {"fixed": 400}}"#).unwrap();
    let out_path = dir.path().join("sweep.json");
    let out = efim(&["sweep", "--spec", path(&spec), "--scheme", "fim", "--users", "1,2,4", "--out", path(&out_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let points: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(points.as_array().unwrap().len(), 3);
    assert_eq!(std::fs::read_to_string(out_path.with_extension("csv")).unwrap().lines().count(), 4);
    assert_eq!(efim(&["sweep", "--scheme", "fim", "--users", "4,2", "--out", path(&out_path)]).status.code(), Some(2));
}

#[test]
fn tokenizer_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("src");
    std::fs::create_dir(&corpus).unwrap();
    std::fs::write(corpus.join("a.py"), "def compute_value(x):\n    return x * 2\n".repeat(20)).unwrap();
    let vocab = dir.path().join("vocab.json");
    let out = efim(&["tokenizer", "train", "--corpus", path(&corpus), "--size", "300", "--out", path(&vocab)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let text = "def compute_value(y): pass";
    let out = efim(&["tokenizer", "encode", "--vocab", path(&vocab), "--text", text]);
    assert!(out.status.success());
    let ids = String::from_utf8(out.stdout).unwrap();
    let parsed: Vec<u32> = serde_json::from_str(ids.trim()).unwrap();
    assert!(parsed.len() < text.len());
    let out = efim(&["tokenizer", "decode", "--vocab", path(&vocab), "--ids", ids.trim()]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), text);

    // The config's built-in vocabulary is used without --vocab.
    let out = efim(&["tokenizer", "encode", "--text", text]);
    let ids: Vec<u32> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ids, default_vocabulary().encode(text.as_bytes()));
}

#[test]
fn prepare_data_writes_shards_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    for (i, text) in efim::corpus::synthetic_corpus(1, 5, 800).iter().enumerate() {
        std::fs::write(corpus.join(format!("m{i}.py")), text).unwrap();
    }
    std::fs::write(corpus.join("tiny.py"), "x\n").unwrap();
    let mut stats = Vec::new();
    for mode in ["fim", "fragment"] {
        let out_dir = dir.path().join(mode);
        let out = efim(&[
            "prepare-data", "--corpus", path(&corpus), "--mode", mode, "--seed", "3", "--shard-size", "2", "--out", path(&out_dir),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("stats.json")).unwrap()).unwrap();
        assert_eq!(s["documents"], 6);
        assert_eq!(s["skipped"], 1);
        let shards: Vec<_> = std::fs::read_dir(&out_dir)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("shard-"))
            .collect();
        assert_eq!(shards.len(), 3);
        let first = std::fs::read_to_string(out_dir.join("shard-00000.jsonl")).unwrap();
        let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        assert_eq!(rec["id"], "m0.py");
        stats.push(s);
    }
    assert!(stats[1]["subtokens"]["word_interior"].as_u64() > stats[0]["subtokens"]["word_interior"].as_u64());
}
