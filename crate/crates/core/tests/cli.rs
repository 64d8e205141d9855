use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use contrastive_triad::eval::{
    read_report_csv, report_from_trace, write_dataset, MetricsReport, SweepReport,
};
use contrastive_triad::pair::TraceEvent;
use contrastive_triad::synthetic::{generate, SynthSpec};
use serde_json::Value;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(pairs: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&SynthSpec {
            pairs,
            seed: 11,
            ..SynthSpec::default()
        });
        data.bank
            .write(&dir.path().join("bank.jsonl"), &dir.path().join("bank.bin"))
            .unwrap();
        write_dataset(&dir.path().join("dataset.jsonl"), &data.pairs).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, sub: &str, extra: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ctriad"));
        cmd.arg(sub);
        if sub != "ingest" && sub != "eval" {
            cmd.arg("--bank")
                .arg(self.path("bank.jsonl"))
                .arg("--bank-matrix")
                .arg(self.path("bank.bin"));
        }
        if sub != "ingest" {
            cmd.arg("--dataset").arg(self.path("dataset.jsonl"));
        }
        cmd.args(extra).output().unwrap()
    }

    fn ok(&self, sub: &str, extra: &[&str]) -> String {
        let out = self.run(sub, extra);
        assert!(
            out.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn ingest_writes_bank_and_drop_log() {
    let ws = Workspace::new(2);
    let out = ws.path("ingested");
    ws.ok(
        "ingest",
        &[
            "--manifest",
            ws.path("bank.jsonl").to_str().unwrap(),
            "--matrix",
            ws.path("bank.bin").to_str().unwrap(),
            "--tau-dup",
            "0.9",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    let kept = read(&out.join("bank.jsonl")).lines().count();
    let dropped = read(&out.join("dropped.jsonl")).lines().count();
    assert_eq!(kept + dropped, read(&ws.path("bank.jsonl")).lines().count());
    assert!(out.join("bank.bin").exists());
}

#[test]
fn ingest_rejects_bad_tau() {
    let ws = Workspace::new(1);
    let out = ws.run(
        "ingest",
        &[
            "--manifest",
            ws.path("bank.jsonl").to_str().unwrap(),
            "--matrix",
            ws.path("bank.bin").to_str().unwrap(),
            "--tau-dup",
            "1.5",
            "--out",
            ws.path("x").to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn select_emits_one_triad_per_image() {
    let ws = Workspace::new(3);
    let stdout = ws.ok("select", &[]);
    let lines: Vec<Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    for l in &lines {
        assert!(l["pair_id"].is_string());
        assert!(l["image_id"]
            .as_str()
            .unwrap()
            .starts_with(l["pair_id"].as_str().unwrap()));
        assert!(l["triad"].is_object());
    }
}

#[test]
fn eval_with_partial_results_exits_one() {
    let ws = Workspace::new(3);
    let out = ws.path("run");
    ws.ok("infer", &["--seed", "1", "--out", out.to_str().unwrap()]);
    let results = read(&out.join("results.jsonl"));
    let partial: String = results.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(ws.path("partial.jsonl"), partial).unwrap();
    let r = ws.run(
        "eval",
        &["--results", ws.path("partial.jsonl").to_str().unwrap()],
    );
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn eval_reproduces_infer_report() {
    let ws = Workspace::new(5);
    let out = ws.path("run");
    ws.ok("infer", &["--seed", "3", "--out", out.to_str().unwrap()]);
    let json = ws.ok(
        "eval",
        &["--results", out.join("results.jsonl").to_str().unwrap()],
    );
    assert_eq!(json, read(&out.join("report.json")));
}

#[test]
fn trace_alone_reproduces_report() {
    let ws = Workspace::new(6);
    let out = ws.path("run");
    ws.ok("infer", &["--seed", "5", "--out", out.to_str().unwrap()]);
    let events: Vec<TraceEvent> = read(&out.join("trace.jsonl"))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let report = MetricsReport::from_json(&read(&out.join("report.json"))).unwrap();
    let rebuilt = report_from_trace(&events);
    assert_eq!(rebuilt.metrics, report.metrics);
    assert_eq!(rebuilt.counts, report.counts);
    assert_eq!(rebuilt.per_category, report.per_category);
}

#[test]
fn sweep_csv_and_json_agree() {
    let ws = Workspace::new(6);
    let cache = ws.path("cache.jsonl");
    let engine = ["--seed", "2", "--cache", cache.to_str().unwrap()];
    let mut infer = engine.to_vec();
    let run = ws.path("run");
    infer.extend(["--out", run.to_str().unwrap()]);
    ws.ok("infer", &infer);

    let sweep = |fmt: &str| {
        let mut a = engine.to_vec();
        a.extend(["--param", "m", "--values", "10,50,90", "--report", fmt]);
        ws.ok("sweep", &a)
    };
    let table: SweepReport = serde_json::from_str(&sweep("json")).unwrap();
    let csv = sweep("csv");
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(table.rows.len(), 3);
    assert_eq!(rows.len(), 3);
    for (row, line) in table.rows.iter().zip(rows) {
        let m = &row.report.metrics;
        let want = [
            m.set_accuracy,
            m.individual_accuracy,
            m.confusion_rate,
            m.abstention_rate,
        ]
        .map(contrastive_triad::eval::percent)
        .join(",");
        assert!(line.contains(&want), "{line} lacks {want}");
    }
}

#[test]
fn sweep_without_cache_is_rejected() {
    let ws = Workspace::new(1);
    let r = ws.run("sweep", &["--param", "t", "--values", "10"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn csv_report_reads_back() {
    let ws = Workspace::new(4);
    let out = ws.path("run");
    ws.ok(
        "infer",
        &[
            "--seed",
            "9",
            "--report",
            "csv",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    let rows = read_report_csv(&read(&out.join("report.csv"))).unwrap();
    assert_eq!(rows[0].scope, "overall");
    assert_eq!(rows[0].pairs, 4);
}
