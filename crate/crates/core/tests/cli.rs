mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

use vsc_engine::doc::Document;
use vsc_engine::reward::{load_gold_file, RewardWeights, Scorer};
use vsc_engine::supervision::GridMap;

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn toy_docs() -> PathBuf {
    manifest().join("fixtures/toy/docs")
}

fn vsc(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_vsc"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn vsc");
    let mut pipe = child.stdin.take().unwrap();
    pipe.write_all(stdin.unwrap_or("").as_bytes()).unwrap();
    drop(pipe);
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

struct Corpus {
    _dir: TempDir,
    gold: String,
    rollouts: String,
    records: Vec<common::CorpusRecord>,
}

fn corpus() -> Corpus {
    let dir = TempDir::new().unwrap();
    let records = common::corrupted_corpus();
    let gold = write(dir.path(), "gold.jsonl", &(common::corpus_gold_lines().join("\n") + "\n"));
    let text: String = records.iter().map(|r| r.line.clone() + "\n").collect();
    let rollouts = write(dir.path(), "rollouts.jsonl", &text);
    Corpus { _dir: dir, gold, rollouts, records }
}

const GOOD_TRACE: &str = r#"{"question_analysis":"Select the revenue row, read it and sum.","vsc":[{"op":"Select","region":"t1","args":{"key":"Revenue"}},{"op":"Read","region":"t1","args":{}},{"op":"Aggregate","region":"t1","args":{"fn":"sum"}}],"answer":"315"}"#;

#[test]
fn validate_and_exec_a_good_trace() {
    let dir = TempDir::new().unwrap();
    let trace = write(dir.path(), "t.json", GOOD_TRACE);
    let doc = toy_docs().join("toy_table.json");
    let doc = doc.to_str().unwrap();

    let o = vsc(&["validate", "--trace", &trace, "--doc", doc], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["schema_ok"], true);

    let o = vsc(&["exec", "--trace", &trace, "--doc", doc], None);
    assert_eq!(o.status.code(), Some(0));
    let r: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(r["answer"], "315");
    assert_eq!(r["log"].as_array().unwrap().len(), 3);
}

#[test]
fn validate_rejects_a_bad_trace_with_exit_one() {
    let dir = TempDir::new().unwrap();
    let bad = GOOD_TRACE.replace(r#"{"op":"Select","region":"t1","args":{"key":"Revenue"}},"#, "");
    let trace = write(dir.path(), "t.json", &bad);
    let o = vsc(&["validate", "--trace", &trace], None);
    assert_eq!(o.status.code(), Some(1));
    let report: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["schema_ok"], false);
}

#[test]
fn score_prints_one_line_per_record_in_order() {
    let c = corpus();
    let lines: Vec<&str> = c.records.iter().take(3).map(|r| r.line.as_str()).collect();
    let input = lines.join("\n") + "\n";
    let docs = toy_docs();
    let o = vsc(&["score", "--docs", docs.to_str().unwrap(), "--gold", &c.gold], Some(&input));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let gold = load_gold_file(std::io::BufReader::new(std::fs::File::open(&c.gold).unwrap())).unwrap();
    let docs: Vec<Document> = ["toy_table.json", "invoice.json"]
        .iter()
        .map(|f| Document::from_json(&std::fs::read(toy_docs().join(f)).unwrap()).unwrap())
        .collect();
    let scorer = Scorer::new(docs, gold, RewardWeights::default(), false);
    let out = stdout(&o);
    let got: Vec<&str> = out.lines().collect();
    assert_eq!(got.len(), 3);
    for (line, printed) in lines.iter().zip(&got) {
        let printed: Value = serde_json::from_str(printed).unwrap();
        assert_eq!(printed, scorer.score_line(line));
    }
}

#[test]
fn score_flags_error_lines_with_exit_one() {
    let c = corpus();
    let input = format!("{}\nnot json\n", c.records[0].line);
    let docs = toy_docs();
    let o = vsc(&["score", "--docs", docs.to_str().unwrap(), "--gold", &c.gold], Some(&input));
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    let lines: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].get("error").is_none());
    assert_eq!(lines[1]["error"], "E_PARSE");
}

#[test]
fn filter_matches_the_oracle_and_is_order_preserving_across_jobs() {
    let c = corpus();
    let docs = toy_docs();
    let docs = docs.to_str().unwrap();
    let rejected = PathBuf::from(&c.rollouts).with_file_name("rejected.jsonl");
    let o = vsc(
        &[
            "filter",
            "--docs",
            docs,
            "--gold",
            &c.gold,
            "--rollouts",
            &c.rollouts,
            "--rejected",
            rejected.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let questions = common::corpus_questions();
    let want: String =
        c.records.iter().filter(|r| common::oracle_retain(r, &questions)).map(|r| r.line.clone() + "\n").collect();
    assert_eq!(stdout(&o), want);
    let n_rejected = std::fs::read_to_string(&rejected).unwrap().lines().count();
    assert_eq!(n_rejected + want.lines().count(), c.records.len());
    let summary = String::from_utf8(o.stderr.clone()).unwrap();
    assert!(summary.contains(&format!("retained {}", want.lines().count())), "{summary}");

    let parallel = vsc(&["filter", "--docs", docs, "--gold", &c.gold, "--rollouts", &c.rollouts, "--jobs", "4"], None);
    assert_eq!(stdout(&parallel), want);
    let scored = vsc(&["score", "--docs", docs, "--gold", &c.gold, "--rollouts", &c.rollouts], None);
    let scored_par = vsc(&["score", "--docs", docs, "--gold", &c.gold, "--rollouts", &c.rollouts, "--jobs", "4"], None);
    assert_eq!(stdout(&scored), stdout(&scored_par));
    assert_eq!(stdout(&scored).lines().count(), c.records.len());

    // Filtering the retained lines again keeps all of them.
    let again = vsc(&["filter", "--docs", docs, "--gold", &c.gold], Some(&want));
    assert_eq!(stdout(&again), want);
}

#[test]
fn usage_errors_exit_two() {
    let docs = toy_docs();
    let docs = docs.to_str().unwrap();
    for args in [
        vec![],
        vec!["frobnicate"],
        vec!["supervise", "--doc", "x.json", "--grid", "4by4"],
        vec!["supervise", "--doc", "x.json", "--grid", "0x4"],
        vec!["score", "--docs", docs, "--gold", "g.jsonl", "--tau", "1.5"],
        vec!["score", "--docs", docs, "--gold", "g.jsonl", "--jobs", "0"],
        vec!["grpo-demo", "--fixture", "f", "--group", "1"],
        vec!["tower-train", "--pages", "p", "--lr", "-1"],
    ] {
        let o = vsc(&args, None);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn missing_input_files_exit_one() {
    let o = vsc(&["supervise", "--doc", "/nonexistent/doc.json", "--grid", "4x4"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn supervise_writes_a_map_that_round_trips() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("map.json");
    let doc = toy_docs().join("invoice.json");
    let o = vsc(&["supervise", "--doc", doc.to_str().unwrap(), "--grid", "6x5", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let m = GridMap::from_json(&text).unwrap();
    assert_eq!((m.h, m.w), (6, 5));
    assert!((m.sum() - 1.0).abs() < 1e-12);
    assert_eq!(GridMap::from_json(&m.to_json().to_string()).unwrap(), m);
}

#[test]
fn tower_train_logs_every_step_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let pages = manifest().join("fixtures/pages");
    let run = |name: &str| {
        let log = dir.path().join(name);
        let o = vsc(
            &[
                "tower-train",
                "--pages",
                pages.to_str().unwrap(),
                "--steps",
                "40",
                "--seed",
                "3",
                "--log",
                log.to_str().unwrap(),
            ],
            None,
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let summary: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        (std::fs::read_to_string(log).unwrap(), summary)
    };
    let (a, summary) = run("a.csv");
    let (b, _) = run("b.csv");
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 42);
    assert_eq!(a.lines().next(), Some("step,loss"));
    assert!(summary["final_loss"].as_f64().unwrap() < summary["initial_loss"].as_f64().unwrap());
}

#[test]
fn grad_check_passes_from_the_command_line() {
    let o = vsc(&["grad-check", "--seed", "2"], None);
    assert_eq!(o.status.code(), Some(0));
    let r: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn grpo_demo_writes_a_seeded_log() {
    let fixture = manifest().join("fixtures/toy");
    let args = ["grpo-demo", "--fixture", fixture.to_str().unwrap(), "--iters", "30", "--seed", "5"];
    let a = vsc(&args, None);
    let b = vsc(&args, None);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout(&a), stdout(&b));
    let out = stdout(&a);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 31);
    assert!(lines[0].starts_with("iter,mean_reward,p_best_"));
}
