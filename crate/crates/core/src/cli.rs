//! The `vsc` command line. [`dispatch`] takes the argument list and output
//! streams so it can be driven in-process.
//!
//! Exit codes: 0 success, 1 validation or I/O failure, 2 usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::doc::Document;
use crate::exec::run_chain;
use crate::fixtures::page_supervision;
use crate::grpo::{run_grpo_demo, GrpoConfig, GrpoFixture};
use crate::numeric::format_g17;
use crate::reward::{load_gold_file, Decision, RewardWeights, Scorer};
use crate::supervision::{GridMap, DEFAULT_LAMBDA_C};
use crate::tower::{
    grad_check, synthetic_patch_embeddings, train_tower, TowerParams, TowerShape, TrainConfig, DEFAULT_HIDDEN,
    DEFAULT_LR, GRAD_CHECK_TOLERANCE,
};
use crate::vsc::{parse_trace, validate_schema, RolloutRecord};

/// Lines handed to the worker pool at a time; bounds memory for `--jobs`.
const CHUNK_LINES: usize = 4096;

#[derive(Debug, Parser)]
#[command(
    name = "vsc",
    version,
    about = "Region-grounded reasoning chains: validation, execution, rewards, layout supervision and demos"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate one trace; prints the report as one JSON line.
    Validate {
        #[arg(long)]
        trace: PathBuf,
        /// Resolve region selectors against this document.
        #[arg(long)]
        doc: Option<PathBuf>,
    },
    /// Run a trace's chain on a document; prints answer, status and log.
    Exec {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        doc: PathBuf,
    },
    /// Score every rollout line; one breakdown line per input line, in order.
    Score(BatchArgs),
    /// Print the rollout lines that pass the rejection filter, unchanged.
    Filter {
        #[command(flatten)]
        batch: BatchArgs,
        /// Write one `{"line","reason"}` object per discarded line here.
        #[arg(long)]
        rejected: Option<PathBuf>,
    },
    /// Build the supervision map of a page's OCR lines.
    Supervise {
        #[arg(long)]
        doc: PathBuf,
        #[arg(long, value_parser = parse_grid)]
        grid: (usize, usize),
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the layout tower on the pages of a directory.
    TowerTrain {
        /// Directory of page documents (`*.json`).
        #[arg(long)]
        pages: PathBuf,
        #[arg(long, value_parser = parse_grid, default_value = "4x4")]
        grid: (usize, usize),
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
        d: u32,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
        rank: u32,
        #[arg(long, default_value_t = DEFAULT_HIDDEN as u32, value_parser = clap::value_parser!(u32).range(1..))]
        hidden: u32,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_LR, value_parser = non_negative)]
        lr: f64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA_C, value_parser = non_negative)]
        lambda_c: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also train the positional table.
        #[arg(long)]
        train_pos: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Loss curve as `step,loss` CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compare analytic tower gradients with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the GRPO demo on a fixture directory (`docs/`, `questions.jsonl`).
    GrpoDemo {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(2..))]
        group: u32,
        #[arg(long, default_value_t = 0.5, value_parser = non_negative)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = RewardWeights::default())]
        weights: RewardWeights,
        #[arg(long)]
        gated: bool,
        /// CSV log destination; stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct BatchArgs {
    /// Document files or directories of `*.json` documents.
    #[arg(long, required = true, num_args = 1..)]
    docs: Vec<PathBuf>,
    /// Gold references, JSON lines keyed by `doc_id` and `question`.
    #[arg(long)]
    gold: PathBuf,
    /// Rollout JSON lines; stdin when absent.
    #[arg(long)]
    rollouts: Option<PathBuf>,
    /// Reward weights `q,v,s,r`.
    #[arg(long, default_value_t = RewardWeights::default())]
    weights: RewardWeights,
    /// Gate region probabilities on gold regions.
    #[arg(long)]
    gated: bool,
    /// Override every gold reference's retention threshold.
    #[arg(long, value_parser = unit_interval)]
    tau: Option<f64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: u32,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let err = || format!("grid must be HxW with both at least 1, got `{s}`");
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(err)?;
    let h: usize = h.trim().parse().map_err(|_| err())?;
    let w: usize = w.trim().parse().map_err(|_| err())?;
    if h == 0 || w == 0 {
        return Err(err());
    }
    Ok((h, w))
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() && x >= 0.0 => Ok(x),
        _ => Err(format!("expected a finite non-negative number, got `{s}`")),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if (0.0..=1.0).contains(&x) => Ok(x),
        _ => Err(format!("expected a number in [0, 1], got `{s}`")),
    }
}

/// A failure to report on stderr with exit code 1.
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type Outcome = Result<i32, Failure>;

/// Parses `args` (program name first) and runs the subcommand.
pub fn dispatch<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = run(cli.command, out, err);
    let _ = out.flush();
    match result {
        Ok(code) => code,
        Err(Failure(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

fn read_file(p: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(p).map_err(|e| Failure(format!("{}: {e}", p.display())))
}

fn load_doc(p: &Path) -> Result<Document, Failure> {
    Document::from_json(&read_file(p)?).map_err(|e| Failure(format!("{}: {e}", p.display())))
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Failure(format!("{}: {e}", dir.display())))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    v.sort();
    Ok(v)
}

fn load_docs(paths: &[PathBuf]) -> Result<Vec<Document>, Failure> {
    let mut docs = Vec::new();
    for p in paths {
        if p.is_dir() {
            for f in json_files(p)? {
                docs.push(load_doc(&f)?);
            }
        } else {
            docs.push(load_doc(p)?);
        }
    }
    Ok(docs)
}

fn write_output(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure(format!("{}: {e}", p.display()))),
        None => out.write_all(text.as_bytes()).map_err(Failure::from),
    }
}

fn run(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    match cmd {
        Command::Validate { trace, doc } => validate(&trace, doc.as_deref(), out),
        Command::Exec { trace, doc } => exec(&trace, &doc, out),
        Command::Score(b) => score(&b, out),
        Command::Filter { batch, rejected } => filter(&batch, rejected.as_deref(), out, err),
        Command::Supervise { doc, grid, out: path } => {
            let d = load_doc(&doc)?;
            let map = page_supervision(&d, grid.0, grid.1);
            write_output(path.as_deref(), &(map.to_json() + "\n"), out)?;
            Ok(0)
        }
        Command::TowerTrain { pages, grid, d, rank, hidden, steps, lr, lambda_c, seed, train_pos, out: path, log } => {
            let shape = TowerShape {
                d: d as usize,
                rank: rank as usize,
                hidden: hidden as usize,
                d_lm: d as usize,
                grid_h: grid.0,
                grid_w: grid.1,
            };
            tower_train(
                &pages,
                shape,
                TrainConfig { lr, steps, lambda_c },
                seed,
                train_pos,
                path.as_deref(),
                log.as_deref(),
                out,
            )
        }
        Command::GradCheck { seed } => {
            let (v, p, y) = crate::fixtures::grad_check_fixture(seed);
            let gc = grad_check(&v, &p, &y, DEFAULT_LAMBDA_C)?;
            writeln!(
                out,
                "{}",
                serde_json::json!({
                    "seed": seed,
                    "max_rel_error": gc.max_rel_error,
                    "worst": { "field": gc.worst.0, "index": gc.worst.1 },
                    "entries": gc.entries,
                    "tolerance": GRAD_CHECK_TOLERANCE,
                })
            )?;
            Ok(i32::from(gc.max_rel_error >= GRAD_CHECK_TOLERANCE))
        }
        Command::GrpoDemo { fixture, iters, group, lr, seed, weights, gated, log } => {
            let fx = GrpoFixture::load(&fixture)?;
            let cfg = GrpoConfig { group: group as usize, iters, lr, seed, weights, gated, ..Default::default() };
            let result = run_grpo_demo(&fx, &cfg)?;
            write_output(log.as_deref(), &result.to_csv(), out)?;
            Ok(0)
        }
    }
}

fn validate(trace: &Path, doc: Option<&Path>, out: &mut dyn Write) -> Outcome {
    let raw = String::from_utf8_lossy(&read_file(trace)?).into_owned();
    let doc = doc.map(load_doc).transpose()?;
    match parse_trace(&raw) {
        Err(violations) => {
            let report = serde_json::json!({ "parsed": false, "schema_ok": false, "violations": violations });
            writeln!(out, "{report}")?;
            Ok(1)
        }
        Ok(t) => {
            let r = validate_schema(&t, doc.as_ref());
            let mut report = serde_json::to_value(&r)?;
            report["parsed"] = true.into();
            writeln!(out, "{report}")?;
            Ok(i32::from(!r.schema_ok))
        }
    }
}

fn exec(trace: &Path, doc: &Path, out: &mut dyn Write) -> Outcome {
    let raw = String::from_utf8_lossy(&read_file(trace)?).into_owned();
    let doc = load_doc(doc)?;
    let t = parse_trace(&raw).map_err(|v| {
        Failure(format!("{}: {}", trace.display(), v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")))
    })?;
    let r = run_chain(&doc, &t);
    writeln!(out, "{}", r.to_json())?;
    Ok(i32::from(!r.is_ok()))
}

fn scorer(b: &BatchArgs) -> Result<Scorer, Failure> {
    let docs = load_docs(&b.docs)?;
    let gold_file = File::open(&b.gold).map_err(|e| Failure(format!("{}: {e}", b.gold.display())))?;
    let gold = load_gold_file(BufReader::new(gold_file)).map_err(|e| Failure(format!("{}: {e}", b.gold.display())))?;
    let mut s = Scorer::new(docs, gold, b.weights, b.gated);
    s.tau = b.tau;
    Ok(s)
}

fn input(b: &BatchArgs) -> Result<Box<dyn BufRead>, Failure> {
    Ok(match &b.rollouts {
        Some(p) => Box::new(BufReader::new(File::open(p).map_err(|e| Failure(format!("{}: {e}", p.display())))?)),
        None => Box::new(BufReader::new(io::stdin())),
    })
}

/// Reads non-empty lines in chunks, maps each chunk on `jobs` threads and
/// hands results to `sink` in input order. The line number (1-based) comes
/// with each line.
fn stream<R, F, S>(reader: Box<dyn BufRead>, jobs: u32, f: F, mut sink: S) -> Result<(), Failure>
where
    R: Send,
    F: Fn(usize, &str) -> R + Sync,
    S: FnMut(usize, &str, R) -> Result<(), Failure>,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs as usize).build()?;
    let mut lines = reader.lines().enumerate();
    loop {
        let mut chunk = Vec::with_capacity(CHUNK_LINES);
        for (n, line) in lines.by_ref() {
            let line = line?;
            if !line.trim().is_empty() {
                chunk.push((n + 1, line));
            }
            if chunk.len() == CHUNK_LINES {
                break;
            }
        }
        if chunk.is_empty() {
            return Ok(());
        }
        let results: Vec<R> = pool.install(|| chunk.par_iter().map(|(n, l)| f(*n, l)).collect());
        for ((n, l), r) in chunk.iter().zip(results) {
            sink(*n, l, r)?;
        }
    }
}

fn score(b: &BatchArgs, out: &mut dyn Write) -> Outcome {
    let s = scorer(b)?;
    let mut w = BufWriter::new(out);
    let mut failed = false;
    stream(
        input(b)?,
        b.jobs,
        |_, line| s.score_line(line),
        |_, _, v| {
            failed |= v.get("error").is_some();
            writeln!(w, "{v}").map_err(Failure::from)
        },
    )?;
    w.flush()?;
    Ok(i32::from(failed))
}

fn filter(b: &BatchArgs, rejected: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let s = scorer(b)?;
    let mut w = BufWriter::new(out);
    let mut rej: Option<BufWriter<File>> = match rejected {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Failure(format!("{}: {e}", p.display())))?)),
        None => None,
    };
    let (mut kept, mut dropped, mut errors) = (0usize, 0usize, 0usize);
    stream(
        input(b)?,
        b.jobs,
        |_, line| match RolloutRecord::from_json_line(line) {
            Ok(rec) => s.filter(&rec).map_err(|e| e.to_string()),
            Err(e) => Err(format!("malformed rollout line: {e}")),
        },
        |n, line, decision| {
            let reason = match decision {
                Ok(Decision::Retain) => {
                    kept += 1;
                    return writeln!(w, "{line}").map_err(Failure::from);
                }
                Ok(Decision::Discard(r)) => {
                    dropped += 1;
                    serde_json::to_value(r)?
                }
                Err(msg) => {
                    errors += 1;
                    writeln!(err, "line {n}: {msg}")?;
                    serde_json::json!({ "error": msg })
                }
            };
            if let Some(r) = rej.as_mut() {
                writeln!(r, "{}", serde_json::json!({ "line": n, "reason": reason }))?;
            }
            Ok(())
        },
    )?;
    w.flush()?;
    if let Some(mut r) = rej {
        r.flush()?;
    }
    writeln!(err, "retained {kept}, discarded {dropped}, errors {errors}")?;
    Ok(i32::from(errors > 0))
}

#[allow(clippy::too_many_arguments)]
fn tower_train(
    pages: &Path,
    shape: TowerShape,
    cfg: TrainConfig,
    seed: u64,
    train_pos: bool,
    params_out: Option<&Path>,
    log: Option<&Path>,
    out: &mut dyn Write,
) -> Outcome {
    let files = json_files(pages)?;
    if files.is_empty() {
        return Err(Failure(format!("{}: no page documents", pages.display())));
    }
    let mut data = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let doc = load_doc(f)?;
        let y: GridMap = page_supervision(&doc, shape.grid_h, shape.grid_w);
        let v = synthetic_patch_embeddings(&y, shape.d, seed.wrapping_add(i as u64));
        data.push((v, y));
    }
    let mut p0 = TowerParams::init(shape, seed)?;
    p0.train_pos = train_pos;
    let result = train_tower(&data, &p0, cfg)?;

    let mut csv = String::from("step,loss\n");
    for (k, l) in result.curve.iter().enumerate() {
        csv.push_str(&format!("{k},{}\n", format_g17(*l)));
    }
    if let Some(p) = log {
        std::fs::write(p, &csv).map_err(|e| Failure(format!("{}: {e}", p.display())))?;
    }
    if let Some(p) = params_out {
        let text = serde_json::to_string(&result.params.to_json())? + "\n";
        std::fs::write(p, text).map_err(|e| Failure(format!("{}: {e}", p.display())))?;
    }
    let first = result.curve[0];
    let last = *result.curve.last().expect("curve has the initial loss");
    writeln!(
        out,
        "{}",
        serde_json::json!({
            "pages": files.len(),
            "steps": cfg.steps,
            "initial_loss": first,
            "final_loss": last,
            "ratio": if first > 0.0 { last / first } else { 0.0 },
        })
    )?;
    Ok(0)
}
