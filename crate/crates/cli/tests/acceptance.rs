//! Acceptance suite. Prints one verdict line per criterion with its runtime
//! and limit, then fails if any criterion failed or the suite ran too long.
//!
//! The in-process checks come from `scriptdrift_core::selfcheck`; a few
//! criteria get extra checks through the compiled binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use scriptdrift_core::selfcheck::{self, SelfcheckOptions, CRITERIA, SUITE_LIMIT};

const SEED: u64 = 0;

/// Writes straight to stdout so verdicts show even when the harness
/// captures `println!` output of passing tests.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Line {
    label: String,
    passed: bool,
    detail: String,
    elapsed: Duration,
    limit: Option<Duration>,
}

impl Line {
    fn print(&self) {
        let limit = self.limit.map_or(String::new(), |l| format!(", limit {} s", l.as_secs()));
        say(&format!(
            "[{}] {}: {} ({:.2} s{limit})",
            if self.passed { "PASS" } else { "FAIL" },
            self.label,
            self.detail,
            self.elapsed.as_secs_f64()
        ));
    }
}

fn bin(cwd: &Path, args: &[&str]) -> Result<String, String> {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scriptdrift"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("SCRIPTDRIFT_")) {
        c.env_remove(k);
    }
    let o = c.args(args).current_dir(cwd).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn timed(label: &str, limit: Option<Duration>, f: impl FnOnce() -> Result<String, String>) -> Line {
    let start = Instant::now();
    let r = f();
    let elapsed = start.elapsed();
    let (mut passed, mut detail) = match r {
        Ok(d) => (true, d),
        Err(e) => (false, e),
    };
    if let Some(l) = limit.filter(|l| elapsed > *l) {
        passed = false;
        detail.push_str(&format!("; exceeded {} s", l.as_secs()));
    }
    Line {
        label: label.to_string(),
        passed,
        detail,
        elapsed,
        limit,
    }
}

/// Full default design through the binary.
fn default_design() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    bin(dir.path(), &["--seed", "0", "gen-tests", "--out", "t"])?;
    let t = dir.path().join("t");
    let specs: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(t.join("specs.json")).unwrap())
        .map_err(|e| e.to_string())?;
    let mut streams = 0;
    let mut oracles = 0;
    for e in fs::read_dir(&t).map_err(|e| e.to_string())? {
        let name = e.map_err(|e| e.to_string())?.file_name().to_string_lossy().into_owned();
        streams += usize::from(name.ends_with(".stream.json"));
        oracles += usize::from(name.ends_with(".oracle.json"));
    }
    if specs.len() != 3888 || streams != 38_880 || oracles != 38_880 {
        return Err(format!("{} specs, {streams} streams, {oracles} oracles", specs.len()));
    }
    Ok("binary wrote 3888 specs x 10 orderings with sealed oracles".into())
}

const PIPELINE_CONFIG: &str = r#"{
  "schema_version": 1,
  "features": {"extractor": "mean-hog"},
  "inject": {"background": 60, "pen": 60, "letter": 60, "writer": 60},
  "testgen": {
    "introduction_points": [0.5],
    "densities": [0.2],
    "novelty_types": ["Background", "Pen", "Writer"],
    "lengths": [128],
    "reorderings": 2
  }
}"#;

fn pipeline(root: &Path) -> Result<(), String> {
    fs::write(root.join("config.json"), PIPELINE_CONFIG).map_err(|e| e.to_string())?;
    let steps: &[&[&str]] = &[
        &["demo-corpus", "--writers", "8", "--novel", "2", "--lines-per-writer", "30", "--out", "corpus"],
        &["inject", "--manifest", "corpus/manifest.jsonl", "--out", "pool"],
        &["measure", "--manifest", "corpus/manifest.jsonl", "--manifest", "pool/manifest.jsonl", "--out", "styles.jsonl"],
        &["graph", "--manifest", "corpus/manifest.jsonl", "--styles", "styles.jsonl", "--out", "graph.json"],
        &["distances", "--manifest", "corpus/manifest.jsonl", "--styles", "styles.jsonl", "--out", "distances.csv"],
        &["featurize", "--manifest", "corpus/manifest.jsonl", "--manifest", "pool/manifest.jsonl", "--out", "features.json"],
        &["train", "--features", "features.json", "--labels", "corpus/manifest.jsonl", "--out", "model.evm"],
        &[
            "calibrate", "--model", "model.evm", "--features", "features.json", "--labels", "corpus/manifest.jsonl",
            "--labels", "pool/manifest.jsonl",
        ],
        &["gen-tests", "--pools", "corpus/manifest.jsonl", "--pools", "pool/manifest.jsonl", "--out", "tests"],
        &["run", "--tests", "tests", "--agent", "model.evm", "--features", "features.json", "--out", "runs"],
        &[
            "report", "--tests", "tests", "--runs", "runs", "--labels", "corpus/manifest.jsonl", "--labels",
            "pool/manifest.jsonl", "--model", "model.evm", "--styles", "styles.jsonl", "--out", "report",
        ],
        &["plot", "--report", "report/report.json", "--out", "fp.svg"],
    ];
    for step in steps {
        let mut args = vec!["--seed", "17", "--config", "config.json"];
        args.extend_from_slice(step);
        bin(root, &args)?;
    }
    Ok(())
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Every subcommand twice under one seed; the output trees must match.
fn cli_rerun() -> Result<String, String> {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<_> = ta.keys().chain(tb.keys()).filter(|k| ta.get(*k) != tb.get(*k)).collect();
    if let Some(first) = differing.first() {
        return Err(format!("{} files differ, first {}", differing.len(), first.display()));
    }
    let report: serde_json::Value =
        serde_json::from_slice(&ta[Path::new("report/report.json")]).map_err(|e| e.to_string())?;
    let rows = report["rows"].as_array().map_or(0, Vec::len);
    Ok(format!("binary pipeline rerun identical over {} files ({rows} report rows)", ta.len()))
}

/// A threshold other than the calibrated one must fail the EER criterion.
fn perturbed_threshold() -> Result<String, String> {
    let opts = SelfcheckOptions {
        seed: SEED,
        threshold_override: Some(0.999),
    };
    let r = selfcheck::run_one(5, &opts).map_err(|e| e.to_string())?;
    if r.passed {
        return Err("threshold 0.999 was accepted".into());
    }
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.txt"), "0.999").unwrap();
    match bin(dir.path(), &["selfcheck", "--only", "5", "--threshold-file", "t.txt"]) {
        Ok(_) => Err("binary selfcheck accepted threshold 0.999".into()),
        Err(e) if e.contains("criteria failed: 5") => Ok("threshold 0.999 rejected in-process and by the binary".into()),
        Err(e) => Err(format!("unexpected failure: {e}")),
    }
}

#[test]
fn acceptance() {
    let opts = SelfcheckOptions {
        seed: SEED,
        threshold_override: None,
    };
    let start = Instant::now();
    let mut lines = Vec::new();
    for &(id, name, _) in &CRITERIA {
        let r = selfcheck::run_one(id, &opts).expect("known criterion");
        let line = Line {
            label: format!("{id:>2} {name}"),
            passed: r.passed,
            detail: r.detail.clone(),
            elapsed: r.elapsed,
            limit: r.limit,
        };
        line.print();
        lines.push(line);
        let extra = match id {
            5 => Some(timed(" 5 EVM open-set synthetic benchmark (perturbed threshold)", None, perturbed_threshold)),
            7 => Some(timed(
                " 7 test generator (default design via the binary)",
                Some(Duration::from_secs(120)),
                default_design,
            )),
            11 => Some(timed(
                "11 determinism and round trips (binary pipeline)",
                Some(Duration::from_secs(120)),
                cli_rerun,
            )),
            _ => None,
        };
        if let Some(l) = extra {
            l.print();
            lines.push(l);
        }
    }
    let elapsed = start.elapsed();
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.label.trim()).collect();
    say(&format!(
        "{}/{} checks passed in {:.1} s (suite limit {} s)",
        lines.len() - failed.len(),
        lines.len(),
        elapsed.as_secs_f64(),
        SUITE_LIMIT.as_secs()
    ));
    assert!(failed.is_empty(), "failed: {failed:?}");
    assert!(elapsed <= SUITE_LIMIT, "suite took {:.1} s", elapsed.as_secs_f64());
}
