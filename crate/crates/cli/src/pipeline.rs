//! End-to-end run of every subcommand on a small generated corpus, used to
//! confirm that two runs with one seed leave byte-identical trees.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use scriptdrift_core::corpus::{Difficulty, NoveltyType};
use scriptdrift_core::testgen::DistributionType;

use crate::commands::*;
use crate::config::Config;
use crate::{execute, Command};

/// A design small enough to run in a few seconds.
pub fn demo_config(seed: u64) -> Config {
    let mut c = Config {
        seed,
        ..Config::default()
    };
    c.features.extractor = "mean-hog".into();
    c.inject.background = 45;
    c.inject.pen = 45;
    c.inject.letter = 45;
    c.inject.writer = 45;
    c.testgen.introduction_points = vec![0.5];
    c.testgen.densities = vec![0.2];
    c.testgen.novelty_types = vec![NoveltyType::Background, NoveltyType::Writer];
    c.testgen.difficulties = vec![Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];
    c.testgen.distributions = vec![DistributionType::Flat, DistributionType::High];
    c.testgen.lengths = vec![128];
    c.testgen.reorderings = 2;
    c
}

/// Runs corpus generation and every subcommand under `root`.
pub fn run_pipeline(root: &Path, seed: u64) -> Result<()> {
    let ctx = Ctx {
        config: demo_config(seed),
        seed,
        quiet: true,
    };
    let p = |s: &str| root.join(s);
    let base = p("corpus/manifest.jsonl");
    let pool = p("pool/manifest.jsonl");
    let manifests = vec![base.clone(), pool.clone()];
    let steps = [
        Command::DemoCorpus(DemoCorpusArgs {
            writers: 8,
            novel: 2,
            lines_per_writer: 24,
            out: p("corpus"),
        }),
        Command::Inject(InjectArgs {
            manifest: base.clone(),
            recipe: None,
            assets: None,
            out: p("pool"),
        }),
        Command::Measure(MeasureArgs {
            manifest: manifests.clone(),
            out: p("styles.jsonl"),
        }),
        Command::Graph(GraphArgs {
            manifest: base.clone(),
            styles: p("styles.jsonl"),
            out: p("graph.json"),
        }),
        Command::Distances(DistancesArgs {
            manifest: base.clone(),
            styles: p("styles.jsonl"),
            out: p("distances.csv"),
        }),
        Command::Featurize(FeaturizeArgs {
            manifest: manifests.clone(),
            extractor: None,
            out: p("features.json"),
        }),
        Command::Train(TrainArgs {
            features: p("features.json"),
            labels: manifests.clone(),
            out: p("model.evm"),
        }),
        Command::Calibrate(CalibrateArgs {
            model: p("model.evm"),
            features: p("features.json"),
            labels: manifests.clone(),
            out: None,
        }),
        Command::GenTests(GenTestsArgs {
            manifest: manifests.clone(),
            out: p("tests"),
        }),
        Command::Run(RunArgs {
            tests: p("tests"),
            model: p("model.evm"),
            features: p("features.json"),
            transcripts: None,
            labels: Vec::new(),
            out: p("runs"),
        }),
        Command::Report(ReportArgs {
            tests: p("tests"),
            runs: p("runs"),
            labels: manifests.clone(),
            model: p("model.evm"),
            styles: Some(p("styles.jsonl")),
            out: p("report"),
        }),
        Command::Plot(PlotArgs {
            report: p("report/report.json"),
            out: p("fp.svg"),
        }),
    ];
    for step in &steps {
        execute(&ctx, step).with_context(|| format!("step {}", step.name()))?;
    }
    Ok(())
}

/// Every file under `root`, keyed by its relative path.
pub fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
        for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = e?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                out.insert(path.strip_prefix(root)?.to_path_buf(), bytes);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

/// Runs the pipeline twice in fresh directories and compares the trees.
/// Returns the number of files compared.
pub fn rerun_check(seed: u64) -> Result<usize> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    run_pipeline(a.path(), seed)?;
    run_pipeline(b.path(), seed)?;
    let (sa, sb) = (snapshot(a.path())?, snapshot(b.path())?);
    let differing: Vec<String> = sa
        .keys()
        .chain(sb.keys())
        .filter(|k| sa.get(*k) != sb.get(*k))
        .map(|k| k.display().to_string())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if !differing.is_empty() {
        bail!("{} files differ, first {}", differing.len(), differing[0]);
    }
    Ok(sa.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_reruns_are_identical() {
        let n = rerun_check(5).unwrap();
        assert!(n > 100, "only {n} files");
    }
}
