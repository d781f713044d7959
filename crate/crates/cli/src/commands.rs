//! Subcommand implementations. Each returns the lines it wants recorded in
//! the run log next to its output.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use scriptdrift_core::augment::{self, AssetStore, Recipe, RecipeEntry};
use scriptdrift_core::corpus::{self, Manifest, NoveltyType, SampleLabels, UNKNOWN_WRITER};
use scriptdrift_core::evm::{self, EvmModel};
use scriptdrift_core::features::{self, Extractor, FeatureSet, FeatureVector};
use scriptdrift_core::metrics::report::{self, Report, ReportInput, TestResult};
use scriptdrift_core::ontology::{self, GraphSample};
use scriptdrift_core::runner::{self, EvmAgent};
use scriptdrift_core::selfcheck;
use scriptdrift_core::style_metrics::{self, StyleVector};
use scriptdrift_core::testgen::{self, Pools};
use scriptdrift_core::seed;
use scriptdrift_core::synth;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::InModule;

pub struct Ctx {
    pub config: Config,
    pub seed: u64,
    /// Suppresses stdout; set when subcommands run inside `selfcheck`.
    pub quiet: bool,
}

pub type Log = Vec<String>;

// ------------------------------------------------------------------ files

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StyleLine {
    id: String,
    #[serde(flatten)]
    style: StyleVector,
}

pub fn read_styles(path: &Path) -> Result<BTreeMap<String, StyleVector>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let s: StyleLine =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if out.insert(s.id.clone(), s.style).is_some() {
            bail!("{}:{}: duplicate id {:?}", path.display(), i + 1, s.id);
        }
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<Manifest>> {
    paths
        .iter()
        .map(|p| corpus::load_manifest(p).in_module("corpus"))
        .collect()
}

/// Labels of every record across manifests; an id may appear only once.
fn labels_by_id(manifests: &[Manifest]) -> Result<HashMap<String, SampleLabels>> {
    let mut out = HashMap::new();
    for m in manifests {
        for r in &m.records {
            if out.insert(r.id.clone(), r.labels.clone()).is_some() {
                return Err(anyhow!("sample id {:?} appears in more than one manifest", r.id)).in_module("corpus");
            }
        }
    }
    Ok(out)
}

/// Id lookup over a feature set.
struct Indexed<'a> {
    set: &'a FeatureSet,
    index: HashMap<&'a str, usize>,
}

impl<'a> Indexed<'a> {
    fn new(set: &'a FeatureSet) -> Self {
        let index = set.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        Indexed { set, index }
    }

    fn vector(&self, id: &str) -> Option<FeatureVector> {
        self.index.get(id).map(|&i| FeatureVector {
            extractor: self.set.extractor.clone(),
            values: self.set.records[i].values.clone(),
        })
    }
}

// ------------------------------------------------------------ demo-corpus

#[derive(Args, Clone, Debug)]
pub struct DemoCorpusArgs {
    #[arg(long, default_value_t = 8)]
    pub writers: usize,
    /// How many of the writers are held out as novel.
    #[arg(long, default_value_t = 2)]
    pub novel: usize,
    #[arg(long, default_value_t = 24)]
    pub lines_per_writer: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn demo_corpus(ctx: &Ctx, a: &DemoCorpusArgs) -> Result<Log> {
    let m = synth::demo_corpus(&a.out, a.writers, a.novel, a.lines_per_writer, ctx.seed).in_module("corpus")?;
    Ok(vec![format!(
        "{} lines from {} writers ({} novel)",
        m.records.len(),
        a.writers,
        a.novel
    )])
}

// ---------------------------------------------------------------- measure

#[derive(Args, Clone, Debug)]
pub struct MeasureArgs {
    /// Manifests to measure; ids must be unique across them.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    /// Output JSONL, one style vector per sample.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn measure(_ctx: &Ctx, a: &MeasureArgs) -> Result<Log> {
    let manifests = load_manifests(&a.manifest)?;
    labels_by_id(&manifests)?;
    let results: Vec<(String, Result<StyleVector>)> = manifests
        .iter()
        .flat_map(|m| m.records.iter().map(move |r| (m, r)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(m, r)| {
            let v = m
                .load_sample(r)
                .in_module("corpus")
                .and_then(|s| style_metrics::style_vector(&s.image).in_module("style_metrics"));
            (r.id.clone(), v)
        })
        .collect();
    let total = results.len();
    let mut out = String::new();
    let mut log = Vec::new();
    let mut measured = 0;
    for (id, v) in results {
        match v {
            Ok(style) => {
                out.push_str(&serde_json::to_string(&StyleLine { id, style })?);
                out.push('\n');
                measured += 1;
            }
            Err(e) => {
                let e = crate::render(&e);
                log::warn!("{id}: {e}");
                log.push(format!("skipped {id}: {e}"));
            }
        }
    }
    write_text(&a.out, &out)?;
    log.insert(0, format!("measured {measured} of {total} samples"));
    Ok(log)
}

// ------------------------------------------------------------------ graph

#[derive(Args, Clone, Debug)]
pub struct GraphArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub styles: PathBuf,
    /// Output JSON with bins, consistency and the graph.
    #[arg(long)]
    pub out: PathBuf,
}

fn writer_samples<'a>(manifest: &'a Manifest, styles: &BTreeMap<String, StyleVector>) -> Vec<(&'a str, &'a str)> {
    manifest
        .records
        .iter()
        .filter(|r| styles.contains_key(&r.id))
        .filter_map(|r| {
            let w = r.labels.writer.as_deref()?;
            (w != UNKNOWN_WRITER).then_some((r.id.as_str(), w))
        })
        .collect()
}

pub fn graph(_ctx: &Ctx, a: &GraphArgs) -> Result<Log> {
    let manifest = corpus::load_manifest(&a.manifest).in_module("corpus")?;
    let styles = read_styles(&a.styles)?;
    let samples: Vec<GraphSample> = writer_samples(&manifest, &styles)
        .into_iter()
        .map(|(id, w)| GraphSample {
            id: id.to_string(),
            writer: w.to_string(),
        })
        .collect();
    let measured: Vec<StyleVector> = samples.iter().map(|s| styles[&s.id]).collect();
    let bins = ontology::fit_bins(&measured).in_module("ontology")?;
    let graph = ontology::build_graph(&samples, &styles, &bins).in_module("ontology")?;
    let consistency = ontology::consistency(&graph);
    let doc = serde_json::json!({
        "bins": bins,
        "consistency": consistency,
        "graph": graph.to_json(),
    });
    write_text(&a.out, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    Ok(vec![
        format!("{} samples, {} nodes, {} edges", samples.len(), graph.nodes.len(), graph.edges.len()),
        format!("consistency {:.4}", consistency.fraction),
    ])
}

// -------------------------------------------------------------- distances

#[derive(Args, Clone, Debug)]
pub struct DistancesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub styles: PathBuf,
    /// Output CSV writer-by-writer matrix.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn distances(_ctx: &Ctx, a: &DistancesArgs) -> Result<Log> {
    let manifest = corpus::load_manifest(&a.manifest).in_module("corpus")?;
    let styles = read_styles(&a.styles)?;
    let mut groups: BTreeMap<String, Vec<StyleVector>> = BTreeMap::new();
    for (id, w) in writer_samples(&manifest, &styles) {
        groups.entry(w.to_string()).or_default().push(styles[id]);
    }
    let m = ontology::writer_distances(&groups).in_module("ontology")?;
    write_text(&a.out, &m.to_csv())?;
    Ok(vec![format!("{} writers", m.writers.len())])
}

// ----------------------------------------------------------------- inject

#[derive(Args, Clone, Debug)]
pub struct InjectArgs {
    /// Base manifest whose known-writer lines are transformed.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Recipe JSON; the standard recipe with configured counts otherwise.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    /// Asset directory, overriding the configured one.
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// Output directory for images and `manifest.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn inject(ctx: &Ctx, a: &InjectArgs) -> Result<Log> {
    let base = corpus::load_manifest(&a.manifest).in_module("corpus")?;
    let cfg = &ctx.config.inject;
    let assets = match a.assets.as_ref().or(cfg.assets.as_ref()) {
        Some(dir) => AssetStore::load(dir).in_module("augment")?,
        None => AssetStore::synthetic(seed::derive(ctx.seed, "cli.assets")),
    };
    let recipe = match &a.recipe {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<Recipe>(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .in_module("augment")?
        }
        None => {
            let mut r = Recipe::standard(cfg.background, cfg.pen, cfg.letter, &assets);
            if cfg.writer > 0 {
                r.entries.push(RecipeEntry {
                    novelty_type: NoveltyType::Writer,
                    count: cfg.writer,
                    subtypes: Vec::new(),
                });
            }
            r.replacement = cfg.replacement;
            r
        }
    };
    create_dir(&a.out)?;
    let pool = augment::build_novel_pool(&base, &recipe, &assets, ctx.seed, &a.out).in_module("augment")?;
    let mut by_type: BTreeMap<String, usize> = BTreeMap::new();
    for r in &pool.records {
        *by_type.entry(r.labels.novelty_type.to_string()).or_default() += 1;
    }
    Ok(by_type.into_iter().map(|(t, n)| format!("{t}: {n} samples")).collect())
}

// -------------------------------------------------------------- featurize

#[derive(Args, Clone, Debug)]
pub struct FeaturizeArgs {
    /// Manifests to featurize; ids must be unique across them.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    /// Overrides the configured extractor.
    #[arg(long)]
    pub extractor: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn featurize(ctx: &Ctx, a: &FeaturizeArgs) -> Result<Log> {
    let name = a.extractor.as_deref().unwrap_or(&ctx.config.features.extractor);
    let extractor = Extractor::from_str(name).in_module("features")?;
    let mut all = FeatureSet::new(extractor.id(), extractor.dimension());
    let mut seen = BTreeSet::new();
    for m in load_manifests(&a.manifest)? {
        let set = features::featurize_manifest(&m, extractor).in_module("features")?;
        for r in set.records {
            if !seen.insert(r.id.clone()) {
                return Err(anyhow!("sample id {:?} appears in more than one manifest", r.id)).in_module("features");
            }
            all.push(r.id, r.values).in_module("features")?;
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    all.save(&a.out).in_module("features")?;
    Ok(vec![format!("{} vectors of dimension {} ({})", all.records.len(), all.dimension, all.extractor)])
}

// ------------------------------------------------------------------ train

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Manifests whose known-writer, non-novel lines form the classes.
    #[arg(long, required = true)]
    pub labels: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Known-writer, non-novel samples with features, in manifest order.
fn known_samples(manifests: &[Manifest], features: &Indexed<'_>) -> (Vec<(String, FeatureVector)>, usize) {
    let mut out = Vec::new();
    let mut missing = 0;
    for m in manifests {
        for r in &m.records {
            let Some(w) = r.labels.writer.as_deref() else {
                continue;
            };
            if r.labels.novelty_type.is_novel() || !m.known_writers.contains(w) {
                continue;
            }
            match features.vector(&r.id) {
                Some(v) => out.push((w.to_string(), v)),
                None => missing += 1,
            }
        }
    }
    (out, missing)
}

/// Samples that are novel to the agent: labeled novelty or a novel writer.
fn novel_samples(manifests: &[Manifest], features: &Indexed<'_>) -> Vec<FeatureVector> {
    manifests
        .iter()
        .flat_map(|m| {
            m.records.iter().filter(move |r| {
                r.labels.novelty_type.is_novel()
                    || r.labels.writer.as_deref().is_some_and(|w| m.novel_writers.contains(w))
            })
        })
        .filter_map(|r| features.vector(&r.id))
        .collect()
}

pub fn train(ctx: &Ctx, a: &TrainArgs) -> Result<Log> {
    let features = FeatureSet::load(&a.features).in_module("features")?;
    let manifests = load_manifests(&a.labels)?;
    let (samples, missing) = known_samples(&manifests, &Indexed::new(&features));
    let model = evm::fit_labeled(&samples, ctx.config.evm).in_module("evm")?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    model.save(&a.out).in_module("evm")?;
    Ok(vec![
        format!("{} training samples ({missing} without features)", samples.len()),
        format!("{} classes, {} extreme vectors", model.classes.len(), model.extreme_vector_count()),
    ])
}

// -------------------------------------------------------------- calibrate

#[derive(Args, Clone, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Manifests providing known and novel (known-unknown) samples.
    #[arg(long, required = true)]
    pub labels: Vec<PathBuf>,
    /// Where to write the calibrated model; the input is updated otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn calibrate(ctx: &Ctx, a: &CalibrateArgs) -> Result<Log> {
    let mut model = EvmModel::load(&a.model).in_module("evm")?;
    let features = FeatureSet::load(&a.features).in_module("features")?;
    let manifests = load_manifests(&a.labels)?;
    let index = Indexed::new(&features);
    let known: Vec<FeatureVector> = known_samples(&manifests, &index).0.into_iter().map(|(_, v)| v).collect();
    let novel = novel_samples(&manifests, &index);
    let cal = model.calibrate(&known, &novel).in_module("evm")?;
    let out = a.out.as_ref().unwrap_or(&a.model);
    model.save(out).in_module("evm")?;
    if !ctx.quiet {
        println!("{}", serde_json::to_string(&cal)?);
    }
    Ok(vec![
        format!("{} known and {} novel calibration samples", known.len(), novel.len()),
        format!(
            "threshold {} (FPR {:.4}, FNR {:.4})",
            cal.threshold, cal.false_positive_rate, cal.false_negative_rate
        ),
    ])
}

// -------------------------------------------------------------- gen-tests

#[derive(Args, Clone, Debug)]
pub struct GenTestsArgs {
    /// Manifests supplying sample pools. Without any, placeholder ids are
    /// generated so the design can be inspected.
    #[arg(long, alias = "pools")]
    pub manifest: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn placeholder_pools(config: &testgen::TestConfig) -> Pools {
    let longest = config.lengths.iter().copied().max().unwrap_or(0);
    let densest = config.densities.iter().copied().fold(0.0, f64::max);
    selfcheck::synthetic_pools(longest, (densest * longest as f64).ceil() as usize + 1)
}

pub fn gen_tests(ctx: &Ctx, a: &GenTestsArgs) -> Result<Log> {
    let config = &ctx.config.testgen;
    let specs = testgen::enumerate_specs(config, ctx.seed).in_module("testgen")?;
    let pools = if a.manifest.is_empty() {
        placeholder_pools(config)
    } else {
        Pools::from_manifests(&load_manifests(&a.manifest)?)
    };
    create_dir(&a.out)?;
    write_text(
        &a.out.join("specs.json"),
        &(serde_json::to_string_pretty(&specs)? + "\n"),
    )?;
    specs
        .par_iter()
        .try_for_each(|spec| -> Result<()> {
            let base = testgen::generate(spec, config, &pools).in_module("testgen")?;
            testgen::write_test(&a.out, &base).in_module("testgen")?;
            for k in 1..=config.reorderings {
                let r = testgen::reorder(&base, k).in_module("testgen")?;
                testgen::write_test(&a.out, &r).in_module("testgen")?;
            }
            Ok(())
        })?;
    let mut log = vec![format!(
        "{} specs x {} orderings",
        specs.len(),
        config.reorderings + 1
    )];
    if a.manifest.is_empty() {
        log.push("no manifests given: streams use placeholder ids".into());
    }
    Ok(log)
}

// -------------------------------------------------------------------- run

#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub tests: PathBuf,
    #[arg(long, alias = "agent")]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// External `{"id", "transcript"}` JSONL predictions.
    #[arg(long, alias = "predictions")]
    pub transcripts: Option<PathBuf>,
    /// Manifests whose alphabet defines character novelty of transcripts.
    #[arg(long)]
    pub labels: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn records_path(dir: &Path, test_id: &str) -> PathBuf {
    dir.join(format!("{test_id}.records.jsonl"))
}

pub fn run(ctx: &Ctx, a: &RunArgs) -> Result<Log> {
    let model = EvmModel::load(&a.model).in_module("evm")?;
    let features = FeatureSet::load(&a.features).in_module("features")?;
    let ids: BTreeSet<String> = features.records.iter().map(|r| r.id.clone()).collect();
    let mut agent = EvmAgent::new(model, features).in_module("runner")?;
    if let Some(p) = &a.transcripts {
        let transcripts = runner::ingest_external_predictions(p, Some(&ids)).in_module("runner")?;
        let alphabet: BTreeSet<char> = load_manifests(&a.labels)?
            .iter()
            .flat_map(|m| m.alphabet.iter().copied())
            .collect();
        agent = agent.with_transcripts(transcripts, alphabet).in_module("runner")?;
    }
    let tests = testgen::list_tests(&a.tests).in_module("testgen")?;
    create_dir(&a.out)?;
    let detections: Vec<(String, Option<usize>)> = tests
        .par_iter()
        .map(|id| -> Result<(String, Option<usize>)> {
            let s = testgen::read_stream(&testgen::stream_path(&a.tests, id)).in_module("testgen")?;
            let out = runner::run_ids(&agent, &s.test_id, &s.samples, s.batch_size, &ctx.config.detector)
                .in_module("runner")?;
            runner::write_records(&records_path(&a.out, id), &out.records).in_module("runner")?;
            Ok((s.test_id, out.detection))
        })
        .collect::<Result<_>>()?;
    let detected = detections.iter().filter(|(_, d)| d.is_some()).count();
    let map: BTreeMap<String, Option<usize>> = detections.into_iter().collect();
    write_text(&a.out.join("detections.json"), &(serde_json::to_string_pretty(&map)? + "\n"))?;
    Ok(vec![format!("{} tests run, {detected} with a detected change", tests.len())])
}

// ----------------------------------------------------------------- report

#[derive(Args, Clone, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub tests: PathBuf,
    #[arg(long)]
    pub runs: PathBuf,
    /// Manifests holding the oracle labels of every streamed sample.
    #[arg(long, required = true)]
    pub labels: Vec<PathBuf>,
    /// Model whose classes are the known writers.
    #[arg(long)]
    pub model: PathBuf,
    /// Style vectors for the characterization tables.
    #[arg(long)]
    pub styles: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn report(ctx: &Ctx, a: &ReportArgs) -> Result<Log> {
    let labels = labels_by_id(&load_manifests(&a.labels)?)?;
    let model = EvmModel::load(&a.model).in_module("evm")?;
    let known: Vec<String> = model.labels().into_iter().map(String::from).collect();
    let styles: Option<HashMap<String, StyleVector>> = match (&a.styles, ctx.config.report.skip_characterization) {
        (Some(p), false) => Some(read_styles(p)?.into_iter().collect()),
        _ => None,
    };
    let ids = testgen::list_tests(&a.tests).in_module("testgen")?;
    let tests: Vec<TestResult> = ids
        .par_iter()
        .map(|id| -> Result<TestResult> {
            Ok(TestResult {
                stream: testgen::read_test(&a.tests, id).in_module("testgen")?,
                records: runner::read_records(&records_path(&a.runs, id))
                    .with_context(|| format!("records of {id}"))
                    .in_module("runner")?,
            })
        })
        .collect::<Result<_>>()?;
    let input = ReportInput {
        tests: &tests,
        labels: &labels,
        known_writers: &known,
        styles: styles.as_ref(),
        nmi_variant: ctx.config.report.nmi_variant,
        seed: ctx.seed,
    };
    let rep = report::build_report(&input).in_module("metrics")?;
    rep.write_to(&a.out).in_module("metrics")?;
    let mut log = vec![format!("{} tests, {} groups", tests.len(), rep.rows.len())];
    log.extend(rep.warnings.iter().map(|w| format!("warning: {w}")));
    Ok(log)
}

// ------------------------------------------------------------------- plot

#[derive(Args, Clone, Debug)]
pub struct PlotArgs {
    /// `report.json` written by `report`.
    #[arg(long)]
    pub report: PathBuf,
    /// Output SVG.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn plot(_ctx: &Ctx, a: &PlotArgs) -> Result<Log> {
    let text = fs::read_to_string(&a.report).with_context(|| format!("reading {}", a.report.display()))?;
    let rep: Report = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", a.report.display()))
        .in_module("metrics")?;
    write_text(&a.out, &report::false_positive_svg(&rep.false_positives))?;
    Ok(vec![format!("{} density points", rep.false_positives.len())])
}
