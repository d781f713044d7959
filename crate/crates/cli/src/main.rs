//! `scriptdrift`: command-line pipeline over the evaluation toolkit.

mod commands;
mod config;
mod pipeline;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::LazyLock;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use scriptdrift_core::corpus::MANIFEST_VERSION;
use scriptdrift_core::evm::{io as evm_io, EvmModel};
use scriptdrift_core::selfcheck::{self, SelfcheckOptions, CRITERIA, SUITE_LIMIT};

use commands::*;
use config::Config;

static VERSION: LazyLock<String> = LazyLock::new(|| {
    format!(
        "{} (model format {} v{}, manifest v{MANIFEST_VERSION})",
        env!("CARGO_PKG_VERSION"),
        String::from_utf8_lossy(evm_io::MAGIC),
        evm_io::FORMAT_VERSION,
    )
});

#[derive(Parser, Debug)]
#[command(name = "scriptdrift", version = VERSION.as_str(), about = "Open-world handwriting evaluation pipeline")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Root seed; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// JSON config file. `SCRIPTDRIFT_<SECTION>__<KEY>` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Clone, Debug)]
pub enum Command {
    /// Write a synthetic handwriting corpus for trying the pipeline.
    DemoCorpus(DemoCorpusArgs),
    /// Measure style vectors of every sample in a manifest.
    Measure(MeasureArgs),
    /// Build the writer-style knowledge graph and its consistency.
    Graph(GraphArgs),
    /// Writer dissimilarity matrix over mean styles.
    Distances(DistancesArgs),
    /// Generate a pool of novel samples from a base manifest.
    Inject(InjectArgs),
    /// Extract HOG features for one or more manifests.
    Featurize(FeaturizeArgs),
    /// Fit an EVM writer model.
    Train(TrainArgs),
    /// Set the model's novelty threshold at the equal error rate.
    Calibrate(CalibrateArgs),
    /// Enumerate the test design and write the streams.
    GenTests(GenTestsArgs),
    /// Run the agent over every test stream.
    Run(RunArgs),
    /// Score runs against the oracles.
    Report(ReportArgs),
    /// Plot false positives against novelty proportion.
    Plot(PlotArgs),
    /// Run the synthetic acceptance suite.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Clone, Debug)]
pub struct SelfcheckArgs {
    /// Comma-separated criterion ids to run (default: all).
    #[arg(long, value_delimiter = ',')]
    only: Vec<u8>,
    /// EVM model file or plain number replacing the calibrated threshold
    /// of the open-set benchmark.
    #[arg(long)]
    threshold_file: Option<PathBuf>,
    /// Also write the timing-free verdict lines here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Skip the CLI pipeline rerun of the determinism criterion.
    #[arg(long)]
    skip_pipeline: bool,
}

/// An error tagged with the module that raised it.
#[derive(Debug)]
pub struct ModuleError {
    pub module: &'static str,
    pub source: anyhow::Error,
}

impl fmt::Display for ModuleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(&self.source))
    }
}

/// Joins an error chain with `: `, skipping causes whose text an outer
/// message already quotes.
pub fn render(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

impl std::error::Error for ModuleError {}

pub trait InModule<T> {
    fn in_module(self, module: &'static str) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> InModule<T> for std::result::Result<T, E> {
    fn in_module(self, module: &'static str) -> Result<T> {
        self.map_err(|e| {
            let source = e.into();
            if source.is::<ModuleError>() {
                source
            } else {
                anyhow::Error::new(ModuleError { module, source })
            }
        })
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::DemoCorpus(_) => "demo-corpus",
            Command::Measure(_) => "measure",
            Command::Graph(_) => "graph",
            Command::Distances(_) => "distances",
            Command::Inject(_) => "inject",
            Command::Featurize(_) => "featurize",
            Command::Train(_) => "train",
            Command::Calibrate(_) => "calibrate",
            Command::GenTests(_) => "gen-tests",
            Command::Run(_) => "run",
            Command::Report(_) => "report",
            Command::Plot(_) => "plot",
            Command::Selfcheck(_) => "selfcheck",
        }
    }

    /// Run logs sit inside directory outputs and beside file outputs.
    fn log_path(&self) -> Option<PathBuf> {
        let beside = |p: &Path| {
            let mut s = p.as_os_str().to_owned();
            s.push(".log");
            PathBuf::from(s)
        };
        match self {
            Command::Measure(a) => Some(beside(&a.out)),
            Command::Graph(a) => Some(beside(&a.out)),
            Command::Distances(a) => Some(beside(&a.out)),
            Command::Featurize(a) => Some(beside(&a.out)),
            Command::Train(a) => Some(beside(&a.out)),
            Command::Calibrate(a) => Some(beside(a.out.as_ref().unwrap_or(&a.model))),
            Command::Plot(a) => Some(beside(&a.out)),
            Command::DemoCorpus(a) => Some(a.out.join("run.log")),
            Command::Inject(a) => Some(a.out.join("run.log")),
            Command::GenTests(a) => Some(a.out.join("run.log")),
            Command::Run(a) => Some(a.out.join("run.log")),
            Command::Report(a) => Some(a.out.join("run.log")),
            Command::Selfcheck(a) => a.report.as_ref().map(|p| beside(p)),
        }
    }
}

/// Runs one subcommand and writes its run log. The log holds no paths or
/// timings, so reruns produce identical logs.
pub fn execute(ctx: &Ctx, command: &Command) -> Result<()> {
    let lines = match command {
        Command::DemoCorpus(a) => demo_corpus(ctx, a),
        Command::Measure(a) => measure(ctx, a),
        Command::Graph(a) => graph(ctx, a),
        Command::Distances(a) => distances(ctx, a),
        Command::Inject(a) => inject(ctx, a),
        Command::Featurize(a) => featurize(ctx, a),
        Command::Train(a) => train(ctx, a),
        Command::Calibrate(a) => calibrate(ctx, a),
        Command::GenTests(a) => gen_tests(ctx, a),
        Command::Run(a) => run(ctx, a),
        Command::Report(a) => report(ctx, a),
        Command::Plot(a) => plot(ctx, a),
        Command::Selfcheck(a) => selfcheck_command(ctx, a),
    }?;
    for l in &lines {
        log::info!("{l}");
    }
    if let Some(path) = command.log_path() {
        let mut text = format!(
            "scriptdrift {}\ncommand: {}\nseed: {}\nconfig:\n{}\n---\n",
            VERSION.as_str(),
            command.name(),
            ctx.seed,
            ctx.config.to_pretty_json()
        );
        for l in lines {
            text.push_str(&l);
            text.push('\n');
        }
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn read_threshold(path: &Path) -> Result<f64> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(evm_io::MAGIC) {
        let model = EvmModel::from_bytes(&bytes, path).in_module("evm")?;
        return model
            .threshold
            .ok_or_else(|| anyhow!("{} holds an uncalibrated model", path.display()))
            .in_module("evm");
    }
    let text = String::from_utf8_lossy(&bytes);
    text.trim()
        .parse()
        .with_context(|| format!("{} holds neither a model nor a threshold", path.display()))
}

fn selfcheck_command(ctx: &Ctx, a: &SelfcheckArgs) -> Result<Log> {
    let options = SelfcheckOptions {
        seed: ctx.seed,
        threshold_override: a.threshold_file.as_deref().map(read_threshold).transpose()?,
    };
    let ids: Vec<u8> = if a.only.is_empty() {
        CRITERIA.iter().map(|c| c.0).collect()
    } else {
        a.only.clone()
    };
    let start = Instant::now();
    let mut results = Vec::with_capacity(ids.len());
    for id in ids {
        let mut r = selfcheck::run_one(id, &options).in_module("selfcheck")?;
        if id == 11 && !a.skip_pipeline {
            let t = Instant::now();
            match pipeline::rerun_check(ctx.seed) {
                Ok(files) => r.detail.push_str(&format!("; CLI pipeline rerun identical over {files} files")),
                Err(e) => {
                    r.passed = false;
                    r.detail.push_str(&format!("; CLI pipeline rerun: {}", render(&e)));
                }
            }
            r.elapsed += t.elapsed();
        }
        println!("{r}");
        results.push(r);
    }
    let elapsed = start.elapsed();
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.id.to_string()).collect();
    println!(
        "{}/{} criteria passed in {:.2} s (suite limit {} s)",
        results.len() - failed.len(),
        results.len(),
        elapsed.as_secs_f64(),
        SUITE_LIMIT.as_secs()
    );
    let lines: Log = results.iter().map(|r| r.summary()).collect();
    if let Some(p) = &a.report {
        std::fs::write(p, lines.join("\n") + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    if !failed.is_empty() {
        return Err(anyhow!("criteria failed: {}", failed.join(", "))).in_module("selfcheck");
    }
    if elapsed > SUITE_LIMIT {
        return Err(anyhow!("suite took {:.1} s", elapsed.as_secs_f64())).in_module("selfcheck");
    }
    Ok(lines)
}

fn real_main() -> Result<ExitCode> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let mut config = Config::load(cli.config.as_deref(), std::env::vars()).in_module("config")?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if cli.dump_config {
        println!("{}", config.to_pretty_json());
        return Ok(ExitCode::SUCCESS);
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required; see --help");
        return Ok(ExitCode::from(2));
    };
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let ctx = Ctx {
        seed: config.seed,
        config,
        quiet: false,
    };
    execute(&ctx, &command)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            let module = e
                .chain()
                .find_map(|c| c.downcast_ref::<ModuleError>())
                .map_or("cli", |m| m.module);
            eprintln!("error[{module}]: {}", render(&e));
            ExitCode::FAILURE
        }
    }
}
