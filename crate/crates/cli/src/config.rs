//! Tool-wide configuration: one JSON file, defaults for every key,
//! environment overrides on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use scriptdrift_core::evm::EvmHyperparams;
use scriptdrift_core::metrics::NmiVariant;
use scriptdrift_core::runner::DetectorConfig;
use scriptdrift_core::testgen::TestConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "SCRIPTDRIFT_";
/// Separates nesting levels in environment override names.
pub const ENV_SEPARATOR: &str = "__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub schema_version: u32,
    pub seed: u64,
    pub features: FeaturesConfig,
    pub evm: EvmHyperparams,
    pub inject: InjectConfig,
    pub testgen: TestConfig,
    pub detector: DetectorConfig,
    pub report: ReportConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            features: FeaturesConfig::default(),
            evm: EvmHyperparams::default(),
            inject: InjectConfig::default(),
            testgen: TestConfig::default(),
            detector: DetectorConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesConfig {
    /// `mean-hog`, `m-mean-hog` or `m-mean-hog:<M>`.
    pub extractor: String,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            extractor: "m-mean-hog".into(),
        }
    }
}

/// Counts for the standard novelty recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectConfig {
    pub background: usize,
    pub pen: usize,
    pub letter: usize,
    /// Novel-writer lines copied into the pool.
    pub writer: usize,
    pub replacement: bool,
    /// Directory with `background/` and `pen/` textures; procedural
    /// textures are used when unset.
    pub assets: Option<PathBuf>,
}

impl Default for InjectConfig {
    fn default() -> Self {
        InjectConfig {
            background: 30,
            pen: 30,
            letter: 30,
            writer: 0,
            replacement: false,
            assets: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub nmi_variant: NmiVariant,
    /// Skip the style characterization even when styles are supplied.
    pub skip_characterization: bool,
}

impl Config {
    /// Defaults, then the file (if any), then environment overrides.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Config> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                // validate the file on its own so errors point at it
                serde_json::from_value::<Config>(v.clone()).with_context(|| format!("in {}", p.display()))?;
                v
            }
            None => serde_json::to_value(Config::default())?,
        };
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            apply_override(&mut value, &key[ENV_PREFIX.len()..], &raw)?;
        }
        let config: Config = serde_json::from_value(value).context("after environment overrides")?;
        if config.schema_version != SCHEMA_VERSION {
            bail!(
                "config schema version {} is not supported (expected {SCHEMA_VERSION})",
                config.schema_version
            );
        }
        Ok(config)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets the nested key named by `name` (`EVM__TAIL_SIZE` is `evm.tail_size`).
/// Values parse as JSON, falling back to a plain string.
fn apply_override(root: &mut Value, name: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = name.split(ENV_SEPARATOR).map(str::to_lowercase).collect();
    if path.iter().any(String::is_empty) {
        bail!("malformed override {ENV_PREFIX}{name}");
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = root;
    for key in parents {
        let Value::Object(map) = node else {
            bail!("override {ENV_PREFIX}{name}: {key:?} is not a section");
        };
        node = map.entry(key.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    let Value::Object(map) = node else {
        bail!("override {ENV_PREFIX}{name}: parent is not a section");
    };
    map.insert(last.clone(), parsed);
    Ok(())
}
