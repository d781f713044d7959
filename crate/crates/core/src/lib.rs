//! Open-world handwriting evaluation toolkit.
//!
//! Style measurement and ontology, novelty injection, HOG features, the
//! Extreme Value Machine open-set classifier, novelty-stream test generation,
//! a streaming runner with change detection, and the scoring suite.

pub mod augment;
pub mod corpus;
pub mod evm;
pub mod features;
pub mod metrics;
pub mod ontology;
pub mod runner;
pub mod seed;
pub mod selfcheck;
pub mod style_metrics;
pub mod synth;
pub mod testgen;

pub use corpus::{
    Appearance, Difficulty, LineImage, LineSample, Manifest, ManifestRecord, NoveltyType,
    SampleLabels, Verdict,
};
