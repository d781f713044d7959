//! Grouped score tables, the false-positive series and its plot.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cluster::{characterize, CharacterizationSample, CharacterizationTable, EVALUATION_WINDOW};
use super::{char_accuracy, csv_field, nmi_with, open_set_label, pearson, spearman, MetricsError, NmiVariant};
use crate::corpus::{NoveltyType, SampleLabels};
use crate::runner::PredictionRecord;
use crate::style_metrics::StyleVector;
use crate::testgen::TestStream;

pub const COLUMNS: [&str; 4] = ["Novelty Detection Acc.", "Mean Char. Acc.", "NMI", "Writer ID Acc."];
pub const NO_NOVELTY: &str = "No Novelty";
/// Rank cut for writer identification accuracy.
pub const WRITER_TOP_K: usize = 3;

/// A test with the records an agent produced for it.
#[derive(Clone, Debug, PartialEq)]
pub struct TestResult {
    pub stream: TestStream,
    pub records: Vec<PredictionRecord>,
}

pub struct ReportInput<'a> {
    pub tests: &'a [TestResult],
    pub labels: &'a HashMap<String, SampleLabels>,
    /// Writer classes known to the agent, in model order.
    pub known_writers: &'a [String],
    pub styles: Option<&'a HashMap<String, StyleVector>>,
    pub nmi_variant: NmiVariant,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub samples: usize,
    pub novelty_detection_accuracy: f64,
    pub mean_char_accuracy: Option<f64>,
    pub nmi: f64,
    pub writer_id_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalsePositivePoint {
    pub density: f64,
    pub tests: usize,
    pub mean_false_positives: f64,
    pub total_false_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub split: Vec<ReportRow>,
    pub false_positives: Vec<FalsePositivePoint>,
    pub false_positive_correlation: Option<Correlation>,
    pub characterization: Option<CharacterizationTable>,
    pub warnings: Vec<String>,
}

struct Scored<'a> {
    record: &'a PredictionRecord,
    is_novel: bool,
    writer: String,
    transcript: Option<&'a str>,
}

fn group_key(labels: Option<&SampleLabels>, is_novel: bool) -> String {
    if !is_novel {
        return NO_NOVELTY.to_string();
    }
    match labels {
        Some(l) if !l.novelty_subtype.is_empty() => format!("{}: {}", l.novelty_type, l.novelty_subtype),
        Some(l) => l.novelty_type.to_string(),
        None => "Unlabeled".to_string(),
    }
}

fn score_row(group: &str, items: &[Scored<'_>], variant: NmiVariant) -> Result<ReportRow, MetricsError> {
    let n = items.len();
    let detection = items.iter().filter(|s| s.record.novel == s.is_novel).count() as f64 / n as f64;
    let chars: Vec<f64> = items
        .iter()
        .filter_map(|s| Some(char_accuracy(s.transcript?, s.record.transcript.as_deref()?)))
        .collect();
    let top1: Vec<&str> = items
        .iter()
        .map(|s| s.record.top_k.first().map_or("", String::as_str))
        .collect();
    let truth: Vec<&str> = items.iter().map(|s| s.writer.as_str()).collect();
    let hits = items
        .iter()
        .filter(|s| {
            let k = WRITER_TOP_K.min(s.record.top_k.len());
            s.record.top_k[..k].contains(&s.writer)
        })
        .count();
    Ok(ReportRow {
        group: group.to_string(),
        samples: n,
        novelty_detection_accuracy: detection,
        mean_char_accuracy: (!chars.is_empty()).then(|| chars.iter().sum::<f64>() / chars.len() as f64),
        nmi: nmi_with(&top1, &truth, variant)?,
        writer_id_accuracy: hits as f64 / n as f64,
    })
}

/// Non-novel samples flagged novel anywhere in the stream.
pub fn false_positives(stream: &TestStream, records: &[PredictionRecord]) -> usize {
    records
        .iter()
        .filter(|r| r.novel && !stream.is_novel.get(r.position).copied().unwrap_or(false))
        .count()
}

pub fn build_report(input: &ReportInput<'_>) -> Result<Report, MetricsError> {
    let mut tests: Vec<&TestResult> = input.tests.iter().collect();
    tests.sort_by_key(|t| t.stream.test_id());
    let mut warnings = Vec::new();
    let mut groups: BTreeMap<String, Vec<Scored<'_>>> = BTreeMap::new();
    let mut split: BTreeMap<&str, Vec<Scored<'_>>> = BTreeMap::new();
    let mut fp_by_density: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut fp_pairs = (Vec::new(), Vec::new());
    let mut char_samples = Vec::new();
    let mut types_seen: BTreeMap<NoveltyType, usize> = BTreeMap::new();

    for t in &tests {
        let s = &t.stream;
        *types_seen.entry(s.spec.novelty_type).or_default() += 0;
        let window_start = t.records.len().saturating_sub(EVALUATION_WINDOW);
        for (i, r) in t.records.iter().enumerate() {
            let is_novel = s.is_novel.get(r.position).copied().unwrap_or(false);
            let labels = input.labels.get(&r.id);
            if labels.is_none() {
                warnings.push(format!("{}: no labels for sample {}", s.test_id(), r.id));
            }
            let writer = labels
                .and_then(|l| l.writer.as_deref())
                .map_or_else(|| open_set_label("", input.known_writers), |w| open_set_label(w, input.known_writers));
            let scored = || Scored {
                record: r,
                is_novel,
                writer: writer.clone(),
                transcript: labels.and_then(|l| l.transcript.as_deref()),
            };
            if is_novel {
                if let Some(l) = labels {
                    *types_seen.entry(l.novelty_type).or_default() += 1;
                }
            }
            groups.entry(group_key(labels, is_novel)).or_default().push(scored());
            split.entry(if is_novel { "Novel" } else { "Non-novel" }).or_default().push(scored());
            if let (Some(styles), Some(l)) = (input.styles, labels) {
                if i >= window_start {
                    if let Some(style) = styles.get(&r.id) {
                        let truth = if is_novel {
                            format!("{}: {}", l.novelty_type, l.novelty_subtype)
                        } else {
                            l.writer.clone().unwrap_or_default()
                        };
                        char_samples.push(CharacterizationSample {
                            novelty_type: if is_novel { l.novelty_type } else { NoveltyType::None },
                            truth,
                            style: *style,
                            category: vec![f64::from(u8::from(r.novel))],
                        });
                    }
                }
            }
        }
        let fp = false_positives(s, &t.records);
        fp_by_density.entry(s.spec.novelty_density.to_bits()).or_default().push(fp);
        fp_pairs.0.push(s.spec.novelty_density);
        fp_pairs.1.push(fp as f64);
    }

    for (t, n) in &types_seen {
        if *n == 0 {
            warnings.push(format!("no novel {t} samples; row omitted"));
        }
    }
    let rows = groups
        .iter()
        .map(|(g, items)| score_row(g, items, input.nmi_variant))
        .collect::<Result<Vec<_>, _>>()?;
    let split = split
        .iter()
        .map(|(g, items)| score_row(g, items, input.nmi_variant))
        .collect::<Result<Vec<_>, _>>()?;
    let false_positives = fp_by_density
        .into_iter()
        .map(|(bits, fps)| FalsePositivePoint {
            density: f64::from_bits(bits),
            tests: fps.len(),
            mean_false_positives: fps.iter().sum::<usize>() as f64 / fps.len() as f64,
            total_false_positives: fps.iter().sum(),
        })
        .collect();
    let false_positive_correlation = match (pearson(&fp_pairs.0, &fp_pairs.1), spearman(&fp_pairs.0, &fp_pairs.1)) {
        (Ok(p), Ok(s)) => Some(Correlation { pearson: p, spearman: s }),
        _ => None,
    };
    let characterization = input.styles.map(|_| {
        let mut table = characterize(&char_samples, input.seed);
        warnings.append(&mut table.warnings);
        table
    });
    Ok(Report {
        columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
        split,
        false_positives,
        false_positive_correlation,
        characterization,
        warnings,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("Group,Samples,{}\n", COLUMNS.join(","));
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&r.group),
            r.samples,
            fmt(r.novelty_detection_accuracy),
            r.mean_char_accuracy.map(fmt).unwrap_or_default(),
            fmt(r.nmi),
            fmt(r.writer_id_accuracy),
        ));
    }
    out
}

pub fn false_positives_to_csv(points: &[FalsePositivePoint]) -> String {
    let mut out = String::from("density,tests,mean_false_positives,total_false_positives\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.density,
            p.tests,
            fmt(p.mean_false_positives),
            p.total_false_positives
        ));
    }
    out
}

fn write(path: &Path, text: &str) -> Result<(), MetricsError> {
    fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Writes `report.csv`, `split.csv`, `false_positives.csv`,
    /// `characterization.csv` (when computed) and `report.json`.
    pub fn write_to(&self, dir: &Path) -> Result<(), MetricsError> {
        fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write(&dir.join("report.csv"), &rows_to_csv(&self.rows))?;
        write(&dir.join("split.csv"), &rows_to_csv(&self.split))?;
        write(&dir.join("false_positives.csv"), &false_positives_to_csv(&self.false_positives))?;
        if let Some(c) = &self.characterization {
            write(&dir.join("characterization.csv"), &c.to_csv())?;
        }
        write(&dir.join("report.json"), &self.to_json())
    }
}

/// Line chart of mean false positives against novelty proportion.
pub fn false_positive_svg(points: &[FalsePositivePoint]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 50.0;
    let xmax = points.iter().map(|p| p.density).fold(1e-9, f64::max);
    let ymax = points.iter().map(|p| p.mean_false_positives).fold(1e-9, f64::max);
    let sx = |x: f64| M + x / xmax * (W - 2.0 * M);
    let sy = |y: f64| H - M - y / ymax * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = H - M,
        x2 = W - M
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">Proportion of novelty</text>\n",
        W / 2.0,
        H - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {})\">Mean false positives</text>\n",
        H / 2.0,
        H / 2.0
    ));
    let path: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx(p.density), sy(p.mean_false_positives)))
        .collect();
    if !path.is_empty() {
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
    }
    for p in points {
        let (x, y) = (sx(p.density), sy(p.mean_false_positives));
        s.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"steelblue\"/>\n"));
        s.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
            H - M + 14.0,
            p.density
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"10\">{ymax:.2}</text>\n",
        M - 4.0,
        sy(ymax) + 4.0
    ));
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Difficulty;
    use crate::testgen::{DistributionType, TestSpec};

    fn fixture(correct: bool) -> (Vec<TestResult>, HashMap<String, SampleLabels>, Vec<String>) {
        let known = vec!["w0".to_string(), "w1".to_string()];
        let mut labels = HashMap::new();
        let mut samples = Vec::new();
        let mut is_novel = Vec::new();
        let mut records = Vec::new();
        for i in 0..40 {
            let novel = i >= 20 && i % 2 == 0;
            let id = format!("s{i}");
            let writer = if novel { "w9" } else if i % 3 == 0 { "w0" } else { "w1" };
            labels.insert(
                id.clone(),
                SampleLabels {
                    writer: Some(writer.into()),
                    transcript: Some("abc".into()),
                    novelty_type: if novel { NoveltyType::Writer } else { NoveltyType::None },
                    novelty_subtype: if novel { "Novel Writer".into() } else { String::new() },
                    difficulty: if novel { Difficulty::Easy } else { Difficulty::Unassigned },
                    ..Default::default()
                },
            );
            let truth = if novel { "NOVEL" } else { writer };
            let top: Vec<String> = if correct {
                let mut t = vec![truth.to_string()];
                t.extend(["w0", "w1", "NOVEL"].iter().filter(|x| **x != truth).map(|x| x.to_string()));
                t
            } else {
                vec!["w1".into(), "w0".into(), "NOVEL".into()]
            };
            records.push(PredictionRecord {
                id: id.clone(),
                position: i,
                probabilities: vec![],
                top_k: top,
                raw_novelty: 0.0,
                weighted_novelty: 0.0,
                novel: if correct { novel } else { !novel },
                transcript: Some(if correct { "abc".into() } else { "xyz".into() }),
                transcript_novel: None,
                world_changed: false,
            });
            samples.push(id);
            is_novel.push(novel);
        }
        let stream = TestStream {
            spec: TestSpec {
                index: 0,
                mean_introduction_point: 0.5,
                novelty_density: 0.5,
                novelty_type: NoveltyType::Writer,
                difficulty: Difficulty::Easy,
                distribution_type: DistributionType::Flat,
                test_length: 40,
                seed: 0,
                reorder_index: 0,
            },
            samples,
            introduction_index: 20,
            is_novel,
            batch_size: 16,
        };
        (vec![TestResult { stream, records }], labels, known)
    }

    #[test]
    fn all_correct_records_score_one() {
        let (tests, labels, known) = fixture(true);
        let r = build_report(&ReportInput {
            tests: &tests,
            labels: &labels,
            known_writers: &known,
            styles: None,
            nmi_variant: NmiVariant::Geometric,
            seed: 0,
        })
        .unwrap();
        assert_eq!(r.columns, COLUMNS.to_vec());
        assert_eq!(r.rows.len(), 2);
        for row in r.rows.iter().chain(&r.split) {
            assert_eq!(row.novelty_detection_accuracy, 1.0);
            assert_eq!(row.mean_char_accuracy, Some(1.0));
            assert_eq!(row.writer_id_accuracy, 1.0);
        }
        // the no-novelty group holds two writers, so its NMI is informative
        let nn = r.rows.iter().find(|x| x.group == NO_NOVELTY).unwrap();
        assert_eq!(nn.nmi, 1.0);
        assert_eq!(r.false_positives[0].total_false_positives, 0);
        assert!(rows_to_csv(&r.rows).starts_with("Group,Samples,Novelty Detection Acc.,Mean Char. Acc.,NMI,Writer ID Acc.\n"));
    }

    #[test]
    fn wrong_records_and_plot() {
        let (tests, labels, known) = fixture(false);
        let r = build_report(&ReportInput {
            tests: &tests,
            labels: &labels,
            known_writers: &known,
            styles: None,
            nmi_variant: NmiVariant::Geometric,
            seed: 0,
        })
        .unwrap();
        let nn = r.rows.iter().find(|x| x.group == NO_NOVELTY).unwrap();
        assert_eq!(nn.novelty_detection_accuracy, 0.0);
        assert_eq!(nn.mean_char_accuracy, Some(0.0));
        assert_eq!(r.false_positives[0].total_false_positives, 30);
        let svg = false_positive_svg(&r.false_positives);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
        let dir = tempfile::tempdir().unwrap();
        r.write_to(dir.path()).unwrap();
        assert!(dir.path().join("report.json").exists());
    }
}
