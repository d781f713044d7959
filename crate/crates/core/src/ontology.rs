//! Style binning, the writer-style knowledge graph, writer dissimilarity
//! and difficulty scoring.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Difficulty, LineImage, NoveltyType};
use crate::style_metrics::{self, StyleAttribute, StyleError, StyleVector};

#[derive(Debug, thiserror::Error)]
pub enum OntologyError {
    #[error("{attribute}: need at least {needed} distinct values, found {found}")]
    TooFewDistinct {
        attribute: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("sample {0:?} has no style vector")]
    MissingStyle(String),
    #[error("writer {0:?} has no samples")]
    EmptyWriter(String),
    #[error("no known writers to compare against")]
    NoKnownWriters,
    #[error("novelty type {0} has no difficulty")]
    NotNovel(NoveltyType),
    #[error(transparent)]
    Style(#[from] StyleError),
}

/// Bins per attribute.
pub fn bin_count(attr: StyleAttribute) -> usize {
    match attr {
        StyleAttribute::SlantAngle => 4,
        _ => 3,
    }
}

/// Equal-frequency bin edges per style attribute.
///
/// `edges[attr]` holds `bins - 1` strictly increasing upper edges; a value
/// belongs to the first bin whose edge is not below it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    pub edges: BTreeMap<StyleAttribute, Vec<f64>>,
}

fn nearest_rank_edges(sorted: &[f64], bins: usize) -> Vec<f64> {
    let n = sorted.len();
    (1..bins)
        .map(|k| sorted[(k * n).div_ceil(bins) - 1])
        .collect()
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

/// Quantile edges for one attribute. Falls back to ranks over distinct
/// values when repeated values make the edges collide.
pub fn quantile_edges(values: &[f64], bins: usize, attribute: &'static str) -> Result<Vec<f64>, OntologyError> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < bins {
        return Err(OntologyError::TooFewDistinct {
            attribute,
            needed: bins,
            found: distinct.len(),
        });
    }
    let edges = nearest_rank_edges(&sorted, bins);
    if strictly_increasing(&edges) {
        return Ok(edges);
    }
    Ok(nearest_rank_edges(&distinct, bins))
}

impl BinningScheme {
    pub fn bin(&self, attr: StyleAttribute, value: f64) -> usize {
        self.edges[&attr].iter().take_while(|&&e| value > e).count()
    }

    pub fn bins_of(&self, style: &StyleVector) -> [usize; 4] {
        StyleAttribute::ALL.map(|a| self.bin(a, style.get(a)))
    }
}

pub fn fit_bins(styles: &[StyleVector]) -> Result<BinningScheme, OntologyError> {
    let mut edges = BTreeMap::new();
    for attr in StyleAttribute::ALL {
        let values: Vec<f64> = styles.iter().map(|s| s.get(attr)).collect();
        edges.insert(attr, quantile_edges(&values, bin_count(attr), attr.name())?);
    }
    Ok(BinningScheme { edges })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Sample { id: String, writer: String },
    AttributeBin { attribute: StyleAttribute, bin: usize },
    Writer { id: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Measured,
    ModalStyle,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub kind: EdgeKind,
}

/// Samples and writers linked through binned style attributes.
#[derive(Clone, Debug, Default, Serialize)]
pub struct KnowledgeGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    #[serde(skip)]
    index: BTreeMap<Node, usize>,
}

impl KnowledgeGraph {
    fn node(&mut self, node: Node) -> usize {
        if let Some(&i) = self.index.get(&node) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(node.clone());
        self.index.insert(node, i);
        i
    }

    pub fn node_index(&self, node: &Node) -> Option<usize> {
        self.index.get(node).copied()
    }

    pub fn outgoing(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.source == node)
    }

    pub fn incoming(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.target == node)
    }

    fn bin_of(&self, edge: &Edge) -> (StyleAttribute, usize) {
        match &self.nodes[edge.target] {
            Node::AttributeBin { attribute, bin } => (*attribute, *bin),
            other => unreachable!("style edge points at {other:?}"),
        }
    }

    /// Modal bin per attribute for a writer node.
    pub fn modal_bins(&self, writer: &str) -> Option<BTreeMap<StyleAttribute, usize>> {
        let w = self.node_index(&Node::Writer { id: writer.to_string() })?;
        Some(self.outgoing(w).map(|e| self.bin_of(e)).collect())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("graph serializes")
    }
}

/// One sample's writer plus its id, for graph construction.
#[derive(Clone, Debug)]
pub struct GraphSample {
    pub id: String,
    pub writer: String,
}

/// Builds the graph. Writer modal bins are the most frequent bin over the
/// writer's samples, ties going to the lower bin.
pub fn build_graph(
    samples: &[GraphSample],
    styles: &BTreeMap<String, StyleVector>,
    bins: &BinningScheme,
) -> Result<KnowledgeGraph, OntologyError> {
    let mut g = KnowledgeGraph::default();
    let mut counts: BTreeMap<&str, BTreeMap<StyleAttribute, Vec<usize>>> = BTreeMap::new();
    for s in samples {
        let style = styles
            .get(&s.id)
            .ok_or_else(|| OntologyError::MissingStyle(s.id.clone()))?;
        let sn = g.node(Node::Sample {
            id: s.id.clone(),
            writer: s.writer.clone(),
        });
        let per_attr = counts.entry(s.writer.as_str()).or_default();
        for (attr, bin) in StyleAttribute::ALL.into_iter().zip(bins.bins_of(style)) {
            let bn = g.node(Node::AttributeBin {
                attribute: attr,
                bin,
            });
            g.edges.push(Edge {
                source: sn,
                target: bn,
                kind: EdgeKind::Measured,
            });
            let hist = per_attr
                .entry(attr)
                .or_insert_with(|| vec![0; bin_count(attr)]);
            hist[bin] += 1;
        }
    }
    for (writer, per_attr) in counts {
        let wn = g.node(Node::Writer {
            id: writer.to_string(),
        });
        for (attr, hist) in per_attr {
            let modal = hist
                .iter()
                .enumerate()
                .fold((0usize, 0usize), |best, (b, &c)| if c > best.1 { (b, c) } else { best })
                .0;
            let bn = g.node(Node::AttributeBin {
                attribute: attr,
                bin: modal,
            });
            g.edges.push(Edge {
                source: wn,
                target: bn,
                kind: EdgeKind::ModalStyle,
            });
        }
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Consistency {
    pub fraction: f64,
    /// Sample-attribute edges that disagree with the writer's modal bin.
    pub mismatches: Vec<(String, StyleAttribute)>,
}

pub fn consistency(graph: &KnowledgeGraph) -> Consistency {
    let mut total = 0usize;
    let mut mismatches = Vec::new();
    let mut modal_cache: BTreeMap<&str, BTreeMap<StyleAttribute, usize>> = BTreeMap::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        let Node::Sample { id, writer } = node else {
            continue;
        };
        let modal = modal_cache
            .entry(writer.as_str())
            .or_insert_with(|| graph.modal_bins(writer).unwrap_or_default());
        for e in graph.outgoing(i) {
            let (attr, bin) = graph.bin_of(e);
            total += 1;
            if modal.get(&attr) != Some(&bin) {
                mismatches.push((id.clone(), attr));
            }
        }
    }
    let fraction = if total == 0 {
        1.0
    } else {
        1.0 - mismatches.len() as f64 / total as f64
    };
    Consistency {
        fraction,
        mismatches,
    }
}

fn mean_style(styles: &[StyleVector]) -> [f64; 4] {
    let mut m = [0.0; 4];
    for s in styles {
        for (acc, v) in m.iter_mut().zip(s.style4()) {
            *acc += v;
        }
    }
    m.map(|v| v / styles.len() as f64)
}

/// Per-attribute min-max scaling fitted on writer means.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleNormalizer {
    min: [f64; 4],
    range: [f64; 4],
}

impl StyleNormalizer {
    pub fn fit(means: &[[f64; 4]]) -> Self {
        let mut min = [f64::INFINITY; 4];
        let mut max = [f64::NEG_INFINITY; 4];
        for m in means {
            for k in 0..4 {
                min[k] = min[k].min(m[k]);
                max[k] = max[k].max(m[k]);
            }
        }
        let range = std::array::from_fn(|k| max[k] - min[k]);
        Self { min, range }
    }

    /// Zero-range attributes map to 0.
    pub fn apply(&self, v: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|k| {
            if self.range[k] > 0.0 {
                (v[k] - self.min[k]) / self.range[k]
            } else {
                0.0
            }
        })
    }
}

pub fn l1(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Symmetric writer dissimilarity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct WriterDistanceMatrix {
    pub writers: Vec<String>,
    values: Vec<f64>,
}

impl WriterDistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.writers.len() + j]
    }

    pub fn by_id(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.writers.iter().position(|w| w == a)?;
        let j = self.writers.iter().position(|w| w == b)?;
        Some(self.get(i, j))
    }

    /// CSV with a writer-id header row and first column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("writer");
        for w in &self.writers {
            out.push(',');
            out.push_str(w);
        }
        out.push('\n');
        for (i, w) in self.writers.iter().enumerate() {
            out.push_str(w);
            for j in 0..self.writers.len() {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// L1 distance between min-max normalized writer mean styles.
pub fn writer_distances(
    groups: &BTreeMap<String, Vec<StyleVector>>,
) -> Result<WriterDistanceMatrix, OntologyError> {
    let mut means = Vec::with_capacity(groups.len());
    for (w, styles) in groups {
        if styles.is_empty() {
            return Err(OntologyError::EmptyWriter(w.clone()));
        }
        means.push(mean_style(styles));
    }
    let norm = StyleNormalizer::fit(&means);
    let scaled: Vec<[f64; 4]> = means.iter().map(|m| norm.apply(*m)).collect();
    let n = scaled.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = l1(&scaled[i], &scaled[j]);
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(WriterDistanceMatrix {
        writers: groups.keys().cloned().collect(),
        values,
    })
}

/// Known-writer reference for style separation of novel samples.
#[derive(Clone, Debug)]
pub struct KnownWriterSpace {
    norm: StyleNormalizer,
    means: Vec<[f64; 4]>,
}

impl KnownWriterSpace {
    pub fn fit(groups: &BTreeMap<String, Vec<StyleVector>>) -> Result<Self, OntologyError> {
        if groups.is_empty() {
            return Err(OntologyError::NoKnownWriters);
        }
        let mut raw = Vec::with_capacity(groups.len());
        for (w, styles) in groups {
            if styles.is_empty() {
                return Err(OntologyError::EmptyWriter(w.clone()));
            }
            raw.push(mean_style(styles));
        }
        let norm = StyleNormalizer::fit(&raw);
        let means = raw.iter().map(|m| norm.apply(*m)).collect();
        Ok(Self { norm, means })
    }

    /// Smallest normalized L1 distance to any known writer mean.
    pub fn separation(&self, style: &StyleVector) -> f64 {
        let v = self.norm.apply(style.style4());
        self.means
            .iter()
            .map(|m| l1(m, &v))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Raw difficulty score: larger means easier to detect.
pub fn difficulty_score(
    novelty: NoveltyType,
    image: &LineImage,
    known: Option<&KnownWriterSpace>,
) -> Result<f64, OntologyError> {
    match novelty {
        NoveltyType::Writer | NoveltyType::Letter => {
            let known = known.ok_or(OntologyError::NoKnownWriters)?;
            Ok(known.separation(&style_metrics::style_vector(image)?))
        }
        NoveltyType::Pen | NoveltyType::Background => {
            let mask = style_metrics::foreground_mask(image);
            Ok(255.0 - style_metrics::background_mean(image, &mask)?)
        }
        NoveltyType::None => Err(OntologyError::NotNovel(novelty)),
    }
}

/// Tertiles of competition ranks over a population: the lowest third is
/// Hard, the highest Easy. Depends on ranks only.
pub fn assign_difficulty(scores: &[f64]) -> Vec<Difficulty> {
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    scores
        .iter()
        .map(|s| {
            let rank = sorted.partition_point(|x| x.total_cmp(s).is_lt());
            match 3 * rank / n {
                0 => Difficulty::Hard,
                1 => Difficulty::Medium,
                _ => Difficulty::Easy,
            }
        })
        .collect()
}

/// Distinct writer ids in a graph.
pub fn graph_writers(graph: &KnowledgeGraph) -> BTreeSet<String> {
    graph
        .nodes
        .iter()
        .filter_map(|n| match n {
            Node::Writer { id } => Some(id.clone()),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(pen: f64, slant: i32, ws: f64, cs: f64) -> StyleVector {
        StyleVector {
            pen_pressure: pen,
            slant_angle: slant,
            word_spacing: ws,
            character_size: cs,
            background_entropy: 0.0,
            pen_entropy: 0.0,
        }
    }

    fn varied(n: usize) -> Vec<StyleVector> {
        let slants = [-45, -20, -5, 0, 15, 30, 45];
        (0..n)
            .map(|i| sv(i as f64 * 10.0, slants[i % slants.len()], i as f64, 100.0 - i as f64))
            .collect()
    }

    #[test]
    fn pen_pressure_edges_at_rank_thirds() {
        let styles: Vec<_> = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0]
            .iter()
            .enumerate()
            .map(|(i, &p)| sv(p, [-45, 0, 20, 45, -5, 5][i], i as f64, i as f64))
            .collect();
        let scheme = fit_bins(&styles).unwrap();
        assert_eq!(scheme.edges[&StyleAttribute::PenPressure], vec![20.0, 40.0]);
        assert_eq!(scheme.edges[&StyleAttribute::SlantAngle].len(), 3);
        assert_eq!(scheme.bin(StyleAttribute::PenPressure, 20.0), 0);
        assert_eq!(scheme.bin(StyleAttribute::PenPressure, 21.0), 1);
        assert_eq!(scheme.bin(StyleAttribute::PenPressure, 99.0), 2);
    }

    #[test]
    fn identical_values_are_rejected() {
        let styles = vec![sv(5.0, 0, 1.0, 1.0); 10];
        assert!(matches!(fit_bins(&styles), Err(OntologyError::TooFewDistinct { .. })));
    }

    fn samples(list: &[(&str, &str)]) -> Vec<GraphSample> {
        list.iter()
            .map(|(id, w)| GraphSample {
                id: id.to_string(),
                writer: w.to_string(),
            })
            .collect()
    }

    #[test]
    fn modal_edges_and_consistency() {
        let styles = varied(12);
        let scheme = fit_bins(&styles).unwrap();
        // writer A: pen bins {1,1,2}
        let mut map = BTreeMap::new();
        let pens = [45.0, 50.0, 110.0];
        for (i, p) in pens.iter().enumerate() {
            map.insert(format!("a{i}"), sv(*p, 0, 5.0, 90.0));
        }
        let g = build_graph(&samples(&[("a0", "A"), ("a1", "A"), ("a2", "A")]), &map, &scheme).unwrap();
        let bins: Vec<usize> = pens.iter().map(|&p| scheme.bin(StyleAttribute::PenPressure, p)).collect();
        assert_eq!(bins, vec![1, 1, 2]);
        assert_eq!(g.modal_bins("A").unwrap()[&StyleAttribute::PenPressure], 1);
        let c = consistency(&g);
        assert_eq!(c.mismatches, vec![("a2".to_string(), StyleAttribute::PenPressure)]);
        assert!((c.fraction - 11.0 / 12.0).abs() < 1e-12);
        for (i, n) in g.nodes.iter().enumerate() {
            let out = g.outgoing(i).count();
            match n {
                Node::Sample { .. } | Node::Writer { .. } => assert_eq!(out, 4),
                Node::AttributeBin { .. } => assert_eq!(out, 0),
            }
        }
    }

    #[test]
    fn one_mismatch_in_eight_edges() {
        let scheme = fit_bins(&varied(12)).unwrap();
        let mut map = BTreeMap::new();
        map.insert("s2".to_string(), sv(0.0, -45, 0.0, 0.0));
        map.insert("s3".to_string(), sv(0.0, -45, 0.0, 200.0));
        let g = build_graph(&samples(&[("s2", "B"), ("s3", "B")]), &map, &scheme).unwrap();
        // writer B ties on character size: bins {0, 2}, lower bin wins
        let c = consistency(&g);
        assert_eq!(c.fraction, 0.875);
        assert_eq!(c.mismatches, vec![("s3".to_string(), StyleAttribute::CharacterSize)]);
    }

    #[test]
    fn single_sample_and_shared_bins() {
        let scheme = fit_bins(&varied(12)).unwrap();
        let mut map = BTreeMap::new();
        map.insert("x".to_string(), sv(0.0, 0, 0.0, 0.0));
        map.insert("y".to_string(), sv(0.0, 0, 0.0, 0.0));
        let g = build_graph(&samples(&[("x", "A")]), &map, &scheme).unwrap();
        assert_eq!(consistency(&g).fraction, 1.0);
        let g = build_graph(&samples(&[("x", "A"), ("y", "B")]), &map, &scheme).unwrap();
        let bin = g
            .node_index(&Node::AttributeBin {
                attribute: StyleAttribute::PenPressure,
                bin: 0,
            })
            .unwrap();
        let writer_edges = g.incoming(bin).filter(|e| e.kind == EdgeKind::ModalStyle).count();
        assert_eq!(writer_edges, 2);
        assert!(matches!(
            build_graph(&samples(&[("z", "A")]), &map, &scheme),
            Err(OntologyError::MissingStyle(_))
        ));
    }

    #[test]
    fn writer_distance_examples() {
        let mut groups = BTreeMap::new();
        groups.insert("a".to_string(), vec![sv(1.0, 5, 2.0, 3.0)]);
        groups.insert("b".to_string(), vec![sv(1.0, 5, 2.0, 3.0)]);
        let m = writer_distances(&groups).unwrap();
        assert_eq!(m.get(0, 1), 0.0);

        let mut groups = BTreeMap::new();
        groups.insert("a".to_string(), vec![sv(0.0, 5, 2.0, 3.0)]);
        groups.insert("b".to_string(), vec![sv(40.0, 5, 2.0, 3.0)]);
        groups.insert("c".to_string(), vec![sv(100.0, 5, 2.0, 3.0)]);
        let m = writer_distances(&groups).unwrap();
        assert!((m.by_id("a", "b").unwrap() - 0.4).abs() < 1e-12);
        assert!(m.to_csv().starts_with("writer,a,b,c\n"));

        groups.insert("d".to_string(), vec![]);
        assert!(matches!(writer_distances(&groups), Err(OntologyError::EmptyWriter(_))));
    }

    #[test]
    fn difficulty_tertiles() {
        assert_eq!(
            assign_difficulty(&[0.1, 0.5, 0.9]),
            vec![Difficulty::Hard, Difficulty::Medium, Difficulty::Easy]
        );
        let d = assign_difficulty(&[0.0, 10.0, 30.0, 55.0, 80.0, 120.0]);
        assert_eq!(d[0], Difficulty::Hard);
        assert_eq!(d[5], Difficulty::Easy);
    }

    #[test]
    fn white_background_is_hard_and_far_writer_easy() {
        let mut groups = BTreeMap::new();
        groups.insert("k1".to_string(), vec![sv(10.0, 0, 5.0, 10.0)]);
        groups.insert("k2".to_string(), vec![sv(20.0, 5, 6.0, 12.0)]);
        let space = KnownWriterSpace::fit(&groups).unwrap();
        let near = space.separation(&sv(12.0, 0, 5.0, 10.0));
        let mid = space.separation(&sv(40.0, 15, 9.0, 15.0));
        let far = space.separation(&sv(200.0, 45, 50.0, 60.0));
        assert_eq!(
            assign_difficulty(&[near, far, mid]),
            vec![Difficulty::Hard, Difficulty::Easy, Difficulty::Medium]
        );

        let white = LineImage::from_fn(40, 10, |x, _| if x % 7 == 0 { 20 } else { 255 });
        let grey = white.map(|v| if v == 255 { 180 } else { v });
        let darker = white.map(|v| if v == 255 { 120 } else { v });
        let scores: Vec<f64> = [&white, &grey, &darker]
            .iter()
            .map(|i| difficulty_score(NoveltyType::Background, i, Some(&space)).unwrap())
            .collect();
        assert_eq!(scores[0], 0.0);
        assert_eq!(assign_difficulty(&scores)[0], Difficulty::Hard);
    }

    proptest! {
        #[test]
        fn occupancy_differs_by_at_most_one(values in proptest::collection::btree_set(-1000i32..1000, 4..60)) {
            let values: Vec<f64> = values.into_iter().map(f64::from).collect();
            for bins in [3usize, 4] {
                let edges = quantile_edges(&values, bins, "x").unwrap();
                let scheme_bin = |v: f64| edges.iter().take_while(|&&e| v > e).count();
                let mut occ = vec![0usize; bins];
                for &v in &values { occ[scheme_bin(v)] += 1; }
                let lo = *occ.iter().min().unwrap();
                let hi = *occ.iter().max().unwrap();
                prop_assert!(hi - lo <= 1, "{occ:?}");
            }
        }

        #[test]
        fn constant_writers_are_fully_consistent(
            writer_styles in proptest::collection::vec((0u8..=255, 0usize..11, 0u8..50, 1u8..60), 4..10),
            reps in 1usize..4,
        ) {
            let styles: Vec<StyleVector> = writer_styles.iter().map(|&(p, s, w, c)| {
                sv(f64::from(p), style_metrics::SLANT_ANGLES[s], f64::from(w), f64::from(c))
            }).collect();
            let Ok(scheme) = fit_bins(&styles) else { return Ok(()); };
            let mut map = BTreeMap::new();
            let mut list = Vec::new();
            for (wi, st) in styles.iter().enumerate() {
                for r in 0..reps {
                    let id = format!("{wi}-{r}");
                    map.insert(id.clone(), *st);
                    list.push(GraphSample { id, writer: format!("w{wi}") });
                }
            }
            let g = build_graph(&list, &map, &scheme).unwrap();
            prop_assert_eq!(consistency(&g).fraction, 1.0);
        }

        #[test]
        fn distance_matrix_is_a_metric(raw in proptest::collection::vec((0.0f64..255.0, 0usize..11, 0.0f64..50.0, 0.0f64..60.0), 2..7)) {
            let mut groups = BTreeMap::new();
            for (i, &(p, s, w, c)) in raw.iter().enumerate() {
                groups.insert(format!("w{i}"), vec![sv(p, style_metrics::SLANT_ANGLES[s], w, c)]);
            }
            let m = writer_distances(&groups).unwrap();
            let n = m.writers.len();
            for i in 0..n {
                prop_assert_eq!(m.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                    for k in 0..n {
                        prop_assert!(m.get(i, k) <= m.get(i, j) + m.get(j, k) + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn difficulty_is_rank_invariant(scores in proptest::collection::vec(0.0f64..10.0, 1..40), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let transformed: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
            prop_assert_eq!(assign_difficulty(&scores), assign_difficulty(&transformed));
        }
    }
}
