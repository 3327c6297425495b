//! Clustering in affinity space.
//!
//! Every pair of contextual lines gets a likelihood: the mean affinity over all
//! cross pairs of their words. Edges between lines of incompatible height or
//! with likelihood below the threshold are dropped, and the connected
//! components of what remains are the clusters.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::constraints::height_ratio;
use crate::document::{DocumentModel, LineId, WordId};
use crate::error::{Error, Result};
use crate::model::affinity;
use crate::union_find::DisjointSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Edges with likelihood below this are pruned (the boundary is kept).
    pub likelihood_min: f64,
    /// Edges between lines whose height ratio reaches this are pruned.
    pub height_ratio_max: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            likelihood_min: 0.75,
            height_ratio_max: 1.25,
        }
    }
}

impl ClusterConfig {
    pub fn keeps(&self, likelihood: f64, ratio: f64) -> bool {
        likelihood >= self.likelihood_min && ratio < self.height_ratio_max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineEdge {
    pub a: LineId,
    pub b: LineId,
    pub likelihood: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineAffinityGraph {
    pub nodes: Vec<LineId>,
    /// Surviving edges, `a < b`, sorted.
    pub edges: Vec<LineEdge>,
    pub config: ClusterConfig,
}

/// Mean affinity over all cross pairs of two word sets, given latent rows.
pub fn line_pair_likelihood(latents: &Array2<f64>, rows_a: &[usize], rows_b: &[usize]) -> f64 {
    assert!(!rows_a.is_empty() && !rows_b.is_empty(), "lines must be non-empty");
    let mut sum = 0.0;
    for &i in rows_a {
        let u = latents.row(i);
        let u = u.as_slice().expect("row-major latents");
        for &j in rows_b {
            let v = latents.row(j);
            sum += affinity(u, v.as_slice().expect("row-major latents"));
        }
    }
    sum / (rows_a.len() * rows_b.len()) as f64
}

/// Latent row of each line member; latents are indexed like `doc.words`.
fn line_rows(doc: &DocumentModel) -> Vec<Vec<usize>> {
    let index: HashMap<WordId, usize> = doc.words.iter().enumerate().map(|(i, w)| (w.id, i)).collect();
    doc.lines
        .iter()
        .map(|l| l.word_ids.iter().map(|id| index[id]).collect())
        .collect()
}

/// Scores every pair of lines and keeps the edges that pass both pruning rules.
pub fn build_line_graph(doc: &DocumentModel, latents: &Array2<f64>, cfg: &ClusterConfig) -> Result<LineAffinityGraph> {
    if latents.nrows() != doc.words.len() {
        return Err(Error::DimensionMismatch {
            expected: doc.words.len(),
            actual: latents.nrows(),
        });
    }
    let rows = line_rows(doc);
    let lines = &doc.lines;
    let mut edges = Vec::new();
    for p in 0..lines.len() {
        for q in p + 1..lines.len() {
            let ratio = height_ratio(lines[p].bbox.h, lines[q].bbox.h);
            if ratio >= cfg.height_ratio_max {
                continue;
            }
            let likelihood = line_pair_likelihood(latents, &rows[p], &rows[q]);
            if cfg.keeps(likelihood, ratio) {
                let (a, b) = (lines[p].id.min(lines[q].id), lines[p].id.max(lines[q].id));
                edges.push(LineEdge { a, b, likelihood });
            }
        }
    }
    edges.sort_by_key(|e| (e.a, e.b));
    Ok(LineAffinityGraph {
        nodes: lines.iter().map(|l| l.id).collect(),
        edges,
        config: cfg.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub word_ids: Vec<WordId>,
}

/// Partition of the words into clusters. Cluster ids are assigned in order of
/// each cluster's smallest word id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub clusters: Vec<Cluster>,
}

impl ClusterAssignment {
    /// Canonical assignment from arbitrary groups of word ids.
    pub fn from_groups(groups: Vec<Vec<WordId>>) -> Self {
        let mut groups: Vec<Vec<WordId>> = groups
            .into_iter()
            .filter(|g| !g.is_empty())
            .map(|mut g| {
                g.sort_unstable();
                g.dedup();
                g
            })
            .collect();
        groups.sort_by_key(|g| g[0]);
        ClusterAssignment {
            clusters: groups
                .into_iter()
                .enumerate()
                .map(|(id, word_ids)| Cluster { id, word_ids })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.clusters.iter().map(|c| c.word_ids.len()).sum()
    }

    pub fn cluster(&self, id: usize) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.id == id)
    }

    pub fn cluster_of(&self, word: WordId) -> Option<usize> {
        self.clusters
            .iter()
            .find(|c| c.word_ids.binary_search(&word).is_ok())
            .map(|c| c.id)
    }

    pub fn word_to_cluster(&self) -> HashMap<WordId, usize> {
        self.clusters
            .iter()
            .flat_map(|c| c.word_ids.iter().map(move |w| (*w, c.id)))
            .collect()
    }

    /// Drops words that are gone and re-canonicalizes ids.
    pub fn retain_words(&self, keep: impl Fn(WordId) -> bool) -> Self {
        Self::from_groups(
            self.clusters
                .iter()
                .map(|c| c.word_ids.iter().copied().filter(|w| keep(*w)).collect())
                .collect(),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("assignment serializes")
    }
}

/// Union-find over the surviving edges; each word joins its line's component.
pub fn connected_components(graph: &LineAffinityGraph, doc: &DocumentModel) -> ClusterAssignment {
    let slot: HashMap<LineId, usize> = graph.nodes.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let mut sets = DisjointSet::new(graph.nodes.len());
    for e in &graph.edges {
        sets.union(slot[&e.a], slot[&e.b]);
    }
    let mut groups: Vec<Vec<WordId>> = Vec::new();
    let mut group_of_root: HashMap<usize, usize> = HashMap::new();
    for line in &doc.lines {
        let root = match slot.get(&line.id) {
            Some(&s) => sets.find(s),
            None => continue,
        };
        let g = *group_of_root.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].extend(&line.word_ids);
    }
    // words outside any line stand alone
    for w in &doc.words {
        if w.line_id.is_none() || !doc.lines.iter().any(|l| Some(l.id) == w.line_id) {
            groups.push(vec![w.id]);
        }
    }
    ClusterAssignment::from_groups(groups)
}

/// Projects latents onto their two leading principal directions. Each
/// direction is signed so its largest-magnitude loading is positive; missing
/// directions (d < 2) project to zero.
pub fn project_2d(latents: &Array2<f64>) -> Array2<f64> {
    let (n, d) = latents.dim();
    let mut out = Array2::zeros((n, 2));
    if n == 0 || d == 0 {
        return out;
    }
    let mean = latents.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = latents - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let cov = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    for (k, &col) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for r in 0..n {
            out[[r, k]] = centered.row(r).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{BBox, ContextualLine, WordUnit};
    use ndarray::array;

    fn doc_with_lines(sizes: &[usize]) -> DocumentModel {
        let mut words = Vec::new();
        let mut lines = Vec::new();
        let mut id = 0;
        for (l, &n) in sizes.iter().enumerate() {
            let mut ids = Vec::new();
            for k in 0..n {
                words.push(WordUnit {
                    id,
                    text: "w".into(),
                    bbox: BBox::new(0.05 + 0.1 * k as f64, 0.05 * l as f64, 0.05, 0.02),
                    line_id: Some(l),
                    style: None,
                    feature: None,
                });
                ids.push(id);
                id += 1;
            }
            lines.push(ContextualLine {
                id: l,
                word_ids: ids,
                bbox: BBox::new(0.05, 0.05 * l as f64, 0.1 * n as f64, 0.02),
            });
        }
        DocumentModel {
            doc_id: "t".into(),
            aspect_ratio: 1.0,
            words,
            lines,
        }
    }

    #[test]
    fn likelihood_is_mean_affinity() {
        let same = array![[0.1, 0.2], [0.1, 0.2]];
        assert_eq!(line_pair_likelihood(&same, &[0], &[1]), 1.0);
        // affinities 0.8 and 0.6 from word 0 to words 1 and 2
        let d1 = (-(0.8f64).ln()).sqrt();
        let d2 = (-(0.6f64).ln()).sqrt();
        let lat = array![[0.0, 0.0], [d1, 0.0], [0.0, d2]];
        let l = line_pair_likelihood(&lat, &[0], &[1, 2]);
        assert!((l - 0.7).abs() <= 1e-9 * 0.7);
        assert_eq!(
            line_pair_likelihood(&lat, &[1, 2], &[0]),
            line_pair_likelihood(&lat, &[0], &[1, 2])
        );
    }

    #[test]
    fn pruning_rules() {
        let cfg = ClusterConfig::default();
        assert!(cfg.keeps(0.9, 1.1));
        assert!(!cfg.keeps(0.9, 1.4));
        assert!(!cfg.keeps(0.6, 1.0));
        assert!(cfg.keeps(0.75, 1.0));
        assert!(!cfg.keeps(0.9, 1.25));
    }

    #[test]
    fn isolated_lines_are_separate_clusters() {
        let doc = doc_with_lines(&[1, 1, 1, 1]);
        let lat = array![[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]];
        let g = build_line_graph(&doc, &lat, &ClusterConfig::default()).unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(connected_components(&g, &doc).len(), 4);
    }

    #[test]
    fn chains_are_transitive() {
        let doc = doc_with_lines(&[1, 2, 1]);
        let graph = LineAffinityGraph {
            nodes: vec![0, 1, 2],
            edges: vec![
                LineEdge { a: 0, b: 1, likelihood: 0.9 },
                LineEdge { a: 1, b: 2, likelihood: 0.8 },
            ],
            config: ClusterConfig::default(),
        };
        let a = connected_components(&graph, &doc);
        assert_eq!(a.clusters, vec![Cluster { id: 0, word_ids: vec![0, 1, 2, 3] }]);
    }

    #[test]
    fn words_of_a_line_share_a_cluster() {
        let doc = doc_with_lines(&[3, 2]);
        let lat = array![[0.0, 0.0], [9.0, 0.0], [0.0, 9.0], [1.0, 1.0], [2.0, 2.0]];
        let g = build_line_graph(&doc, &lat, &ClusterConfig::default()).unwrap();
        let a = connected_components(&g, &doc);
        assert_eq!(a.cluster_of(0), a.cluster_of(2));
        assert_eq!(a.word_count(), 5);
    }

    #[test]
    fn projection_of_single_point_is_origin() {
        let p = project_2d(&array![[1.0, 2.0, 3.0]]);
        assert_eq!(p, array![[0.0, 0.0]]);
    }

    #[test]
    fn projection_recovers_planar_points() {
        let lat = array![[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let p = project_2d(&lat);
        for r in 0..4 {
            assert!((p[[r, 0]].abs() - lat[[r, 0]].abs()).abs() < 1e-12);
            assert!((p[[r, 1]].abs() - lat[[r, 1]].abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_pads_one_dimensional_latents() {
        let p = project_2d(&array![[1.0], [3.0]]);
        assert_eq!(p, array![[-1.0, 0.0], [1.0, 0.0]]);
    }
}
