//! Oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use docgroup_core::clustering::{ClusterAssignment, ClusterConfig};
use docgroup_core::constraints::{
    characterize_line, generate_constraints, semantic_tag, syntax_bin, ConstraintConfig, ConstraintSource, RuleTagger,
    SemanticTag,
};
use docgroup_core::document::{BBox, ContextualLine, DocumentModel, LineParams, WordId, WordUnit};
use docgroup_core::features::{assemble_representations, FeatureConfig};
use docgroup_core::synth::{generate_document, random_spec};
use docgroup_core::util::cosine_distance;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// A document of one-row lines with given heights, plus latents drawn
/// around a few centres so that line likelihoods straddle the threshold.
pub fn line_doc(heights: &[f64], sizes: &[usize], rng: &mut ChaCha8Rng) -> (DocumentModel, Array2<f64>) {
    let mut words = Vec::new();
    let mut lines = Vec::new();
    let mut id: WordId = 0;
    for (l, (&h, &n)) in heights.iter().zip(sizes).enumerate() {
        let y = l as f64 / heights.len() as f64 * 0.9;
        let mut ids = Vec::new();
        for k in 0..n {
            words.push(WordUnit {
                id,
                text: format!("w{id}"),
                bbox: BBox::new(0.02 + 0.1 * k as f64, y, 0.05, h),
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
            bbox: BBox::new(0.02, y, 0.1 * n as f64, h),
        });
    }
    let centres = rng.random_range(1..=4);
    let dim = 3;
    let centre: Vec<Vec<f64>> = (0..centres)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut latents = Array2::zeros((words.len(), dim));
    let mut row = 0;
    for &n in sizes {
        let c = &centre[rng.random_range(0..centres)];
        for _ in 0..n {
            for d in 0..dim {
                latents[[row, d]] = c[d] + rng.random_range(-0.35..0.35);
            }
            row += 1;
        }
    }
    let mut doc = DocumentModel::new("graph", 1.0, words);
    doc.lines = lines;
    (doc, latents)
}

/// Transitive closure of the pruned line graph, computed from scratch.
pub fn closure_partition(doc: &DocumentModel, latents: &Array2<f64>, cfg: &ClusterConfig) -> ClusterAssignment {
    let n = doc.lines.len();
    let rows: Vec<Vec<usize>> = doc
        .lines
        .iter()
        .map(|l| l.word_ids.iter().map(|w| doc.words.iter().position(|x| x.id == *w).unwrap()).collect())
        .collect();
    let mut reach = vec![vec![false; n]; n];
    for p in 0..n {
        reach[p][p] = true;
        for q in 0..n {
            if p == q {
                continue;
            }
            let (ha, hb) = (doc.lines[p].bbox.h, doc.lines[q].bbox.h);
            let ratio = ha.max(hb) / ha.min(hb);
            let mut sum = 0.0;
            for &i in &rows[p] {
                for &j in &rows[q] {
                    let d2: f64 = (0..latents.ncols()).map(|d| (latents[[i, d]] - latents[[j, d]]).powi(2)).sum();
                    sum += (-d2).exp();
                }
            }
            let likelihood = sum / (rows[p].len() * rows[q].len()) as f64;
            reach[p][q] = likelihood >= cfg.likelihood_min && ratio < cfg.height_ratio_max;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let mut groups = Vec::new();
    let mut seen = vec![false; n];
    for p in 0..n {
        if seen[p] {
            continue;
        }
        let mut g = Vec::new();
        for q in 0..n {
            if reach[p][q] {
                seen[q] = true;
                g.extend(&doc.lines[q].word_ids);
            }
        }
        groups.push(g);
    }
    ClusterAssignment::from_groups(groups)
}

const VOCAB: &[&str] = &[
    "Pasta", "Salad", "fresh", "with", "tomato", "$12.50", "€8", "12:30", "9:05pm", "Mon", "12/03", "3rd", "45%",
    "1,250", "2024", "MENU", "SOUPS", "and", "Grill", "--", "the", "Risotto", "lemon", "7.99",
];

/// Random word soup on a grid of rows; boxes never overlap.
pub fn soup(seed: u64) -> DocumentModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(2..12);
    let mut words = Vec::new();
    let mut id = 0;
    for r in 0..rows {
        let h = [0.015, 0.016, 0.02, 0.03][rng.random_range(0..4)];
        let y = 0.02 + r as f64 * 0.08;
        let mut x = 0.02;
        while x < 0.85 && rng.random_bool(0.85) {
            let w = rng.random_range(0.03..0.08);
            words.push(WordUnit {
                id,
                text: VOCAB[rng.random_range(0..VOCAB.len())].to_string(),
                bbox: BBox::new(x, y, w, h),
                line_id: None,
                style: None,
                feature: None,
            });
            id += 1;
            x += w + if rng.random_bool(0.6) { 0.001 } else { 0.05 };
        }
    }
    DocumentModel::new(format!("soup-{seed}"), 1.0, words)
}

fn mutual_knn(visual: &[Vec<f64>], ids: &[WordId], k: usize) -> HashMap<usize, BTreeSet<usize>> {
    let n = visual.len();
    let mut near = HashMap::new();
    for i in 0..n {
        let mut others: Vec<(f64, WordId, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (cosine_distance(&visual[i], &visual[j]), ids[j], j)).collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.insert(i, others.iter().take(k).map(|o| o.2).collect::<BTreeSet<_>>());
    }
    near
}

pub fn check_constraints(doc: DocumentModel, seed: u64) -> Result<(), String> {
    let doc = doc.with_lines(&LineParams::default());
    let reps = assemble_representations(&doc, &FeatureConfig::default()).unwrap();
    let cfg = ConstraintConfig::default();
    let set = generate_constraints(&doc, &reps.visual, &RuleTagger, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();

    let mut pairs = BTreeSet::new();
    for c in &set.constraints {
        ensure!(c.a < c.b, "unordered pair ({}, {})", c.a, c.b);
        ensure!(pairs.insert((c.a, c.b)), "duplicate or contradictory pair ({}, {})", c.a, c.b);
    }
    let s = set.stats();
    ensure!(s.must_link <= cfg.must_link_cap, "{} must-links", s.must_link);
    if s.must_link > 0 && s.cannot_link > 0 {
        let f = s.must_link as f64 / s.total() as f64;
        ensure!(f >= cfg.must_fraction - 1e-12 && f <= cfg.must_fraction + 1.0 / s.total() as f64 + 1e-12, "fraction {f}");
    }

    let index: HashMap<WordId, usize> = doc.words.iter().enumerate().map(|(i, w)| (w.id, i)).collect();
    let ids: Vec<WordId> = doc.words.iter().map(|w| w.id).collect();
    let near = mutual_knn(&reps.visual, &ids, cfg.k);
    let tags: Vec<SemanticTag> = doc.words.iter().map(|w| semantic_tag(&w.text)).collect();
    let mut effective: HashMap<usize, SemanticTag> = HashMap::new();
    for line in &doc.lines {
        let members: Vec<usize> = line.word_ids.iter().map(|w| index[w]).collect();
        match characterize_line(&members.iter().map(|&m| tags[m]).collect::<Vec<_>>()) {
            Some(SemanticTag::Plain) => members.iter().for_each(|&m| {
                effective.insert(m, SemanticTag::Plain);
            }),
            Some(t) => members.iter().filter(|&&m| tags[m] == t).for_each(|&m| {
                effective.insert(m, t);
            }),
            None => {}
        }
    }
    for c in set.constraints.iter().filter(|c| c.is_must() && c.source == ConstraintSource::Inter) {
        let (i, j) = (index[&c.a], index[&c.b]);
        let (wi, wj) = (&doc.words[i], &doc.words[j]);
        ensure!(wi.line_id != wj.line_id, "inter pair ({}, {}) shares a line", c.a, c.b);
        ensure!(near[&i].contains(&j) && near[&j].contains(&i), "({}, {}) not mutual neighbours", c.a, c.b);
        ensure!(syntax_bin(&wi.text) == syntax_bin(&wj.text), "({}, {}) bins differ", c.a, c.b);
        ensure!(effective.contains_key(&i) && effective.get(&i) == effective.get(&j), "({}, {}) tags differ", c.a, c.b);
        let ratio = wi.bbox.h.max(wj.bbox.h) / wi.bbox.h.min(wj.bbox.h);
        ensure!(ratio < cfg.height_ratio_max, "({}, {}) height ratio {ratio}", c.a, c.b);
    }
    for c in set.constraints.iter().filter(|c| c.source == ConstraintSource::Intra) {
        ensure!(c.is_must(), "intra cannot-link ({}, {})", c.a, c.b);
        ensure!(doc.words[index[&c.a]].line_id == doc.words[index[&c.b]].line_id, "intra pair ({}, {}) spans lines", c.a, c.b);
    }
    Ok(())
}

/// Random synthetic document when the spec fits on a page, word soup otherwise.
pub fn constraint_case(seed: u64, synthetic: bool) -> DocumentModel {
    if synthetic {
        let spec = random_spec(&mut ChaCha8Rng::seed_from_u64(seed));
        if let Ok((doc, _)) = generate_document(&spec) {
            return doc;
        }
    }
    soup(seed)
}
