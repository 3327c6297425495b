//! Documents, word units and contextual lines.
//!
//! A document is a bag of OCR word boxes in normalized page coordinates.
//! Contextual lines are the connected components of a sparse graph that links
//! each word to its nearest right-hand neighbour on the same text band when
//! the gap between them is small relative to the word height.

use std::collections::HashSet;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::StyleAttrs;
use crate::union_find::DisjointSet;

pub type WordId = u64;
pub type LineId = usize;

const BBOX_TOL: f64 = 1e-6;
const CLAMP_WARN: f64 = 1e-3;

/// Axis-aligned box in page fractions, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        finite
            && self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.right() <= 1.0 + BBOX_TOL
            && self.bottom() <= 1.0 + BBOX_TOL
    }

    /// Clamps the box into the unit page. Returns the clamped box and the
    /// largest coordinate adjustment that was made.
    pub fn clamped(&self) -> (BBox, f64) {
        let x = self.x.clamp(0.0, 1.0);
        let y = self.y.clamp(0.0, 1.0);
        let w = self.w.min(1.0 - x);
        let h = self.h.min(1.0 - y);
        let moved = [
            (x - self.x).abs(),
            (y - self.y).abs(),
            (w - self.w).abs(),
            (h - self.h).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        (BBox { x, y, w, h }, moved)
    }

    pub fn union(&self, other: &BBox) -> BBox {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        BBox {
            x,
            y,
            w: self.right().max(other.right()) - x,
            h: self.bottom().max(other.bottom()) - y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordUnit {
    pub id: WordId,
    pub text: String,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_id: Option<LineId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<StyleAttrs>,
    /// Externally supplied embedding that replaces the built-in style and
    /// content encoders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextualLine {
    pub id: LineId,
    /// Left to right by `bbox.x`, ties by word id.
    pub word_ids: Vec<WordId>,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentModel {
    pub doc_id: String,
    /// Image width divided by image height.
    pub aspect_ratio: f64,
    pub words: Vec<WordUnit>,
    #[serde(default)]
    pub lines: Vec<ContextualLine>,
}

/// On-disk document file layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentFile {
    pub doc_id: String,
    pub aspect_ratio: f64,
    pub words: Vec<WordRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordRecord {
    pub id: WordId,
    pub text: String,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_attrs: Option<StyleAttrs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
}

impl DocumentModel {
    pub fn new(doc_id: impl Into<String>, aspect_ratio: f64, words: Vec<WordUnit>) -> Self {
        DocumentModel {
            doc_id: doc_id.into(),
            aspect_ratio,
            words,
            lines: Vec::new(),
        }
    }

    /// Decodes and validates a document file.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let file: DocumentFile = serde_json::from_slice(bytes)?;
        Self::from_file(file)
    }

    pub fn from_file(file: DocumentFile) -> Result<Self> {
        if !(file.aspect_ratio.is_finite() && file.aspect_ratio > 0.0) {
            return Err(Error::validation("aspect_ratio", "must be a positive number"));
        }
        let mut seen = HashSet::with_capacity(file.words.len());
        let mut words = Vec::with_capacity(file.words.len());
        for (i, rec) in file.words.into_iter().enumerate() {
            if !seen.insert(rec.id) {
                return Err(Error::validation(
                    format!("words[{i}].id"),
                    format!("duplicate word id {}", rec.id),
                ));
            }
            if rec.text.trim().is_empty() {
                return Err(Error::validation(format!("words[{i}].text"), "empty text"));
            }
            let raw = BBox::from(rec.bbox);
            if raw.w <= 0.0 || raw.h <= 0.0 || ![raw.x, raw.y, raw.w, raw.h].iter().all(|v| v.is_finite()) {
                return Err(Error::validation(
                    format!("words[{i}].bbox"),
                    "width and height must be positive and finite",
                ));
            }
            let (bbox, moved) = raw.clamped();
            if !bbox.is_valid() {
                return Err(Error::validation(format!("words[{i}].bbox"), "box lies outside the page"));
            }
            if moved > CLAMP_WARN {
                warn!("word {} bbox clamped into the page (moved by {moved:.4})", rec.id);
            }
            if let Some(style) = &rec.style_attrs {
                style
                    .validate()
                    .map_err(|m| Error::validation(format!("words[{i}].style_attrs"), m))?;
            }
            if let Some(feature) = &rec.feature {
                if feature.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation(format!("words[{i}].feature"), "non-finite value"));
                }
            }
            words.push(WordUnit {
                id: rec.id,
                text: rec.text,
                bbox,
                line_id: None,
                style: rec.style_attrs,
                feature: rec.feature,
            });
        }
        Ok(DocumentModel::new(file.doc_id, file.aspect_ratio, words))
    }

    pub fn to_file(&self) -> DocumentFile {
        DocumentFile {
            doc_id: self.doc_id.clone(),
            aspect_ratio: self.aspect_ratio,
            words: self
                .words
                .iter()
                .map(|w| WordRecord {
                    id: w.id,
                    text: w.text.clone(),
                    bbox: w.bbox.into(),
                    style_attrs: w.style.clone(),
                    feature: w.feature.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("document serializes")
    }

    /// Checks the structural invariants of the model.
    pub fn validate(&self) -> Result<()> {
        if !(self.aspect_ratio.is_finite() && self.aspect_ratio > 0.0) {
            return Err(Error::validation("aspect_ratio", "must be a positive number"));
        }
        let mut ids = HashSet::new();
        for (i, w) in self.words.iter().enumerate() {
            if !ids.insert(w.id) {
                return Err(Error::validation(format!("words[{i}].id"), "duplicate word id"));
            }
            if w.text.trim().is_empty() {
                return Err(Error::validation(format!("words[{i}].text"), "empty text"));
            }
            if !w.bbox.is_valid() {
                return Err(Error::validation(format!("words[{i}].bbox"), "invalid box"));
            }
            if let Some(line) = w.line_id {
                if !self.lines.iter().any(|l| l.id == line) {
                    return Err(Error::validation(
                        format!("words[{i}].line_id"),
                        format!("unknown line {line}"),
                    ));
                }
            }
        }
        for line in &self.lines {
            if line.word_ids.is_empty() {
                return Err(Error::validation(format!("lines[{}]", line.id), "empty line"));
            }
        }
        Ok(())
    }

    pub fn word_index(&self, id: WordId) -> Option<usize> {
        self.words.iter().position(|w| w.id == id)
    }

    pub fn word(&self, id: WordId) -> Option<&WordUnit> {
        self.words.iter().find(|w| w.id == id)
    }

    pub fn line(&self, id: LineId) -> Option<&ContextualLine> {
        self.lines.iter().find(|l| l.id == id)
    }

    /// Builds contextual lines with the default thresholds and stores them.
    pub fn with_lines(mut self, params: &LineParams) -> Self {
        let lines = build_contextual_lines(&self, params);
        self.assign_lines(lines);
        self
    }

    pub fn assign_lines(&mut self, lines: Vec<ContextualLine>) {
        for w in &mut self.words {
            w.line_id = None;
        }
        for line in &lines {
            for id in &line.word_ids {
                if let Some(w) = self.words.iter_mut().find(|w| w.id == *id) {
                    w.line_id = Some(line.id);
                }
            }
        }
        self.lines = lines;
    }

    /// Recomputes line membership and boxes after words were removed or moved,
    /// keeping line ids. Lines left empty are dropped.
    pub fn refresh_lines(&mut self) {
        let words = &self.words;
        self.lines.retain_mut(|line| {
            line.word_ids.retain(|id| words.iter().any(|w| w.id == *id));
            if line.word_ids.is_empty() {
                return false;
            }
            let members: Vec<&WordUnit> = line
                .word_ids
                .iter()
                .filter_map(|id| words.iter().find(|w| w.id == *id))
                .collect();
            line.bbox = members
                .iter()
                .skip(1)
                .fold(members[0].bbox, |acc, w| acc.union(&w.bbox));
            true
        });
    }
}

/// Thresholds for contextual-line construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    /// Edges with weight at or above this are dropped.
    pub threshold: f64,
    /// Minimum vertical overlap, as a fraction of the shorter box height.
    pub overlap_min: f64,
}

impl Default for LineParams {
    fn default() -> Self {
        LineParams {
            threshold: 0.1,
            overlap_min: 0.5,
        }
    }
}

/// Overlap of the two y-intervals divided by the smaller height.
pub fn vertical_overlap(a: &BBox, b: &BBox) -> f64 {
    let overlap = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if overlap <= 0.0 {
        return 0.0;
    }
    (overlap / a.h.min(b.h)).min(1.0)
}

/// Horizontal gap scaled by the aspect ratio over the taller height, i.e. the
/// gap-to-height ratio in pixel units.
pub fn line_weight(a: &BBox, b: &BBox, aspect_ratio: f64) -> f64 {
    let gap = (b.x - a.right()).max(0.0);
    gap * aspect_ratio / a.h.max(b.h)
}

fn is_right_of(a: &WordUnit, b: &WordUnit) -> bool {
    b.bbox.x > a.bbox.x || (b.bbox.x == a.bbox.x && b.id > a.id)
}

/// Links every word to its nearest right-hand neighbour on the same band and
/// returns the edges `(left, right)` by word index together with their weights.
pub fn neighbor_edges(doc: &DocumentModel, overlap_min: f64) -> Vec<(usize, usize, f64)> {
    let words = &doc.words;
    let mut edges = Vec::new();
    for (i, a) in words.iter().enumerate() {
        let mut best: Option<(f64, f64, WordId, usize)> = None;
        for (j, b) in words.iter().enumerate() {
            if i == j || !is_right_of(a, b) {
                continue;
            }
            if vertical_overlap(&a.bbox, &b.bbox) < overlap_min {
                continue;
            }
            let gap = (b.bbox.x - a.bbox.right()).max(0.0);
            let key = (gap, b.bbox.x, b.id, j);
            let better = match &best {
                None => true,
                Some(cur) => {
                    (key.0, key.1, key.2).partial_cmp(&(cur.0, cur.1, cur.2))
                        == Some(std::cmp::Ordering::Less)
                }
            };
            if better {
                best = Some(key);
            }
        }
        if let Some((_, _, _, j)) = best {
            edges.push((i, j, line_weight(&a.bbox, &words[j].bbox, doc.aspect_ratio)));
        }
    }
    edges
}

/// Groups words into contextual lines. Line ids follow reading order.
pub fn build_contextual_lines(doc: &DocumentModel, params: &LineParams) -> Vec<ContextualLine> {
    let words = &doc.words;
    let mut sets = DisjointSet::new(words.len());
    for (i, j, weight) in neighbor_edges(doc, params.overlap_min) {
        if weight < params.threshold {
            sets.union(i, j);
        }
    }
    let mut groups: Vec<(BBox, Vec<usize>)> = sets
        .groups()
        .into_iter()
        .map(|mut members| {
            members.sort_by(|&p, &q| {
                words[p]
                    .bbox
                    .x
                    .total_cmp(&words[q].bbox.x)
                    .then(words[p].id.cmp(&words[q].id))
            });
            let bbox = members
                .iter()
                .skip(1)
                .fold(words[members[0]].bbox, |acc, &m| acc.union(&words[m].bbox));
            (bbox, members)
        })
        .collect();
    groups.sort_by(|(a, ma), (b, mb)| {
        a.y.total_cmp(&b.y)
            .then(a.x.total_cmp(&b.x))
            .then(words[ma[0]].id.cmp(&words[mb[0]].id))
    });
    groups
        .into_iter()
        .enumerate()
        .map(|(id, (bbox, members))| ContextualLine {
            id,
            word_ids: members.iter().map(|&m| words[m].id).collect(),
            bbox,
        })
        .collect()
}
