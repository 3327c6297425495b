//! Automatic must-link / cannot-link constraints.
//!
//! Intra-line constraints tie together every pair of words that share a
//! contextual line. Inter-line constraints compare words from different lines
//! on four criteria (visual style neighbourhood, letter case, semantic tag and
//! box height): pairs that agree on all four become must-links and pairs that
//! disagree on any one become cannot-links. The union is then consolidated
//! and rebalanced to a fixed must-link fraction.

use std::collections::{BTreeMap, HashSet};
use std::sync::LazyLock;

use rand::seq::index;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::document::{ContextualLine, DocumentModel, LineId, WordId, WordUnit};
use crate::error::{Error, Result};
use crate::util::cosine_distance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SyntaxBin {
    Upper,
    Lower,
    Mixed,
}

pub fn syntax_bin(text: &str) -> SyntaxBin {
    let mut letters = text.chars().filter(|c| c.is_alphabetic()).peekable();
    if letters.peek().is_none() {
        return SyntaxBin::Mixed;
    }
    let (mut upper, mut lower, mut other) = (0, 0, 0);
    for c in letters {
        if c.is_uppercase() {
            upper += 1;
        } else if c.is_lowercase() {
            lower += 1;
        } else {
            other += 1;
        }
    }
    match (upper, lower, other) {
        (u, 0, 0) if u > 0 => SyntaxBin::Upper,
        (0, l, 0) if l > 0 => SyntaxBin::Lower,
        _ => SyntaxBin::Mixed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SemanticTag {
    Number,
    Price,
    Time,
    Date,
    Ordinal,
    Percent,
    Plain,
    None,
}

impl SemanticTag {
    /// Entity tags, i.e. everything that can characterize a line.
    pub fn is_entity(self) -> bool {
        !matches!(self, SemanticTag::Plain | SemanticTag::None)
    }
}

static PRICE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:[$€£¥¢₹₩₽]\s?\d[\d,]*(?:\.\d+)?|\d[\d,]*(?:\.\d+)?\s?[$€£¥¢₹₩₽])$").unwrap()
});
static PERCENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+(?:[.,]\d+)?\s?%$").unwrap());
static TIME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d{1,2}:\d{2}(?:\s?[aApP]\.?[mM]\.?)?$").unwrap());
static DATE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d{1,2}[/.-]\d{1,2}(?:[/.-]\d{2,4})?$").unwrap());
static ORDINAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^\d+(?:st|nd|rd|th)$").unwrap());
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[+-]?\d+(?:[,.]\d+)*$").unwrap());

/// Rule-based entity tag; the first matching rule wins.
pub fn semantic_tag(text: &str) -> SemanticTag {
    let t = text
        .trim()
        .trim_start_matches(['(', '[', '"'])
        .trim_end_matches([',', ';', ')', ']', '"']);
    if PRICE.is_match(t) {
        SemanticTag::Price
    } else if PERCENT.is_match(t) {
        SemanticTag::Percent
    } else if TIME.is_match(t) {
        SemanticTag::Time
    } else if DATE.is_match(t) {
        SemanticTag::Date
    } else if ORDINAL.is_match(t) {
        SemanticTag::Ordinal
    } else if NUMBER.is_match(t) {
        SemanticTag::Number
    } else if t.chars().any(char::is_alphabetic) {
        SemanticTag::Plain
    } else {
        SemanticTag::None
    }
}

/// Source of word tags; the rule table is the default.
pub trait Tagger {
    fn tag(&self, text: &str) -> SemanticTag;
}

pub struct RuleTagger;

impl Tagger for RuleTagger {
    fn tag(&self, text: &str) -> SemanticTag {
        semantic_tag(text)
    }
}

/// The entity type a line is about: the single entity tag among its words,
/// `Plain` if it has none, or `None` (noisy) if it mixes several.
pub fn characterize_line(tags: &[SemanticTag]) -> Option<SemanticTag> {
    let entities: HashSet<SemanticTag> = tags.iter().copied().filter(|t| t.is_entity()).collect();
    match entities.len() {
        0 => Some(SemanticTag::Plain),
        1 => entities.into_iter().next(),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NeighborMode {
    Nearest,
    Farthest,
}

/// Index pairs `(i, j)`, `i < j`, that are mutually among each other's `k`
/// nearest (or farthest) points. Ties are broken by ascending id.
pub fn mutual_pairs_by_distance(
    ids: &[WordId],
    dist: impl Fn(usize, usize) -> f64,
    k: usize,
    mode: NeighborMode,
) -> Vec<(usize, usize)> {
    let n = ids.len();
    if n < 2 || k == 0 {
        return Vec::new();
    }
    let k = k.min(n - 1);
    let mut member = vec![vec![false; n]; n];
    let mut order: Vec<(f64, WordId, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i).map(|j| {
            let d = dist(i, j);
            (if mode == NeighborMode::Nearest { d } else { -d }, ids[j], j)
        }));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, _, j) in order.iter().take(k) {
            member[i][j] = true;
        }
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if member[i][j] && member[j][i] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Mutual neighbour pairs under cosine distance.
pub fn mutual_neighbor_pairs(
    vectors: &[Vec<f64>],
    ids: &[WordId],
    k: usize,
    mode: NeighborMode,
) -> Vec<(usize, usize)> {
    let n = vectors.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = cosine_distance(&vectors[i], &vectors[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    mutual_pairs_by_distance(ids, |i, j| d[i * n + j], k, mode)
}

/// Strictly below the ratio counts as the same size.
pub fn height_compatible(a: &WordUnit, b: &WordUnit, ratio_max: f64) -> bool {
    height_ratio(a.bbox.h, b.bbox.h) < ratio_max
}

pub fn height_ratio(a: f64, b: f64) -> f64 {
    a.max(b) / a.min(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConstraintKind {
    MustLink,
    CannotLink,
}

impl ConstraintKind {
    pub fn opposite(self) -> Self {
        match self {
            ConstraintKind::MustLink => ConstraintKind::CannotLink,
            ConstraintKind::CannotLink => ConstraintKind::MustLink,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConstraintSource {
    Intra,
    Inter,
    User,
}

/// A pairwise constraint; the pair is stored with the smaller id first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Constraint {
    #[serde(rename = "i")]
    pub a: WordId,
    #[serde(rename = "j")]
    pub b: WordId,
    pub kind: ConstraintKind,
    pub source: ConstraintSource,
}

impl Constraint {
    /// Panics when `a == b`.
    pub fn new(a: WordId, b: WordId, kind: ConstraintKind, source: ConstraintSource) -> Self {
        assert_ne!(a, b, "a constraint needs two distinct words");
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        Constraint { a, b, kind, source }
    }

    pub fn must(a: WordId, b: WordId, source: ConstraintSource) -> Self {
        Self::new(a, b, ConstraintKind::MustLink, source)
    }

    pub fn cannot(a: WordId, b: WordId, source: ConstraintSource) -> Self {
        Self::new(a, b, ConstraintKind::CannotLink, source)
    }

    pub fn pair(&self) -> (WordId, WordId) {
        (self.a, self.b)
    }

    /// Training target: 1 for must-link, 0 for cannot-link.
    pub fn label(&self) -> f64 {
        match self.kind {
            ConstraintKind::MustLink => 1.0,
            ConstraintKind::CannotLink => 0.0,
        }
    }

    pub fn is_must(&self) -> bool {
        self.kind == ConstraintKind::MustLink
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintStats {
    pub must_link: usize,
    pub cannot_link: usize,
    pub intra_must: usize,
    pub inter_must: usize,
    pub inter_cannot: usize,
    pub user_must: usize,
    pub user_cannot: usize,
}

impl ConstraintStats {
    pub fn total(&self) -> usize {
        self.must_link + self.cannot_link
    }

    pub fn must_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.must_link as f64 / self.total() as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Self {
        ConstraintSet { constraints }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn stats(&self) -> ConstraintStats {
        let mut s = ConstraintStats::default();
        for c in &self.constraints {
            match (c.kind, c.source) {
                (ConstraintKind::MustLink, src) => {
                    s.must_link += 1;
                    match src {
                        ConstraintSource::Intra => s.intra_must += 1,
                        ConstraintSource::Inter => s.inter_must += 1,
                        ConstraintSource::User => s.user_must += 1,
                    }
                }
                (ConstraintKind::CannotLink, src) => {
                    s.cannot_link += 1;
                    match src {
                        ConstraintSource::User => s.user_cannot += 1,
                        _ => s.inter_cannot += 1,
                    }
                }
            }
        }
        s
    }

    /// First pair found carrying both kinds, if any.
    pub fn find_contradiction(&self) -> Option<(WordId, WordId)> {
        let mut kinds: BTreeMap<(WordId, WordId), ConstraintKind> = BTreeMap::new();
        for c in &self.constraints {
            if let Some(k) = kinds.insert(c.pair(), c.kind) {
                if k != c.kind {
                    return Some(c.pair());
                }
            }
        }
        None
    }

    /// One JSON object per line: `{"i":..,"j":..,"kind":..,"source":..}`.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for c in &self.constraints {
            out.push_str(&serde_json::to_string(c).expect("constraint serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let mut constraints = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let c: Constraint = serde_json::from_str(line)
                .map_err(|e| Error::parse(format!("line {}", n + 1), e.to_string()))?;
            if c.a >= c.b {
                return Err(Error::validation(format!("line {}", n + 1), "pair must satisfy i < j"));
            }
            constraints.push(c);
        }
        Ok(ConstraintSet { constraints })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    /// Neighbourhood size for mutual nearest / farthest style pairs.
    pub k: usize,
    pub height_ratio_max: f64,
    pub must_link_cap: usize,
    pub must_fraction: f64,
    pub rng_seed: u64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            k: 6,
            height_ratio_max: 1.25,
            must_link_cap: 1000,
            must_fraction: 0.6,
            rng_seed: 0,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation("constraints.k", "must be at least 1"));
        }
        if !(self.height_ratio_max > 1.0) {
            return Err(Error::validation("constraints.height_ratio_max", "must exceed 1"));
        }
        if !(self.must_fraction > 0.0 && self.must_fraction < 1.0) {
            return Err(Error::validation("constraints.must_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Must-links between every pair of words sharing a line.
pub fn generate_intra_constraints(lines: &[ContextualLine]) -> Vec<Constraint> {
    let mut out = Vec::new();
    for line in lines {
        for (p, &a) in line.word_ids.iter().enumerate() {
            for &b in &line.word_ids[p + 1..] {
                out.push(Constraint::must(a, b, ConstraintSource::Intra));
            }
        }
    }
    out
}

/// Outcome of the four inter-line criteria for one pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCriteria {
    pub mutually_near: bool,
    pub mutually_far: bool,
    pub same_bin: bool,
    pub same_tag: bool,
    pub height_ok: bool,
}

impl PairCriteria {
    pub fn is_must(&self) -> bool {
        self.mutually_near && self.same_bin && self.same_tag && self.height_ok
    }

    pub fn is_cannot(&self) -> bool {
        self.mutually_far || !self.same_bin || !self.same_tag || !self.height_ok
    }
}

/// Precomputed inputs of inter-line constraint generation.
#[derive(Clone, Debug)]
pub struct InterAnalysis {
    /// Characterizing words: (word index, line, effective tag).
    pub candidates: Vec<(usize, LineId, SemanticTag)>,
    pub near: HashSet<(usize, usize)>,
    pub far: HashSet<(usize, usize)>,
    pub bins: Vec<SyntaxBin>,
}

impl InterAnalysis {
    /// `visual` and `tags` are indexed like `doc.words`; lines must be built.
    pub fn new(doc: &DocumentModel, visual: &[Vec<f64>], tags: &[SemanticTag], k: usize) -> Self {
        let ids: Vec<WordId> = doc.words.iter().map(|w| w.id).collect();
        let near = mutual_neighbor_pairs(visual, &ids, k, NeighborMode::Nearest)
            .into_iter()
            .collect();
        let far = mutual_neighbor_pairs(visual, &ids, k, NeighborMode::Farthest)
            .into_iter()
            .collect();
        let bins = doc.words.iter().map(|w| syntax_bin(&w.text)).collect();

        let mut candidates = Vec::new();
        for line in &doc.lines {
            let members: Vec<usize> = line.word_ids.iter().filter_map(|id| doc.word_index(*id)).collect();
            let line_tags: Vec<SemanticTag> = members.iter().map(|&m| tags[m]).collect();
            match characterize_line(&line_tags) {
                None => {}
                Some(SemanticTag::Plain) => {
                    candidates.extend(members.iter().map(|&m| (m, line.id, SemanticTag::Plain)));
                }
                Some(tag) => candidates.extend(
                    members
                        .iter()
                        .filter(|&&m| tags[m] == tag)
                        .map(|&m| (m, line.id, tag)),
                ),
            }
        }
        candidates.sort_by_key(|c| c.0);
        InterAnalysis {
            candidates,
            near,
            far,
            bins,
        }
    }

    pub fn criteria(
        &self,
        doc: &DocumentModel,
        (i, tag_i): (usize, SemanticTag),
        (j, tag_j): (usize, SemanticTag),
        ratio_max: f64,
    ) -> PairCriteria {
        let key = (i.min(j), i.max(j));
        PairCriteria {
            mutually_near: self.near.contains(&key),
            mutually_far: self.far.contains(&key),
            same_bin: self.bins[i] == self.bins[j],
            same_tag: tag_i == tag_j,
            height_ok: height_compatible(&doc.words[i], &doc.words[j], ratio_max),
        }
    }
}

/// Inter-line constraints between characterizing words of different lines.
pub fn generate_inter_constraints(
    doc: &DocumentModel,
    visual: &[Vec<f64>],
    tags: &[SemanticTag],
    cfg: &ConstraintConfig,
) -> Vec<Constraint> {
    let analysis = InterAnalysis::new(doc, visual, tags, cfg.k);
    let cands = &analysis.candidates;
    let mut out = Vec::new();
    for (p, &(i, line_i, tag_i)) in cands.iter().enumerate() {
        for &(j, line_j, tag_j) in &cands[p + 1..] {
            if line_i == line_j {
                continue;
            }
            let crit = analysis.criteria(doc, (i, tag_i), (j, tag_j), cfg.height_ratio_max);
            let (a, b) = (doc.words[i].id, doc.words[j].id);
            if crit.is_must() {
                out.push(Constraint::must(a, b, ConstraintSource::Inter));
            } else if crit.is_cannot() {
                out.push(Constraint::cannot(a, b, ConstraintSource::Inter));
            }
        }
    }
    out
}

/// Largest cannot-link count keeping the must fraction at or above `fraction`.
pub fn max_cannot_for(must: usize, fraction: f64) -> usize {
    let mut c = ((must as f64) * (1.0 - fraction) / fraction + 1e-9).floor() as usize;
    while c > 0 && (must as f64) / ((must + c) as f64) < fraction {
        c -= 1;
    }
    c
}

/// Smallest must-link count keeping the must fraction at or above `fraction`.
pub fn min_must_for(cannot: usize, fraction: f64) -> usize {
    let mut m = ((cannot as f64) * fraction / (1.0 - fraction) - 1e-9).ceil().max(0.0) as usize;
    while (m as f64) / ((m + cannot) as f64) < fraction {
        m += 1;
    }
    m
}

fn sample_keep<T: Copy>(items: &[T], keep: usize, rng: &mut impl Rng) -> Vec<T> {
    if keep >= items.len() {
        return items.to_vec();
    }
    let mut picked = index::sample(rng, items.len(), keep).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i]).collect()
}

/// Resolves conflicts (must-link wins), removes duplicates, caps must-links
/// and rebalances to the configured must fraction.
pub fn consolidate_and_balance(
    intra: &[Constraint],
    inter: &[Constraint],
    cfg: &ConstraintConfig,
    rng: &mut impl Rng,
) -> ConstraintSet {
    let mut by_pair: BTreeMap<(WordId, WordId), Constraint> = BTreeMap::new();
    for c in intra.iter().chain(inter) {
        by_pair
            .entry(c.pair())
            .and_modify(|cur| {
                if !cur.is_must() && c.is_must() {
                    *cur = *c;
                }
            })
            .or_insert(*c);
    }
    let (must, cannot): (Vec<Constraint>, Vec<Constraint>) =
        by_pair.into_values().partition(Constraint::is_must);
    let mut must = sample_keep(&must, cfg.must_link_cap, rng);
    let mut cannot = cannot;
    if !must.is_empty() && !cannot.is_empty() {
        let max_cannot = max_cannot_for(must.len(), cfg.must_fraction);
        if cannot.len() > max_cannot {
            cannot = sample_keep(&cannot, max_cannot, rng);
        } else {
            let min_must = min_must_for(cannot.len(), cfg.must_fraction);
            if must.len() > min_must {
                must = sample_keep(&must, min_must, rng);
            }
        }
    }
    let mut constraints = must;
    constraints.extend(cannot);
    constraints.sort_by_key(|c| c.pair());
    ConstraintSet { constraints }
}

/// Tags every word of the document.
pub fn tag_words(doc: &DocumentModel, tagger: &dyn Tagger) -> Vec<SemanticTag> {
    doc.words.iter().map(|w| tagger.tag(&w.text)).collect()
}

/// Full automatic constraint generation for a document with built lines.
pub fn generate_constraints(
    doc: &DocumentModel,
    visual: &[Vec<f64>],
    tagger: &dyn Tagger,
    cfg: &ConstraintConfig,
    rng: &mut impl Rng,
) -> Result<ConstraintSet> {
    cfg.validate()?;
    let tags = tag_words(doc, tagger);
    let intra = generate_intra_constraints(&doc.lines);
    let inter = generate_inter_constraints(doc, visual, &tags, cfg);
    Ok(consolidate_and_balance(&intra, &inter, cfg, rng))
}
