//! Synthetic documents with ground-truth categories, clustering metrics and
//! the benchmark harness.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::config::PipelineConfig;
use crate::document::{BBox, DocumentModel, WordId, WordUnit};
use crate::error::{Error, Result};
use crate::features::StyleAttrs;
use crate::pipeline::run_pipeline;
use crate::refine::UserSelection;
use crate::util::{derive_seed, seeded_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Template {
    Menu,
    Schedule,
    SimpleDoc,
    DenseDoc,
}

impl Template {
    pub fn name(self) -> &'static str {
        match self {
            Template::Menu => "MENU",
            Template::Schedule => "SCHEDULE",
            Template::SimpleDoc => "SIMPLE_DOC",
            Template::DenseDoc => "DENSE_DOC",
        }
    }

    fn default_entries(self) -> usize {
        match self {
            Template::Menu => 12,
            Template::Schedule => 10,
            Template::SimpleDoc => 6,
            Template::DenseDoc => 8,
        }
    }

    fn default_columns(self) -> usize {
        match self {
            Template::Menu | Template::DenseDoc => 2,
            Template::Schedule | Template::SimpleDoc => 1,
        }
    }
}

/// Token generator of a category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenKind {
    /// Single capitalized dish name.
    Names,
    /// Two or three capitalized words.
    Headings,
    /// Upper-case words.
    Caps,
    Prices,
    Times,
    Dates,
    /// Lower-case running text.
    Prose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub label: String,
    pub style: StyleAttrs,
    /// Word height as a fraction of the page height.
    pub height: f64,
    pub tokens: TokenKind,
    /// Number of instances; zero omits the category.
    pub count: usize,
    /// Whether the category is scored by the benchmark.
    #[serde(default)]
    pub evaluate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub columns: usize,
    /// Vertical advance after a line, in multiples of its height.
    pub row_pitch: f64,
    /// Std of the per-word position jitter, in multiples of the word height.
    pub jitter_std: f64,
    pub margin: f64,
    /// Page width over height.
    pub aspect_ratio: f64,
}

/// Template plus optional overrides. Omitted fields take template defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub template: Option<Template>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    /// Items, events, sections or paragraphs depending on the template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entries: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<LayoutSpec>,
    /// Replaces template categories with the same label.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<CategorySpec>,
}

impl SynthSpec {
    pub fn new(template: Template, seed: u64) -> Self {
        SynthSpec {
            template: Some(template),
            seed,
            ..Default::default()
        }
    }

    pub fn with_entries(mut self, n: usize) -> Self {
        self.entries = Some(n);
        self
    }

    pub fn template(&self) -> Template {
        self.template.unwrap_or(Template::Menu)
    }

    pub fn doc_id(&self) -> String {
        self.doc_id
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.template().name().to_lowercase(), self.seed))
    }

    pub fn entries(&self) -> usize {
        self.entries.unwrap_or_else(|| self.template().default_entries())
    }

    pub fn layout(&self) -> LayoutSpec {
        self.layout.unwrap_or(LayoutSpec {
            columns: self.template().default_columns(),
            row_pitch: 1.3,
            jitter_std: 0.02,
            margin: 0.05,
            aspect_ratio: 0.75,
        })
    }

    /// Template categories with overrides applied.
    pub fn categories(&self) -> Vec<CategorySpec> {
        let mut cats = default_categories(self.template(), self.entries());
        for o in &self.categories {
            match cats.iter_mut().find(|c| c.label == o.label) {
                Some(c) => *c = o.clone(),
                None => cats.push(o.clone()),
            }
        }
        cats
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layout();
        if l.columns == 0 || l.columns > 4 {
            return Err(Error::validation("layout.columns", "must be between 1 and 4"));
        }
        if !(l.row_pitch >= 1.0 && l.row_pitch.is_finite()) {
            return Err(Error::validation("layout.row_pitch", "must be at least 1"));
        }
        if !(l.jitter_std >= 0.0 && l.jitter_std <= 0.1) {
            return Err(Error::validation("layout.jitter_std", "must lie in [0, 0.1]"));
        }
        if !(0.0..0.3).contains(&l.margin) {
            return Err(Error::validation("layout.margin", "must lie in [0, 0.3)"));
        }
        if !(l.aspect_ratio > 0.2 && l.aspect_ratio < 5.0) {
            return Err(Error::validation("layout.aspect_ratio", "must lie in (0.2, 5)"));
        }
        let cats = self.categories();
        for (i, a) in cats.iter().enumerate() {
            for b in &cats[..i] {
                let look = |c: &CategorySpec| (c.style.font_family_id, c.style.bold, c.style.italic);
                if a.label == b.label {
                    return Err(Error::validation(format!("categories[{i}].label"), "duplicate label"));
                }
                if look(a) == look(b) && a.tokens == b.tokens {
                    return Err(Error::validation(
                        format!("categories[{i}]"),
                        format!("`{}` and `{}` share both look and token generator", a.label, b.label),
                    ));
                }
            }
        }
        for (i, c) in cats.iter().enumerate() {
            if !(c.height > 0.0 && c.height < 0.2) {
                return Err(Error::validation(format!("categories[{i}].height"), "must lie in (0, 0.2)"));
            }
            c.style
                .validate()
                .map_err(|m| Error::validation(format!("categories[{i}].style"), m))?;
        }
        Ok(())
    }
}

fn style(family: u32, bold: bool, italic: bool, size: f64, rgb: [u8; 3]) -> StyleAttrs {
    StyleAttrs {
        font_family_id: family,
        bold,
        italic,
        font_size: size,
        color_rgb: rgb,
    }
}

fn cat(label: &str, style: StyleAttrs, height: f64, tokens: TokenKind, count: usize, evaluate: bool) -> CategorySpec {
    CategorySpec {
        label: label.into(),
        style,
        height,
        tokens,
        count,
        evaluate,
    }
}

fn default_categories(t: Template, n: usize) -> Vec<CategorySpec> {
    use TokenKind::*;
    let sections = n.div_ceil(4).max(1);
    match t {
        Template::Menu => vec![
            cat("title", style(3, true, false, 26.0, [40, 20, 10]), 0.048, Caps, 1, false),
            cat("header", style(4, true, false, 17.0, [150, 30, 30]), 0.031, Caps, sections, false),
            cat("item", style(1, true, false, 13.0, [20, 20, 20]), 0.022, Names, n, true),
            cat("price", style(0, false, false, 12.0, [60, 60, 140]), 0.022, Prices, n, false),
            cat("desc", style(2, false, true, 9.5, [90, 90, 90]), 0.0155, Prose, n, true),
        ],
        Template::Schedule => vec![
            cat("title", style(3, true, false, 24.0, [20, 40, 90]), 0.045, Caps, 1, false),
            cat("date", style(4, true, false, 15.0, [120, 20, 20]), 0.028, Dates, sections, false),
            cat("time", style(0, false, false, 11.0, [20, 20, 20]), 0.019, Times, n, true),
            cat("event", style(1, true, false, 11.0, [20, 60, 20]), 0.019, Headings, n, true),
            cat("note", style(2, false, true, 8.5, [100, 100, 100]), 0.0135, Prose, n, false),
        ],
        Template::SimpleDoc => vec![
            cat("title", style(3, true, false, 28.0, [10, 10, 60]), 0.05, Caps, 1, false),
            cat("item", style(1, true, false, 16.0, [30, 30, 30]), 0.028, Headings, n, true),
            cat("desc", style(2, false, false, 11.0, [70, 70, 70]), 0.018, Prose, n, true),
            cat("footer", style(0, false, true, 9.0, [110, 110, 110]), 0.0135, Dates, 2, false),
        ],
        Template::DenseDoc => vec![
            cat("title", style(3, true, false, 20.0, [0, 0, 0]), 0.034, Headings, 1, false),
            cat("author", style(2, false, true, 12.0, [60, 60, 60]), 0.021, Headings, 1, false),
            cat("item", style(1, true, false, 11.0, [0, 0, 0]), 0.0175, Headings, n, true),
            cat("desc", style(0, false, false, 8.0, [30, 30, 30]), 0.0125, Prose, n, true),
            cat("page", style(0, false, false, 7.0, [80, 80, 80]), 0.0095, Dates, 1, false),
        ],
    }
}

const DISHES: &[&str] = &[
    "Bruschetta", "Carpaccio", "Gazpacho", "Minestrone", "Risotto", "Lasagna", "Ravioli", "Gnocchi",
    "Tagliatelle", "Osso", "Saltimbocca", "Paella", "Ratatouille", "Bouillabaisse", "Cassoulet",
    "Tiramisu", "Panna", "Cannoli", "Focaccia", "Calzone", "Polenta", "Arancini", "Burrata",
    "Ceviche", "Tartare", "Falafel", "Moussaka", "Souvlaki", "Shakshuka", "Goulash", "Schnitzel",
    "Pierogi", "Borscht", "Ramen", "Gyoza", "Tempura", "Bibimbap", "Bulgogi", "Pho", "Laksa",
];

const HEAD_WORDS: &[&str] = &[
    "Garden", "Market", "Evening", "Morning", "Studio", "Workshop", "Concert", "Lecture", "Gallery",
    "Opening", "Summer", "Winter", "Harbor", "Forest", "River", "Classic", "Modern", "Family",
    "Guided", "Local", "Open", "Night", "Public", "Annual", "Design", "Science", "History",
    "Methods", "Results", "Analysis", "Related", "Discussion", "Overview", "Model", "Training",
    "Evaluation", "Limitations", "Data", "Network", "Learning",
];

const CAPS_WORDS: &[&str] = &[
    "STARTERS", "MAINS", "DESSERTS", "DRINKS", "SPECIALS", "SOUPS", "SALADS", "PASTA", "GRILL",
    "BISTRO", "TRATTORIA", "FESTIVAL", "PROGRAM", "CAFE", "KITCHEN", "SEASON", "MENU", "GUIDE",
];

const PROSE: &[&str] = &[
    "with", "fresh", "basil", "tomato", "garlic", "olive", "oil", "served", "and", "roasted", "slow",
    "cooked", "herbs", "lemon", "butter", "cream", "sauce", "wild", "mushroom", "parmesan", "crisp",
    "house", "made", "bread", "seasonal", "greens", "smoked", "sea", "salt", "pepper", "honey",
    "the", "of", "in", "a", "for", "on", "to", "from", "by", "this", "we", "our", "is", "are",
    "method", "results", "show", "that", "model", "data", "each", "word", "group", "layout",
    "visitors", "can", "join", "free", "tickets", "available", "near", "entrance", "hall", "daily",
    "local", "artists", "present", "their", "work", "during", "weekend", "all", "ages", "welcome",
    "learn", "about", "history", "city", "small", "groups", "guided", "tour", "starts", "at",
    "approach", "uses", "pairs", "constraints", "training", "network", "features", "space",
];

const MONTHS: &[&str] = &["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"];

struct Tokens<'a> {
    rng: &'a mut ChaCha8Rng,
    currency: char,
}

impl Tokens<'_> {
    fn pick(&mut self, list: &[&str]) -> String {
        list.choose(self.rng).expect("non-empty list").to_string()
    }

    /// One phrase of the given kind; prose returns `words` tokens.
    fn phrase(&mut self, kind: TokenKind, words: usize) -> Vec<String> {
        match kind {
            TokenKind::Names => vec![self.pick(DISHES)],
            TokenKind::Headings => {
                let n = self.rng.random_range(2..=3);
                (0..n).map(|_| self.pick(HEAD_WORDS)).collect()
            }
            TokenKind::Caps => {
                let n = self.rng.random_range(1..=2);
                (0..n).map(|_| self.pick(CAPS_WORDS)).collect()
            }
            TokenKind::Prices => {
                let whole = self.rng.random_range(4..=38);
                let cents = [0, 50, 95, 99, 25, 75][self.rng.random_range(0..6)];
                vec![format!("{}{whole}.{cents:02}", self.currency)]
            }
            TokenKind::Times => {
                let h = self.rng.random_range(8..=21);
                let m = [0, 15, 30, 45][self.rng.random_range(0..4)];
                vec![format!("{h:02}:{m:02}")]
            }
            TokenKind::Dates => {
                let m = self.rng.random_range(0..12);
                let d = self.rng.random_range(1..=28);
                vec![MONTHS[m].to_string(), format!("{d}")]
            }
            TokenKind::Prose => (0..words.max(1)).map(|_| self.pick(PROSE)).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: BTreeMap<WordId, String>,
    /// Categories the benchmark scores.
    pub evaluate: Vec<String>,
}

impl GroundTruth {
    pub fn categories(&self) -> BTreeSet<&str> {
        self.labels.values().map(String::as_str).collect()
    }

    pub fn words_of(&self, label: &str) -> Vec<WordId> {
        self.labels.iter().filter(|(_, l)| *l == label).map(|(w, _)| *w).collect()
    }
}

/// Lays out words left to right and top to bottom in columns.
struct Page<'a> {
    layout: LayoutSpec,
    rng: &'a mut ChaCha8Rng,
    jitter: Normal<f64>,
    words: Vec<WordUnit>,
    labels: BTreeMap<WordId, String>,
    column: usize,
    y: f64,
    next_id: WordId,
}

const CHAR_WIDTH: f64 = 0.55;
/// Gap between words of one phrase, in multiples of the height (pixel units).
const WORD_GAP: f64 = 0.06;

impl Page<'_> {
    fn column_bounds(&self, col: usize) -> (f64, f64) {
        let m = self.layout.margin;
        let gutter = 0.06;
        let cols = self.layout.columns as f64;
        let width = (1.0 - 2.0 * m - gutter * (cols - 1.0)) / cols;
        let x0 = m + col as f64 * (width + gutter);
        (x0, x0 + width)
    }

    fn word_width(&self, text: &str, h: f64) -> f64 {
        CHAR_WIDTH * text.chars().count() as f64 * h / self.layout.aspect_ratio
    }

    fn gap(&self, h: f64) -> f64 {
        WORD_GAP * h / self.layout.aspect_ratio
    }

    fn phrase_width(&self, tokens: &[String], h: f64) -> f64 {
        tokens.iter().map(|t| self.word_width(t, h)).sum::<f64>() + self.gap(h) * tokens.len().saturating_sub(1) as f64
    }

    /// Moves down by `dy`, wrapping to the next column when needed.
    fn advance(&mut self, dy: f64, need: f64) -> Result<()> {
        self.y += dy;
        if self.y + need > 1.0 - self.layout.margin {
            self.column += 1;
            self.y = self.layout.margin + 0.08;
            if self.column >= self.layout.columns {
                return Err(Error::LayoutOverflow(format!(
                    "content does not fit in {} column(s)",
                    self.layout.columns
                )));
            }
        }
        Ok(())
    }

    fn ensure_room(&mut self, need: f64) -> Result<()> {
        self.advance(0.0, need)
    }

    fn place(&mut self, tokens: &[String], x: f64, h: f64, cat: &CategorySpec) -> Result<f64> {
        let mut cx = x;
        let dy = self.jitter.sample(self.rng) * h * 0.5;
        for t in tokens {
            let w = self.word_width(t, h);
            if cx + w > 1.0 - 0.005 {
                return Err(Error::LayoutOverflow(format!("`{t}` runs past the right edge")));
            }
            let jx = self.jitter.sample(self.rng) * h * 0.2 / self.layout.aspect_ratio;
            let jy = self.jitter.sample(self.rng) * h * 0.5;
            let bbox = BBox::new((cx + jx.min(0.0)).max(0.0), (self.y + dy + jy).clamp(0.0, 1.0 - h), w, h);
            let mut st = cat.style.clone();
            st.font_size = (st.font_size * (1.0 + 0.5 * self.jitter.sample(self.rng))).max(1.0);
            for c in st.color_rgb.iter_mut() {
                *c = (*c as f64 + 40.0 * self.jitter.sample(self.rng)).round().clamp(0.0, 255.0) as u8;
            }
            let id = self.next_id;
            self.next_id += 1;
            self.words.push(WordUnit {
                id,
                text: t.clone(),
                bbox,
                line_id: None,
                style: Some(st),
                feature: None,
            });
            self.labels.insert(id, cat.label.clone());
            cx += w + self.gap(h);
        }
        Ok(cx - self.gap(h))
    }

    /// Places a phrase left-aligned in the current column and moves down.
    fn line(&mut self, tokens: &[String], cat: &CategorySpec, indent: f64) -> Result<()> {
        let h = cat.height;
        self.ensure_room(h)?;
        let (x0, _) = self.column_bounds(self.column);
        self.place(tokens, x0 + indent, h, cat)?;
        self.advance(h * self.layout.row_pitch, h)
    }

    /// Wraps prose into the current column.
    fn paragraph(&mut self, tokens: &[String], cat: &CategorySpec, indent: f64) -> Result<()> {
        let h = cat.height;
        let mut line: Vec<String> = Vec::new();
        for t in tokens {
            line.push(t.clone());
            let (x0, x1) = self.column_bounds(self.column);
            if x0 + indent + self.phrase_width(&line, h) > x1 && line.len() > 1 {
                let last = line.pop().expect("non-empty");
                self.line(&line, cat, indent)?;
                line = vec![last];
            }
        }
        if !line.is_empty() {
            self.line(&line, cat, indent)?;
        }
        Ok(())
    }
}

fn find<'a>(cats: &'a [CategorySpec], label: &str) -> Option<&'a CategorySpec> {
    cats.iter().find(|c| c.label == label && c.count > 0)
}

/// Generates a document with style attributes and its ground truth.
pub fn generate_document(spec: &SynthSpec) -> Result<(DocumentModel, GroundTruth)> {
    spec.validate()?;
    let layout = spec.layout();
    let cats = spec.categories();
    let mut rng = seeded_rng(derive_seed(spec.seed, spec.template().name()));
    let mut token_rng = seeded_rng(derive_seed(spec.seed, "tokens"));
    let mut tokens = Tokens {
        rng: &mut token_rng,
        currency: ['$', '€', '£'][(spec.seed % 3) as usize],
    };
    let mut page = Page {
        layout,
        jitter: Normal::new(0.0, layout.jitter_std.max(1e-12)).expect("valid std"),
        rng: &mut rng,
        words: Vec::new(),
        labels: BTreeMap::new(),
        column: 0,
        y: layout.margin,
        next_id: 1,
    };
    // the title spans the page above the columns
    if let Some(title) = find(&cats, "title") {
        let words = tokens.phrase(title.tokens, 3);
        page.place(&words, layout.margin, title.height, title)?;
        page.y += title.height * 1.8;
    }
    if let Some(author) = find(&cats, "author") {
        let words = tokens.phrase(author.tokens, 3);
        page.place(&words, layout.margin, author.height, author)?;
        page.y += author.height * 2.0;
    }
    let top = page.y;
    match spec.template() {
        Template::Menu => layout_menu(&mut page, &mut tokens, &cats, top)?,
        Template::Schedule => layout_schedule(&mut page, &mut tokens, &cats, top)?,
        Template::SimpleDoc | Template::DenseDoc => layout_sections(&mut page, &mut tokens, &cats, top)?,
    }
    let footers: Vec<&CategorySpec> = ["footer", "page"].iter().filter_map(|l| find(&cats, l)).collect();
    for f in footers {
        let mut x = layout.margin;
        for _ in 0..f.count {
            let words = tokens.phrase(f.tokens, 2);
            let y = 1.0 - layout.margin * 0.6 - f.height;
            page.y = y;
            x = page.place(&words, x, f.height, f)? + 0.12;
        }
    }
    let labels = page.labels;
    let words = page.words;
    let evaluate = cats
        .iter()
        .filter(|c| c.evaluate && c.count > 0 && labels.values().any(|l| *l == c.label))
        .map(|c| c.label.clone())
        .collect();
    let doc = DocumentModel::new(spec.doc_id(), layout.aspect_ratio, words);
    doc.validate()?;
    check_no_overlap(&doc)?;
    Ok((doc, GroundTruth { labels, evaluate }))
}

fn layout_menu(page: &mut Page, tokens: &mut Tokens, cats: &[CategorySpec], top: f64) -> Result<()> {
    page.y = top;
    let item = find(cats, "item");
    let price = find(cats, "price");
    let desc = find(cats, "desc");
    let header = find(cats, "header");
    let n = cats.iter().filter(|c| c.count > 0).map(|c| c.count).max().unwrap_or(0);
    let entries = item.map_or(n, |c| c.count);
    let per_section = header.map_or(usize::MAX, |h| entries.div_ceil(h.count.max(1)).max(1));
    let mut sections_left = header.map_or(0, |h| h.count);
    for i in 0..entries {
        if i % per_section == 0 && sections_left > 0 {
            let h = header.expect("sections imply a header");
            if i > 0 {
                page.advance(h.height * 0.6, h.height)?;
            }
            let words = tokens.phrase(h.tokens, 1);
            page.line(&words, h, 0.0)?;
            sections_left -= 1;
        }
        let item_h = item.map_or(0.0, |c| c.height).max(price.map_or(0.0, |c| c.height));
        let desc_need = desc.map_or(0.0, |d| 2.0 * d.height * page.layout.row_pitch);
        page.ensure_room(item_h + desc_need)?;
        let (x0, x1) = page.column_bounds(page.column);
        if let Some(item) = item.filter(|c| i < c.count) {
            let words = tokens.phrase(item.tokens, 1);
            page.place(&words, x0, item.height, item)?;
        }
        if let Some(price) = price.filter(|c| i < c.count) {
            let words = tokens.phrase(price.tokens, 1);
            let w = page.phrase_width(&words, price.height);
            page.place(&words, x1 - w, price.height, price)?;
        }
        if item_h > 0.0 {
            page.advance(item_h * page.layout.row_pitch, 0.0)?;
        }
        if let Some(desc) = desc.filter(|c| i < c.count) {
            let len = tokens.rng.random_range(5..=11);
            let words = tokens.phrase(desc.tokens, len);
            page.paragraph(&words, desc, 0.0)?;
        }
        page.advance(item_h * 0.7, 0.0)?;
    }
    Ok(())
}

fn layout_schedule(page: &mut Page, tokens: &mut Tokens, cats: &[CategorySpec], top: f64) -> Result<()> {
    page.y = top;
    let date = find(cats, "date");
    let time = find(cats, "time");
    let event = find(cats, "event");
    let note = find(cats, "note");
    let entries = [time, event].iter().flatten().map(|c| c.count).max().unwrap_or(0);
    let per_day = date.map_or(usize::MAX, |d| entries.div_ceil(d.count.max(1)).max(1));
    let mut days_left = date.map_or(0, |d| d.count);
    for i in 0..entries {
        if i % per_day == 0 && days_left > 0 {
            let d = date.expect("days imply a date category");
            if i > 0 {
                page.advance(d.height * 0.5, d.height)?;
            }
            let words = tokens.phrase(d.tokens, 2);
            page.line(&words, d, 0.0)?;
            days_left -= 1;
        }
        let row_h = [time, event].iter().flatten().map(|c| c.height).fold(0.0, f64::max);
        page.ensure_room(row_h + note.map_or(0.0, |n| n.height * 1.5))?;
        let (x0, x1) = page.column_bounds(page.column);
        if let Some(t) = time.filter(|c| i < c.count) {
            let words = tokens.phrase(t.tokens, 1);
            page.place(&words, x0, t.height, t)?;
        }
        if let Some(e) = event.filter(|c| i < c.count) {
            let words = tokens.phrase(e.tokens, 2);
            page.place(&words, x0 + 0.25 * (x1 - x0), e.height, e)?;
        }
        page.advance(row_h * page.layout.row_pitch, 0.0)?;
        if let Some(n) = note.filter(|c| i < c.count) {
            let len = tokens.rng.random_range(3..=7);
            let words = tokens.phrase(n.tokens, len);
            let (x0, x1) = page.column_bounds(page.column);
            let indent = 0.25 * (x1 - x0);
            page.paragraph(&words, n, indent)?;
        }
        page.advance(row_h * 0.5, 0.0)?;
    }
    Ok(())
}

fn layout_sections(page: &mut Page, tokens: &mut Tokens, cats: &[CategorySpec], top: f64) -> Result<()> {
    page.y = top;
    let item = find(cats, "item");
    let desc = find(cats, "desc");
    let entries = [item, desc].iter().flatten().map(|c| c.count).max().unwrap_or(0);
    let dense = desc.is_some_and(|d| d.height < 0.015);
    for i in 0..entries {
        if let Some(it) = item.filter(|c| i < c.count) {
            page.ensure_room(it.height + desc.map_or(0.0, |d| 2.0 * d.height * page.layout.row_pitch))?;
            let words = tokens.phrase(it.tokens, 2);
            page.line(&words, it, 0.0)?;
            page.advance(it.height * 0.2, 0.0)?;
        }
        if let Some(d) = desc.filter(|c| i < c.count) {
            let len = if dense {
                tokens.rng.random_range(22..=34)
            } else {
                tokens.rng.random_range(10..=18)
            };
            let words = tokens.phrase(d.tokens, len);
            page.paragraph(&words, d, 0.0)?;
        }
        let gap = item.or(desc).map_or(0.0, |c| c.height);
        page.advance(gap * 0.8, 0.0)?;
    }
    Ok(())
}

fn check_no_overlap(doc: &DocumentModel) -> Result<()> {
    let mut order: Vec<usize> = (0..doc.words.len()).collect();
    order.sort_by(|&a, &b| doc.words[a].bbox.x.total_cmp(&doc.words[b].bbox.x));
    for (k, &i) in order.iter().enumerate() {
        let a = &doc.words[i].bbox;
        for &j in &order[k + 1..] {
            let b = &doc.words[j].bbox;
            if b.x >= a.right() {
                break;
            }
            if b.y < a.bottom() && a.y < b.bottom() {
                return Err(Error::LayoutOverflow(format!(
                    "words {} and {} overlap",
                    doc.words[i].id, doc.words[j].id
                )));
            }
        }
    }
    Ok(())
}

fn check_same_words(assignment: &ClusterAssignment, gt: &GroundTruth) -> Result<()> {
    let mut assigned: Vec<WordId> = assignment.clusters.iter().flat_map(|c| c.word_ids.iter().copied()).collect();
    assigned.sort_unstable();
    if assigned.len() != gt.labels.len() || assigned.iter().zip(gt.labels.keys()).any(|(a, b)| a != b) {
        return Err(Error::validation("assignment", "word set differs from the ground truth"));
    }
    Ok(())
}

/// Fraction of words whose cluster's majority category is their own.
pub fn purity(assignment: &ClusterAssignment, gt: &GroundTruth) -> Result<f64> {
    check_same_words(assignment, gt)?;
    if gt.labels.is_empty() {
        return Ok(1.0);
    }
    let mut hits = 0usize;
    for c in &assignment.clusters {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in &c.word_ids {
            *counts.entry(gt.labels[w].as_str()).or_default() += 1;
        }
        hits += counts.values().max().copied().unwrap_or(0);
    }
    Ok(hits as f64 / gt.labels.len() as f64)
}

/// Scribbles needed to isolate `category`: one per extra fragment to merge
/// and two per impure cluster to split.
pub fn scribble_estimate(assignment: &ClusterAssignment, gt: &GroundTruth, category: &str) -> Result<usize> {
    if !gt.labels.values().any(|l| l == category) {
        return Err(Error::validation("category", format!("unknown category `{category}`")));
    }
    let mut touching = 0usize;
    let mut impure = 0usize;
    for c in &assignment.clusters {
        let labels: Vec<&str> = c.word_ids.iter().filter_map(|w| gt.labels.get(w).map(String::as_str)).collect();
        if labels.contains(&category) {
            touching += 1;
            if labels.iter().any(|l| *l != category) {
                impure += 1;
            }
        }
    }
    Ok(touching.saturating_sub(1) + 2 * impure)
}

/// Selections a perfect annotator would make: one must group per split
/// category and one cannot group per pair of categories sharing a cluster,
/// spanning all words of both categories. Together they cover every
/// mis-grouped word pair.
pub fn oracle_selections(assignment: &ClusterAssignment, gt: &GroundTruth) -> Vec<UserSelection> {
    let mut selections = Vec::new();
    let mut colliding: BTreeSet<(&str, &str)> = BTreeSet::new();
    for category in gt.categories() {
        let fragments = assignment
            .clusters
            .iter()
            .filter(|c| c.word_ids.iter().any(|w| gt.labels.get(w).is_some_and(|l| l == category)))
            .count();
        if fragments > 1 {
            selections.push(UserSelection::MustGroup {
                word_ids: gt.words_of(category),
            });
        }
    }
    for c in &assignment.clusters {
        let labels: BTreeSet<&str> = c.word_ids.iter().filter_map(|w| gt.labels.get(w).map(String::as_str)).collect();
        let labels: Vec<&str> = labels.into_iter().collect();
        for (i, a) in labels.iter().enumerate() {
            for b in &labels[i + 1..] {
                colliding.insert((a, b));
            }
        }
    }
    for (a, b) in colliding {
        selections.push(UserSelection::CannotGroup {
            group_a: gt.words_of(a),
            group_b: gt.words_of(b),
        });
    }
    selections
}

/// Benchmark corpus file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corpus {
    pub documents: Vec<SynthSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocResult {
    pub doc_id: String,
    pub template: Template,
    pub seed: u64,
    pub words: usize,
    pub lines: usize,
    pub clusters: usize,
    pub purity: f64,
    pub scribbles: BTreeMap<String, usize>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSummary {
    pub template: Template,
    pub documents: usize,
    pub mean_purity: f64,
    pub mean_scribbles: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub documents: Vec<DocResult>,
    pub templates: Vec<TemplateSummary>,
    pub seconds: f64,
}

impl BenchReport {
    /// Per-document rows; scribble columns cover every evaluated category.
    pub fn to_csv(&self) -> String {
        let cats: BTreeSet<&String> = self.documents.iter().flat_map(|d| d.scribbles.keys()).collect();
        let mut out = String::from("doc_id,template,seed,words,lines,clusters,purity");
        for c in &cats {
            out.push_str(&format!(",scribbles_{c}"));
        }
        out.push('\n');
        for d in &self.documents {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.4}",
                d.doc_id,
                d.template.name(),
                d.seed,
                d.words,
                d.lines,
                d.clusters,
                d.purity
            ));
            for c in &cats {
                match d.scribbles.get(*c) {
                    Some(s) => out.push_str(&format!(",{s}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Worst per-template mean over the evaluated categories.
    pub fn worst_mean_scribbles(&self) -> f64 {
        self.templates
            .iter()
            .flat_map(|t| t.mean_scribbles.values().copied())
            .fold(0.0, f64::max)
    }
}

fn summarize(docs: &[DocResult]) -> Vec<TemplateSummary> {
    let mut by: BTreeMap<Template, Vec<&DocResult>> = BTreeMap::new();
    for d in docs {
        by.entry(d.template).or_default().push(d);
    }
    by.into_iter()
        .map(|(template, ds)| {
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for d in &ds {
                for (c, s) in &d.scribbles {
                    let e = sums.entry(c.clone()).or_default();
                    e.0 += *s as f64;
                    e.1 += 1;
                }
            }
            TemplateSummary {
                template,
                documents: ds.len(),
                mean_purity: ds.iter().map(|d| d.purity).sum::<f64>() / ds.len() as f64,
                mean_scribbles: sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
            }
        })
        .collect()
}

/// Evaluates one generated document with the pipeline.
pub fn evaluate_document(spec: &SynthSpec, cfg: &PipelineConfig) -> Result<DocResult> {
    let started = Instant::now();
    let (doc, gt) = generate_document(spec)?;
    let mut run_cfg = cfg.clone();
    run_cfg.seed = derive_seed(cfg.seed, &spec.doc_id());
    let state = run_pipeline(doc, &run_cfg)?;
    let mut scribbles = BTreeMap::new();
    for c in &gt.evaluate {
        scribbles.insert(c.clone(), scribble_estimate(&state.assignment, &gt, c)?);
    }
    Ok(DocResult {
        doc_id: spec.doc_id(),
        template: spec.template(),
        seed: spec.seed,
        words: state.doc.words.len(),
        lines: state.doc.lines.len(),
        clusters: state.assignment.len(),
        purity: purity(&state.assignment, &gt)?,
        scribbles,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn run_benchmark(corpus: &[SynthSpec], cfg: &PipelineConfig) -> Result<BenchReport> {
    let started = Instant::now();
    let mut documents = Vec::with_capacity(corpus.len());
    for spec in corpus {
        let r = evaluate_document(spec, cfg)?;
        log::info!("{}: purity {:.3}, scribbles {:?}, {:.1}s", r.doc_id, r.purity, r.scribbles, r.seconds);
        documents.push(r);
    }
    Ok(BenchReport {
        templates: summarize(&documents),
        documents,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// The bundled benchmark corpus: ten seeded documents per evaluated template.
pub fn standard_corpus() -> Corpus {
    let mut documents = Vec::new();
    for (t, base, entries) in [
        (Template::Menu, 100u64, [11usize, 12, 13, 14, 15]),
        (Template::SimpleDoc, 200, [7, 7, 7, 7, 7]),
        (Template::DenseDoc, 300, [6, 8, 10, 12, 9]),
    ] {
        for k in 0..10u64 {
            documents.push(SynthSpec::new(t, base + k).with_entries(entries[k as usize % 5]));
        }
    }
    Corpus { documents }
}

/// Checks generated-label consistency with random words for property tests.
pub fn random_spec(rng: &mut impl Rng) -> SynthSpec {
    let t = [Template::Menu, Template::Schedule, Template::SimpleDoc, Template::DenseDoc][rng.random_range(0..4)];
    let entries = match t {
        Template::Menu => rng.random_range(1..=16),
        Template::Schedule => rng.random_range(1..=12),
        Template::SimpleDoc => rng.random_range(1..=7),
        Template::DenseDoc => rng.random_range(1..=8),
    };
    SynthSpec::new(t, rng.random()).with_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn menu_example() {
        let (doc, gt) = generate_document(&SynthSpec::new(Template::Menu, 1).with_entries(10)).unwrap();
        assert_eq!(gt.words_of("item").len(), 10);
        assert_eq!(gt.words_of("price").len(), 10);
        assert!(!gt.words_of("desc").is_empty());
        assert_eq!(gt.labels.len(), doc.words.len());
        assert_eq!(gt.evaluate, vec!["item".to_string(), "desc".to_string()]);
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec::new(Template::DenseDoc, 9);
        assert_eq!(generate_document(&spec).unwrap(), generate_document(&spec).unwrap());
        let other = SynthSpec::new(Template::DenseDoc, 10);
        assert_ne!(generate_document(&spec).unwrap().0, generate_document(&other).unwrap().0);
    }

    #[test]
    fn zero_count_categories_are_omitted() {
        let mut spec = SynthSpec::new(Template::Menu, 2);
        let mut price = spec.categories().into_iter().find(|c| c.label == "price").unwrap();
        price.count = 0;
        spec.categories.push(price);
        let (_, gt) = generate_document(&spec).unwrap();
        assert!(gt.words_of("price").is_empty());
        assert!(!gt.categories().contains("price"));
    }

    #[test]
    fn overflow_is_reported() {
        let spec = SynthSpec::new(Template::Menu, 3).with_entries(200);
        assert!(matches!(generate_document(&spec), Err(Error::LayoutOverflow(_))));
    }

    #[test]
    fn every_template_generates_valid_lines() {
        use crate::document::LineParams;
        for t in [Template::Menu, Template::Schedule, Template::SimpleDoc, Template::DenseDoc] {
            let (doc, gt) = generate_document(&SynthSpec::new(t, 4)).unwrap();
            let doc = doc.with_lines(&LineParams::default());
            doc.validate().unwrap();
            // contextual lines never mix categories
            for line in &doc.lines {
                let labels: BTreeSet<&String> = line.word_ids.iter().map(|w| &gt.labels[w]).collect();
                assert_eq!(labels.len(), 1, "{t:?} line {:?}", line.word_ids);
            }
        }
    }

    fn gt(pairs: &[(WordId, &str)]) -> GroundTruth {
        GroundTruth {
            labels: pairs.iter().map(|(w, l)| (*w, l.to_string())).collect(),
            evaluate: vec![],
        }
    }

    #[test]
    fn purity_examples() {
        let truth = gt(&[(1, "a"), (2, "a"), (3, "b"), (4, "b")]);
        let perfect = ClusterAssignment::from_groups(vec![vec![1, 2], vec![3, 4]]);
        assert_eq!(purity(&perfect, &truth).unwrap(), 1.0);
        let one = ClusterAssignment::from_groups(vec![vec![1, 2, 3, 4]]);
        assert_eq!(purity(&one, &truth).unwrap(), 0.5);
        let small = gt(&[(1, "x"), (2, "x"), (3, "y")]);
        let split = ClusterAssignment::from_groups(vec![vec![1, 2], vec![3]]);
        assert_eq!(purity(&split, &small).unwrap(), 1.0);
        let missing = ClusterAssignment::from_groups(vec![vec![1, 2]]);
        assert!(purity(&missing, &small).is_err());
    }

    #[test]
    fn scribble_examples() {
        let truth = gt(&[(1, "a"), (2, "a"), (3, "a"), (4, "b")]);
        let exact = ClusterAssignment::from_groups(vec![vec![1, 2, 3], vec![4]]);
        assert_eq!(scribble_estimate(&exact, &truth, "a").unwrap(), 0);
        let split = ClusterAssignment::from_groups(vec![vec![1], vec![2], vec![3], vec![4]]);
        assert_eq!(scribble_estimate(&split, &truth, "a").unwrap(), 2);
        let mixed = ClusterAssignment::from_groups(vec![vec![1, 2, 3, 4]]);
        assert_eq!(scribble_estimate(&mixed, &truth, "a").unwrap(), 2);
        assert!(scribble_estimate(&exact, &truth, "zzz").is_err());
    }

    #[test]
    fn oracle_covers_every_misgrouped_pair() {
        use crate::refine::selection_to_constraints;
        let truth = gt(&[(1, "a"), (2, "a"), (3, "b"), (4, "a"), (5, "b")]);
        let clusters = ClusterAssignment::from_groups(vec![vec![1, 2, 3], vec![4], vec![5]]);
        let sels = oracle_selections(&clusters, &truth);
        let pairs: BTreeSet<(WordId, WordId, bool)> = sels
            .iter()
            .flat_map(|s| selection_to_constraints(s).unwrap())
            .map(|c| (c.a, c.b, c.is_must()))
            .collect();
        let same = clusters.word_to_cluster();
        for a in 1..=5u64 {
            for b in a + 1..=5 {
                let together = same[&a] == same[&b];
                let alike = truth.labels[&a] == truth.labels[&b];
                if together != alike {
                    assert!(pairs.contains(&(a, b, alike)), "({a}, {b}) uncovered");
                }
            }
        }
        assert!(oracle_selections(&ClusterAssignment::from_groups(vec![vec![1, 2, 4], vec![3, 5]]), &truth).is_empty());
    }

    #[test]
    fn empty_benchmark() {
        let report = run_benchmark(&[], &PipelineConfig::default()).unwrap();
        assert!(report.documents.is_empty() && report.templates.is_empty());
        assert_eq!(report.to_csv().lines().count(), 1);
    }

    #[test]
    fn standard_corpus_sizes() {
        for spec in standard_corpus().documents {
            let (doc, gt) = generate_document(&spec).unwrap();
            let n = doc.words.len();
            assert!((100..=400).contains(&n), "{} has {n} words", spec.doc_id());
            let k = gt.categories().len();
            assert!((3..=6).contains(&k), "{} has {k} categories", spec.doc_id());
        }
    }

    #[test]
    fn corpus_json_round_trip() {
        let corpus = standard_corpus();
        assert_eq!(corpus.documents.len(), 30);
        let text = serde_json::to_string_pretty(&corpus).unwrap();
        let back: Corpus = serde_json::from_str(&text).unwrap();
        assert_eq!(back, corpus);
        let minimal: SynthSpec = serde_json::from_str(r#"{"template":"SCHEDULE","seed":4}"#).unwrap();
        assert_eq!(minimal.template(), Template::Schedule);
    }
}
