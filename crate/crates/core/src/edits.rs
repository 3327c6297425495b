//! Cluster-wide edits on the document model and SVG rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::clustering::ClusterAssignment;
use crate::constraints::{semantic_tag, SemanticTag};
use crate::document::{BBox, DocumentModel, WordId};
use crate::error::{Error, Result};
use crate::features::StyleAttrs;
use crate::util::fnv1a;

/// Exact decimal `mantissa / 10^scale`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decimal {
    pub mantissa: i128,
    pub scale: u32,
}

impl Decimal {
    pub fn parse(text: &str) -> Option<Decimal> {
        let t = text.trim();
        let (neg, body) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        if int.is_empty() && frac.is_empty() {
            return None;
        }
        if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 18 {
            return None;
        }
        let digits = format!("{int}{frac}");
        let m: i128 = digits.parse().ok()?;
        Some(Decimal {
            mantissa: if neg { -m } else { m },
            scale: frac.len() as u32,
        })
    }

    fn rescale(self, scale: u32) -> i128 {
        self.mantissa * 10i128.pow(scale - self.scale)
    }
}

impl std::fmt::Display for Decimal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sign = if self.mantissa < 0 { "-" } else { "" };
        let abs = self.mantissa.unsigned_abs();
        if self.scale == 0 {
            return write!(f, "{sign}{abs}");
        }
        let p = 10u128.pow(self.scale);
        write!(f, "{sign}{}.{:0w$}", abs / p, abs % p, w = self.scale as usize)
    }
}

impl Serialize for Decimal {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        let text = match &v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            _ => return Err(serde::de::Error::custom("expected a decimal number or string")),
        };
        Decimal::parse(&text).ok_or_else(|| serde::de::Error::custom(format!("invalid decimal `{text}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum EditSpec {
    SetColor { rgb: [u8; 3] },
    SetWeight { bold: bool },
    SetItalic { italic: bool },
    /// Scales font size and box around the top-left corner.
    ScaleFont { factor: f64 },
    Delete,
    /// Bold plus a font scale of `1 + 0.25 * intensity`.
    Emphasize { intensity: f64 },
    NumericShift { delta: Decimal },
    TimeShift { delta_minutes: i64 },
    FindReplace { pattern: String, replacement: String },
    AlignX { target_x: f64 },
    Translate { dx: f64, dy: f64 },
}

impl EditSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            EditSpec::ScaleFont { factor } if !(factor.is_finite() && *factor > 0.0) => {
                Err(Error::validation("factor", "must be positive"))
            }
            EditSpec::Emphasize { intensity } if !(*intensity > 0.0 && *intensity <= 1.0) => {
                Err(Error::validation("intensity", "must lie in (0, 1]"))
            }
            EditSpec::FindReplace { pattern, .. } if pattern.is_empty() => {
                Err(Error::validation("pattern", "must not be empty"))
            }
            EditSpec::AlignX { target_x } if !(0.0..=1.0).contains(target_x) => {
                Err(Error::validation("target_x", "must lie in [0, 1]"))
            }
            EditSpec::Translate { dx, dy } if !(dx.is_finite() && dy.is_finite()) => {
                Err(Error::validation("dx", "must be finite"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditLogEntry {
    pub cluster_id: usize,
    pub spec: EditSpec,
    /// Members that were changed (or removed).
    pub affected: Vec<WordId>,
    /// Members the edit does not apply to.
    pub skipped: Vec<WordId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditLog {
    pub entries: Vec<EditLogEntry>,
}

impl EditLog {
    pub fn push(&mut self, entry: EditLogEntry) {
        self.entries.push(entry);
    }

    /// Re-applies every entry to `original`.
    pub fn replay(&self, original: &DocumentModel) -> Result<DocumentModel> {
        let mut doc = original.clone();
        for e in &self.entries {
            let members: Vec<WordId> = e.affected.iter().chain(&e.skipped).copied().collect();
            doc = apply_to_words(&doc, &e.spec, &members)?.0;
        }
        Ok(doc)
    }
}

/// Applies `spec` to every word of cluster `cluster_id`.
pub fn apply_edit(
    doc: &DocumentModel,
    assignment: &ClusterAssignment,
    cluster_id: usize,
    spec: &EditSpec,
) -> Result<(DocumentModel, EditLogEntry)> {
    let cluster = assignment.cluster(cluster_id).ok_or(Error::UnknownCluster(cluster_id))?;
    let (out, affected, skipped) = apply_to_words(doc, spec, &cluster.word_ids)?;
    Ok((
        out,
        EditLogEntry {
            cluster_id,
            spec: spec.clone(),
            affected,
            skipped,
        },
    ))
}

type Applied = (DocumentModel, Vec<WordId>, Vec<WordId>);

/// Applies `spec` to the listed words; returns the new document and the
/// affected and skipped ids (both sorted).
pub fn apply_to_words(doc: &DocumentModel, spec: &EditSpec, members: &[WordId]) -> Result<Applied> {
    spec.validate()?;
    let mut out = doc.clone();
    let mut ids: Vec<WordId> = members.iter().copied().filter(|id| doc.word(*id).is_some()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut affected = Vec::new();
    let mut skipped = Vec::new();
    match spec {
        EditSpec::Delete => {
            out.words.retain(|w| ids.binary_search(&w.id).is_err());
            affected = ids;
        }
        EditSpec::AlignX { target_x } => {
            // member words grouped by line; lineless words align on their own
            let mut groups: BTreeMap<(Option<usize>, WordId), Vec<usize>> = BTreeMap::new();
            for id in &ids {
                let i = out.word_index(*id).expect("filtered");
                let key = match out.words[i].line_id {
                    Some(l) => (Some(l), 0),
                    None => (None, *id),
                };
                groups.entry(key).or_default().push(i);
            }
            for members in groups.values() {
                let first = members
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        out.words[a].bbox.x.total_cmp(&out.words[b].bbox.x).then(out.words[a].id.cmp(&out.words[b].id))
                    })
                    .expect("non-empty group");
                let delta = target_x - out.words[first].bbox.x;
                for &i in members {
                    out.words[i].bbox = shifted(&out.words[i].bbox, delta, 0.0);
                }
            }
            affected = ids;
        }
        _ => {
            for id in ids {
                let i = out.word_index(id).expect("filtered");
                if edit_word(&mut out.words[i], spec) {
                    affected.push(id);
                } else {
                    skipped.push(id);
                }
            }
        }
    }
    out.refresh_lines();
    if matches!(spec, EditSpec::Delete) {
        let live: Vec<usize> = out.lines.iter().map(|l| l.id).collect();
        for w in &mut out.words {
            if w.line_id.is_some_and(|l| !live.contains(&l)) {
                w.line_id = None;
            }
        }
    }
    Ok((out, affected, skipped))
}

fn shifted(b: &BBox, dx: f64, dy: f64) -> BBox {
    BBox {
        x: (b.x + dx).clamp(0.0, (1.0 - b.w).max(0.0)),
        y: (b.y + dy).clamp(0.0, (1.0 - b.h).max(0.0)),
        ..*b
    }
}

fn scaled(b: &BBox, factor: f64) -> BBox {
    let w = (b.w * factor).min(1.0);
    let h = (b.h * factor).min(1.0);
    BBox {
        x: b.x.min(1.0 - w),
        y: b.y.min(1.0 - h),
        w,
        h,
    }
}

fn style_of(word: &mut crate::document::WordUnit) -> &mut StyleAttrs {
    word.style.get_or_insert_with(StyleAttrs::default)
}

/// Edits one word in place; false when the edit does not apply to it.
fn edit_word(word: &mut crate::document::WordUnit, spec: &EditSpec) -> bool {
    match spec {
        EditSpec::SetColor { rgb } => style_of(word).color_rgb = *rgb,
        EditSpec::SetWeight { bold } => style_of(word).bold = *bold,
        EditSpec::SetItalic { italic } => style_of(word).italic = *italic,
        EditSpec::ScaleFont { factor } => {
            style_of(word).font_size *= factor;
            word.bbox = scaled(&word.bbox, *factor);
        }
        EditSpec::Emphasize { intensity } => {
            let factor = 1.0 + 0.25 * intensity;
            let s = style_of(word);
            s.bold = true;
            s.font_size *= factor;
            word.bbox = scaled(&word.bbox, factor);
        }
        EditSpec::NumericShift { delta } => match shift_numeric(&word.text, *delta) {
            Some(t) => word.text = t,
            None => return false,
        },
        EditSpec::TimeShift { delta_minutes } => match shift_time(&word.text, *delta_minutes) {
            Some(t) => word.text = t,
            None => return false,
        },
        EditSpec::FindReplace { pattern, replacement } => {
            if !word.text.contains(pattern.as_str()) {
                return false;
            }
            let t = word.text.replace(pattern.as_str(), replacement);
            if t.trim().is_empty() {
                return false;
            }
            word.text = t;
        }
        EditSpec::Translate { dx, dy } => word.bbox = shifted(&word.bbox, *dx, *dy),
        EditSpec::Delete | EditSpec::AlignX { .. } => unreachable!("handled per group"),
    }
    true
}

static NUMERIC: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(-?)(\d+)(?:\.(\d+))?").unwrap());
static DOTTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d{1,2}\.\d{1,2}$").unwrap());
static CLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{1,2}):(\d{2})(\s?)(?:([aApP])(\.?)([mM])(\.?))?$").unwrap());

/// Adds `delta` to the first number of a NUMBER or PRICE token, keeping its
/// decimals and zero padding.
pub fn shift_numeric(text: &str, delta: Decimal) -> Option<String> {
    let applies = match semantic_tag(text) {
        SemanticTag::Number | SemanticTag::Price => true,
        // "9.99" also satisfies the date rule; a bare two-part dotted token
        // reads as a decimal here
        SemanticTag::Date => DOTTED.is_match(text.trim()),
        _ => false,
    };
    if !applies {
        return None;
    }
    let caps = NUMERIC.captures(text)?;
    let whole = caps.get(0)?;
    let neg = !caps[1].is_empty();
    let int = &caps[2];
    let frac = caps.get(3).map_or("", |m| m.as_str());
    let sign = if neg { "-" } else { "" };
    let value = if frac.is_empty() {
        Decimal::parse(&format!("{sign}{int}"))?
    } else {
        Decimal::parse(&format!("{sign}{int}.{frac}"))?
    };
    let scale = value.scale.max(delta.scale);
    let sum = Decimal {
        mantissa: value.rescale(scale) + delta.rescale(scale),
        scale,
    };
    let mut number = sum.to_string();
    // zero padding of the integer part, e.g. "05"
    if int.len() > 1 && int.starts_with('0') {
        let (sign, body) = number.strip_prefix('-').map_or(("", number.as_str()), |b| ("-", b));
        let int_len = body.find('.').unwrap_or(body.len());
        if int_len < int.len() {
            number = format!("{sign}{}{body}", "0".repeat(int.len() - int_len));
        }
    }
    Some(format!("{}{number}{}", &text[..whole.start()], &text[whole.end()..]))
}

/// Shifts a clock time by `delta_minutes`, wrapping around midnight and
/// keeping the hh:mm layout and any am/pm suffix.
pub fn shift_time(text: &str, delta_minutes: i64) -> Option<String> {
    let trimmed = text.trim();
    let lead = &text[..text.len() - text.trim_start().len()];
    let trail = &text[text.trim_end().len()..];
    let caps = CLOCK.captures(trimmed)?;
    let hour: i64 = caps[1].parse().ok()?;
    let minute: i64 = caps[2].parse().ok()?;
    if minute > 59 {
        return None;
    }
    let meridiem = caps.get(4).map(|m| m.as_str());
    let h24 = match meridiem {
        Some(m) => {
            if !(1..=12).contains(&hour) {
                return None;
            }
            let pm = m.eq_ignore_ascii_case("p");
            hour % 12 + if pm { 12 } else { 0 }
        }
        None => {
            if hour > 23 {
                return None;
            }
            hour
        }
    };
    let total = (h24 * 60 + minute + delta_minutes).rem_euclid(24 * 60);
    let (nh, nm) = (total / 60, total % 60);
    let width = caps[1].len();
    let body = match meridiem {
        Some(m) => {
            let pm = nh >= 12;
            let h12 = if nh % 12 == 0 { 12 } else { nh % 12 };
            let letter = match (pm, m.chars().next().unwrap().is_ascii_uppercase()) {
                (true, true) => "P",
                (true, false) => "p",
                (false, true) => "A",
                (false, false) => "a",
            };
            format!(
                "{h12:0width$}:{nm:02}{}{letter}{}{}{}",
                &caps[3],
                caps.get(5).map_or("", |m| m.as_str()),
                caps.get(6).map_or("", |m| m.as_str()),
                caps.get(7).map_or("", |m| m.as_str()),
            )
        }
        None => format!("{nh:0width$}:{nm:02}"),
    };
    Some(format!("{lead}{body}{trail}"))
}

/// Deterministic colour for a cluster id.
pub fn cluster_color(id: usize) -> String {
    let h = fnv1a(&(id as u64).to_le_bytes());
    let hue = (h % 360) as f64;
    let sat = 0.55 + 0.2 * ((h >> 16) % 100) as f64 / 100.0;
    let light = 0.45 + 0.15 * ((h >> 32) % 100) as f64 / 100.0;
    let [r, g, b] = hsl_to_rgb(hue, sat, light);
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> [u8; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [r, g, b].map(|v| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Palette for every cluster of an assignment.
pub fn palette(assignment: &ClusterAssignment) -> BTreeMap<usize, String> {
    assignment.clusters.iter().map(|c| (c.id, cluster_color(c.id))).collect()
}

const FONT_FAMILIES: [&str; 8] = [
    "sans-serif",
    "serif",
    "monospace",
    "Georgia, serif",
    "Verdana, sans-serif",
    "Courier New, monospace",
    "Trebuchet MS, sans-serif",
    "cursive",
];

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// SVG 1.1 view of the document. With an assignment, each word gets a
/// translucent rectangle in its cluster's colour.
pub fn render_svg(doc: &DocumentModel, assignment: Option<&ClusterAssignment>, page_px: (f64, f64)) -> Result<String> {
    let (pw, ph) = page_px;
    if !(pw.is_finite() && ph.is_finite() && pw > 0.0 && ph > 0.0) {
        return Err(Error::validation("page_px", "page dimensions must be positive"));
    }
    let mut svg = String::new();
    writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{0}" height="{1}" viewBox="0 0 {0} {1}">"#,
        num(pw),
        num(ph)
    )
    .unwrap();
    writeln!(svg, r##"<rect x="0" y="0" width="{}" height="{}" fill="#ffffff"/>"##, num(pw), num(ph)).unwrap();
    if let Some(assignment) = assignment {
        let clusters = assignment.word_to_cluster();
        svg.push_str("<g class=\"clusters\">\n");
        for w in &doc.words {
            if let Some(&c) = clusters.get(&w.id) {
                writeln!(
                    svg,
                    r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}" fill-opacity="0.35" data-cluster="{c}" data-word-id="{}"/>"#,
                    num(w.bbox.x * pw),
                    num(w.bbox.y * ph),
                    num(w.bbox.w * pw),
                    num(w.bbox.h * ph),
                    cluster_color(c),
                    w.id
                )
                .unwrap();
            }
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("<g class=\"words\">\n");
    for w in &doc.words {
        let style = w.style.clone().unwrap_or_default();
        let [r, g, b] = style.color_rgb;
        writeln!(
            svg,
            r##"<text x="{}" y="{}" font-size="{}" font-family="{}" font-weight="{}" font-style="{}" fill="#{r:02x}{g:02x}{b:02x}" dominant-baseline="hanging" data-word-id="{}">{}</text>"##,
            num(w.bbox.x * pw),
            num(w.bbox.y * ph),
            num(w.bbox.h * ph),
            FONT_FAMILIES[style.font_family_id as usize % FONT_FAMILIES.len()],
            if style.bold { "bold" } else { "normal" },
            if style.italic { "italic" } else { "normal" },
            w.id,
            xml_escape(&w.text)
        )
        .unwrap();
    }
    svg.push_str("</g>\n</svg>\n");
    Ok(svg)
}
