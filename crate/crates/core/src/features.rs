//! Multimodal word representations: a style block, a content block and the
//! raw box geometry, concatenated per word.
//!
//! The built-in encoders are deterministic stand-ins for learned models.
//! Callers holding real embeddings can either attach them per word
//! (`WordUnit::feature`), which replaces the style and content blocks, or
//! implement [`StyleEncoder`] / [`ContentEncoder`].

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::document::{ContextualLine, DocumentModel, WordId, WordUnit};
use crate::error::{Error, Result};
use crate::util::{derive_seed, fnv1a, normalize, seeded_rng, splitmix64};

/// Ground-truth typographic attributes of a word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleAttrs {
    pub font_family_id: u32,
    pub bold: bool,
    pub italic: bool,
    /// Points.
    pub font_size: f64,
    pub color_rgb: [u8; 3],
}

impl StyleAttrs {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.font_size.is_finite() && self.font_size > 0.0) {
            return Err("font_size must be positive".into());
        }
        Ok(())
    }
}

impl Default for StyleAttrs {
    fn default() -> Self {
        StyleAttrs {
            font_family_id: 0,
            bold: false,
            italic: false,
            font_size: 12.0,
            color_rgb: [0, 0, 0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub style_dim: usize,
    pub content_dim: usize,
    /// Std of the Gaussian perturbation added to attribute-based style vectors.
    pub noise_std: f64,
    pub use_external_features: bool,
    /// Number of font families `F`; family ids must be below it.
    pub font_families: u32,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            style_dim: 32,
            content_dim: 64,
            noise_std: 0.05,
            use_external_features: true,
            font_families: 8,
            seed: 0,
        }
    }
}

/// Character-class histogram plus token-shape one-hot.
const LEXICAL_DIM: usize = 12;
const CHAR_CLASSES: usize = 6;

impl FeatureConfig {
    /// Width of the hashed trigram block.
    pub fn trigram_dim(&self) -> usize {
        self.content_dim.saturating_sub(2 * LEXICAL_DIM)
    }

    pub fn representation_dim(&self) -> usize {
        self.style_dim + self.content_dim + 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.style_dim < 7 {
            return Err(Error::validation("features.style_dim", "must be at least 7"));
        }
        if self.trigram_dim() == 0 {
            return Err(Error::validation(
                "features.content_dim",
                format!("must exceed {}", 2 * LEXICAL_DIM),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::validation("features.noise_std", "must be non-negative"));
        }
        if self.font_families == 0 {
            return Err(Error::validation("features.font_families", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct ContentVector(pub Vec<f64>);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryVector(pub [f64; 4]);

#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    pub word_id: WordId,
    pub z: Vec<f64>,
}

/// Per-document representations, in document word order.
#[derive(Clone, Debug, PartialEq)]
pub struct Representations {
    pub items: Vec<Representation>,
    /// Visual descriptor per word used for style neighbourhoods: the style
    /// block, or the external feature when one was supplied.
    pub visual: Vec<Vec<f64>>,
    pub dim: usize,
}

impl Representations {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn word_ids(&self) -> Vec<WordId> {
        self.items.iter().map(|r| r.word_id).collect()
    }

    pub fn index_of(&self, id: WordId) -> Option<usize> {
        self.items.iter().position(|r| r.word_id == id)
    }

    /// Rows are words, columns are `z` coordinates.
    pub fn matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.items.len(), self.dim));
        for (i, rep) in self.items.iter().enumerate() {
            for (j, v) in rep.z.iter().enumerate() {
                m[[i, j]] = *v;
            }
        }
        m
    }
}

pub trait StyleEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, doc: &DocumentModel, word: &WordUnit) -> StyleVector;
}

pub trait ContentEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, doc: &DocumentModel, word: &WordUnit, line: Option<&ContextualLine>) -> ContentVector;
}

pub fn encode_geometry(word: &WordUnit) -> GeometryVector {
    let b = word.bbox;
    GeometryVector([b.x, b.y, b.w, b.h])
}

/// Attribute embedding before noise and normalization: family one-hot (or a
/// hashed bucket when the families do not fit), bold, italic, log size, colour.
pub fn style_raw(attrs: &StyleAttrs, cfg: &FeatureConfig) -> Vec<f64> {
    let dim = cfg.style_dim;
    let families = cfg.font_families as usize;
    let mut v = vec![0.0; dim];
    let slots = if families + 6 <= dim { families } else { dim - 6 };
    let family_slot = if families + 6 <= dim {
        attrs.font_family_id as usize
    } else {
        (splitmix64(attrs.font_family_id as u64) % slots as u64) as usize
    };
    v[family_slot.min(slots - 1)] = 1.0;
    v[slots] = attrs.bold as u8 as f64;
    v[slots + 1] = attrs.italic as u8 as f64;
    v[slots + 2] = attrs.font_size.ln();
    for (k, c) in attrs.color_rgb.iter().enumerate() {
        v[slots + 3 + k] = *c as f64 / 255.0;
    }
    v
}

/// Glyph statistics used when no style attributes are known.
fn style_fallback(word: &WordUnit, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let chars = word.text.chars().count().max(1) as f64;
    let letters = word.text.chars().filter(|c| c.is_alphabetic()).count();
    let upper = word.text.chars().filter(|c| c.is_uppercase()).count();
    v[0] = word.bbox.h * 20.0;
    v[1] = word.bbox.w / (word.bbox.h * chars);
    v[2] = if letters == 0 { 0.0 } else { upper as f64 / letters as f64 };
    v
}

/// Style block for one word. Attribute-based vectors get a Gaussian
/// perturbation keyed by `(doc_id, word_id)`; the result is unit length.
pub fn encode_style(doc_id: &str, word: &WordUnit, cfg: &FeatureConfig) -> StyleVector {
    let mut v = match &word.style {
        Some(attrs) => {
            let mut v = style_raw(attrs, cfg);
            if cfg.noise_std > 0.0 {
                let seed = splitmix64(derive_seed(cfg.seed, doc_id) ^ word.id);
                let mut rng = seeded_rng(seed);
                let normal = Normal::new(0.0, cfg.noise_std).expect("valid std");
                v.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
            }
            v
        }
        None => style_fallback(word, cfg.style_dim),
    };
    normalize(&mut v);
    StyleVector(v)
}

const CURRENCY: &[char] = &['$', '€', '£', '¥', '¢', '₹', '₩', '₽', '₪', '₫', '฿'];

pub fn is_currency(c: char) -> bool {
    CURRENCY.contains(&c)
}

fn char_class(c: char) -> usize {
    if c.is_lowercase() {
        0
    } else if c.is_uppercase() {
        1
    } else if c.is_numeric() {
        2
    } else if is_currency(c) {
        3
    } else if c.is_ascii_punctuation() || matches!(c, '–' | '—' | '…' | '“' | '”' | '‘' | '’' | '·' | '•') {
        4
    } else {
        5
    }
}

/// Coarse orthographic class of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenShape {
    AllDigits,
    NumericWithSeparators,
    Capitalized,
    AllCaps,
    AllLower,
    Mixed,
}

impl TokenShape {
    pub fn of(text: &str) -> TokenShape {
        let letters: Vec<char> = text.chars().filter(|c| c.is_alphabetic()).collect();
        let has_digit = text.chars().any(|c| c.is_numeric());
        if !text.is_empty() && text.chars().all(|c| c.is_numeric()) {
            return TokenShape::AllDigits;
        }
        if letters.is_empty() {
            return if has_digit {
                TokenShape::NumericWithSeparators
            } else {
                TokenShape::Mixed
            };
        }
        if letters.iter().all(|c| c.is_uppercase()) {
            TokenShape::AllCaps
        } else if letters.iter().all(|c| c.is_lowercase()) {
            TokenShape::AllLower
        } else if letters[0].is_uppercase() && letters[1..].iter().all(|c| c.is_lowercase()) {
            TokenShape::Capitalized
        } else {
            TokenShape::Mixed
        }
    }

    fn index(self) -> usize {
        match self {
            TokenShape::AllDigits => 0,
            TokenShape::NumericWithSeparators => 1,
            TokenShape::Capitalized => 2,
            TokenShape::AllCaps => 3,
            TokenShape::AllLower => 4,
            TokenShape::Mixed => 5,
        }
    }
}

/// Character-class frequencies followed by the token-shape one-hot.
pub fn lexical_features(text: &str) -> [f64; LEXICAL_DIM] {
    let mut f = [0.0; LEXICAL_DIM];
    let n = text.chars().count();
    if n > 0 {
        for c in text.chars() {
            f[char_class(c)] += 1.0;
        }
        for v in f.iter_mut().take(CHAR_CLASSES) {
            *v /= n as f64;
        }
    }
    f[CHAR_CLASSES + TokenShape::of(text).index()] = 1.0;
    f
}

fn trigram_bag(text: &str, dim: usize) -> Vec<f64> {
    let mut bag = vec![0.0; dim];
    let padded: Vec<char> = std::iter::once('^')
        .chain(text.to_lowercase().chars())
        .chain(std::iter::once('$'))
        .collect();
    let grams = padded.len().saturating_sub(2);
    let mut buf = String::new();
    for window in padded.windows(3) {
        buf.clear();
        buf.extend(window);
        bag[(fnv1a(buf.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    if grams > 0 {
        bag.iter_mut().for_each(|v| *v /= grams as f64);
    }
    bag
}

/// Content block before normalization: lexical features of the word, its
/// trigram bag, then the mean lexical features of the other words in its line.
pub fn content_raw(
    word: &WordUnit,
    line: Option<&ContextualLine>,
    doc: &DocumentModel,
    cfg: &FeatureConfig,
) -> Vec<f64> {
    let mut v = Vec::with_capacity(cfg.content_dim);
    v.extend_from_slice(&lexical_features(&word.text));
    v.extend(trigram_bag(&word.text, cfg.trigram_dim()));
    let mut context = [0.0; LEXICAL_DIM];
    let mut others = 0usize;
    if let Some(line) = line {
        for id in line.word_ids.iter().filter(|id| **id != word.id) {
            if let Some(other) = doc.word(*id) {
                for (c, f) in context.iter_mut().zip(lexical_features(&other.text)) {
                    *c += f;
                }
                others += 1;
            }
        }
    }
    if others > 0 {
        context.iter_mut().for_each(|c| *c /= others as f64);
    }
    v.extend_from_slice(&context);
    v
}

pub fn encode_content(
    word: &WordUnit,
    line: Option<&ContextualLine>,
    doc: &DocumentModel,
    cfg: &FeatureConfig,
) -> ContentVector {
    let mut v = content_raw(word, line, doc, cfg);
    normalize(&mut v);
    ContentVector(v)
}

pub struct BuiltinStyle<'a>(pub &'a FeatureConfig);

impl StyleEncoder for BuiltinStyle<'_> {
    fn dim(&self) -> usize {
        self.0.style_dim
    }

    fn encode(&self, doc: &DocumentModel, word: &WordUnit) -> StyleVector {
        encode_style(&doc.doc_id, word, self.0)
    }
}

pub struct BuiltinContent<'a>(pub &'a FeatureConfig);

impl ContentEncoder for BuiltinContent<'_> {
    fn dim(&self) -> usize {
        self.0.content_dim
    }

    fn encode(&self, doc: &DocumentModel, word: &WordUnit, line: Option<&ContextualLine>) -> ContentVector {
        encode_content(word, line, doc, self.0)
    }
}

/// Representations using the built-in encoders (or external features).
pub fn assemble_representations(doc: &DocumentModel, cfg: &FeatureConfig) -> Result<Representations> {
    cfg.validate()?;
    for (i, w) in doc.words.iter().enumerate() {
        if let Some(attrs) = &w.style {
            if attrs.font_family_id >= cfg.font_families {
                return Err(Error::validation(
                    format!("words[{i}].style_attrs.font_family_id"),
                    format!("must be below {}", cfg.font_families),
                ));
            }
        }
    }
    assemble_with(doc, cfg, &BuiltinStyle(cfg), &BuiltinContent(cfg))
}

pub fn assemble_with(
    doc: &DocumentModel,
    cfg: &FeatureConfig,
    style: &dyn StyleEncoder,
    content: &dyn ContentEncoder,
) -> Result<Representations> {
    let external = external_dim(doc, cfg)?;
    let mut items = Vec::with_capacity(doc.words.len());
    let mut visual = Vec::with_capacity(doc.words.len());
    for word in &doc.words {
        let geometry = encode_geometry(word).0;
        let (mut z, vis) = match external {
            Some(_) => {
                let f = word.feature.clone().expect("checked by external_dim");
                (f.clone(), f)
            }
            None => {
                let line = word.line_id.and_then(|l| doc.line(l));
                let s = style.encode(doc, word).0;
                let c = content.encode(doc, word, line).0;
                let mut z = s.clone();
                z.extend(c);
                (z, s)
            }
        };
        z.extend_from_slice(&geometry);
        items.push(Representation { word_id: word.id, z });
        visual.push(vis);
    }
    let dim = match external {
        Some(d) => d + 4,
        None => style.dim() + content.dim() + 4,
    };
    if let Some(bad) = items.iter().find(|r| r.z.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.z.len(),
        });
    }
    Ok(Representations { items, visual, dim })
}

/// Length of the external feature vectors, when every word carries one.
fn external_dim(doc: &DocumentModel, cfg: &FeatureConfig) -> Result<Option<usize>> {
    if !cfg.use_external_features {
        return Ok(None);
    }
    let with = doc.words.iter().filter(|w| w.feature.is_some()).count();
    if with == 0 {
        return Ok(None);
    }
    if with != doc.words.len() {
        return Err(Error::validation(
            "words[].feature",
            "external features must be given for every word or none",
        ));
    }
    let len = doc.words[0].feature.as_ref().map_or(0, Vec::len);
    for (i, w) in doc.words.iter().enumerate() {
        let l = w.feature.as_ref().map_or(0, Vec::len);
        if l != len || l == 0 {
            return Err(Error::validation(
                format!("words[{i}].feature"),
                format!("length {l} differs from {len}"),
            ));
        }
    }
    Ok(Some(len))
}

/// Random unit vector, used by tests and the synthetic generator.
pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    normalize(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{BBox, LineParams};
    use crate::util::{cosine_distance, l2_norm};

    fn word(id: WordId, text: &str, x: f64, y: f64) -> WordUnit {
        WordUnit {
            id,
            text: text.into(),
            bbox: BBox::new(x, y, 0.1, 0.02),
            line_id: None,
            style: None,
            feature: None,
        }
    }

    fn attrs(size: f64, bold: bool) -> StyleAttrs {
        StyleAttrs {
            font_family_id: 2,
            bold,
            italic: false,
            font_size: size,
            color_rgb: [10, 20, 30],
        }
    }

    #[test]
    fn geometry_is_identity() {
        for b in [
            BBox::new(0.1, 0.2, 0.3, 0.05),
            BBox::new(0.0, 0.0, 1.0, 1.0),
            BBox::new(0.5, 0.5, 0.01, 0.02),
        ] {
            let mut w = word(1, "x", 0.0, 0.0);
            w.bbox = b;
            assert_eq!(encode_geometry(&w).0, [b.x, b.y, b.w, b.h]);
        }
    }

    #[test]
    fn style_is_deterministic_per_key() {
        let cfg = FeatureConfig::default();
        let mut w = word(4, "Pasta", 0.1, 0.1);
        w.style = Some(attrs(12.0, true));
        assert_eq!(encode_style("doc", &w, &cfg), encode_style("doc", &w, &cfg));
        assert_ne!(encode_style("doc", &w, &cfg), encode_style("other", &w, &cfg));
        let v = encode_style("doc", &w, &cfg).0;
        assert!((l2_norm(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearby_font_sizes_are_similar() {
        let cfg = FeatureConfig {
            noise_std: 0.0,
            ..FeatureConfig::default()
        };
        let mut a = word(1, "soup", 0.1, 0.1);
        let mut b = word(2, "soup", 0.1, 0.2);
        a.style = Some(attrs(10.0, false));
        b.style = Some(attrs(11.0, false));
        let sa = encode_style("d", &a, &cfg).0;
        let sb = encode_style("d", &b, &cfg).0;
        assert!(1.0 - cosine_distance(&sa, &sb) > 0.98);
    }

    #[test]
    fn bold_changes_one_raw_coordinate() {
        let cfg = FeatureConfig::default();
        let plain = style_raw(&attrs(12.0, false), &cfg);
        let bold = style_raw(&attrs(12.0, true), &cfg);
        let diffs: Vec<usize> = (0..plain.len()).filter(|&i| plain[i] != bold[i]).collect();
        assert_eq!(diffs, vec![cfg.font_families as usize]);
    }

    #[test]
    fn many_families_are_hashed_into_range() {
        let cfg = FeatureConfig {
            font_families: 100,
            ..FeatureConfig::default()
        };
        let mut a = attrs(12.0, false);
        a.font_family_id = 99;
        let v = style_raw(&a, &cfg);
        assert_eq!(v.len(), 32);
        assert_eq!(v[..26].iter().filter(|x| **x == 1.0).count(), 1);
    }

    #[test]
    fn fallback_style_without_attrs() {
        let cfg = FeatureConfig::default();
        let v = encode_style("d", &word(1, "HELLO", 0.1, 0.1), &cfg).0;
        assert_eq!(v.len(), cfg.style_dim);
        assert!((l2_norm(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn time_token_lexical_profile() {
        let f = lexical_features("12:30");
        assert_eq!(f[2], 0.8);
        assert_eq!(f[4], 0.2);
        assert_eq!(TokenShape::of("12:30"), TokenShape::NumericWithSeparators);
        assert_eq!(f[CHAR_CLASSES + 1], 1.0);
    }

    #[test]
    fn token_shapes() {
        assert_eq!(TokenShape::of("HELLO"), TokenShape::AllCaps);
        assert_eq!(TokenShape::of("hello"), TokenShape::AllLower);
        assert_eq!(TokenShape::of("Hello"), TokenShape::Capitalized);
        assert_eq!(TokenShape::of("2024"), TokenShape::AllDigits);
        assert_eq!(TokenShape::of("$5.99"), TokenShape::NumericWithSeparators);
        assert_eq!(TokenShape::of("iPhone"), TokenShape::Mixed);
        let up = lexical_features("HELLO");
        let low = lexical_features("hello");
        assert_ne!(up[CHAR_CLASSES..], low[CHAR_CLASSES..]);
    }

    #[test]
    fn same_word_in_two_lines_differs_in_context_only() {
        let cfg = FeatureConfig::default();
        let doc = DocumentModel::new(
            "d",
            1.0,
            vec![
                word(1, "soup", 0.1, 0.1),
                word(2, "TODAY", 0.201, 0.1),
                word(3, "soup", 0.1, 0.5),
                word(4, "12.50", 0.201, 0.5),
            ],
        )
        .with_lines(&LineParams::default());
        assert_eq!(doc.lines.len(), 2);
        let a = content_raw(&doc.words[0], doc.line(doc.words[0].line_id.unwrap()), &doc, &cfg);
        let b = content_raw(&doc.words[2], doc.line(doc.words[2].line_id.unwrap()), &doc, &cfg);
        assert_eq!(a.len(), cfg.content_dim);
        let split = cfg.content_dim - LEXICAL_DIM;
        assert_eq!(a[..split], b[..split]);
        assert_ne!(a[split..], b[split..]);
    }

    #[test]
    fn representation_dims() {
        let cfg = FeatureConfig::default();
        let doc = DocumentModel::new("d", 1.0, vec![word(1, "a", 0.1, 0.1), word(2, "b", 0.5, 0.5)])
            .with_lines(&LineParams::default());
        let reps = assemble_representations(&doc, &cfg).unwrap();
        assert_eq!(reps.dim, 100);
        let z = &reps.items[1].z;
        assert_eq!(z[96..], [0.5, 0.5, 0.1, 0.02]);
        assert!((l2_norm(&z[..32]) - 1.0).abs() < 1e-12);
        assert!((l2_norm(&z[32..96]) - 1.0).abs() < 1e-12);

        let empty = DocumentModel::new("e", 1.0, vec![]);
        assert!(assemble_representations(&empty, &cfg).unwrap().is_empty());
    }

    #[test]
    fn external_features_replace_style_and_content() {
        let cfg = FeatureConfig::default();
        let mut a = word(1, "a", 0.1, 0.1);
        let mut b = word(2, "b", 0.5, 0.5);
        a.feature = Some(vec![0.5; 512]);
        b.feature = Some(vec![0.25; 512]);
        let doc = DocumentModel::new("d", 1.0, vec![a.clone(), b.clone()]);
        let reps = assemble_representations(&doc, &cfg).unwrap();
        assert_eq!(reps.dim, 516);
        assert_eq!(reps.items[0].z[..512], vec![0.5; 512][..]);

        b.feature = Some(vec![0.25; 10]);
        let doc = DocumentModel::new("d", 1.0, vec![a.clone(), b]);
        assert!(matches!(
            assemble_representations(&doc, &cfg),
            Err(Error::Validation { .. })
        ));
        let doc = DocumentModel::new("d", 1.0, vec![a, word(2, "b", 0.5, 0.5)]);
        assert!(assemble_representations(&doc, &cfg).is_err());
    }

    #[test]
    fn family_out_of_range_is_rejected() {
        let cfg = FeatureConfig::default();
        let mut a = word(1, "a", 0.1, 0.1);
        a.style = Some(StyleAttrs {
            font_family_id: 8,
            ..StyleAttrs::default()
        });
        let doc = DocumentModel::new("d", 1.0, vec![a]);
        assert!(assemble_representations(&doc, &cfg).is_err());
    }
}
