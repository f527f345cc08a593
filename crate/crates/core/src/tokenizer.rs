//! Discrete layout sequences.
//!
//! A layout with `T` elements becomes
//! `bos, c₁, x₁, y₁, w₁, h₁, …, c_T, x_T, y_T, w_T, h_T, eos` (length `5T+2`).
//! One shared pool of `B` geometry tokens serves all four box attributes;
//! the slot position determines which attribute a token encodes.

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Element, Layout};

pub const DEFAULT_BINS: usize = 128;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenError {
    #[error("value {0} outside [0,1]")]
    ValueOutOfRange(f64),
    #[error("bin {bin} outside 0..{bins}")]
    BinOutOfRange { bin: usize, bins: usize },
    #[error("category {category} outside 1..={num_categories}")]
    CategoryOutOfRange { category: u32, num_categories: usize },
    #[error("grammar violation at position {position}: {reason}")]
    Grammar { position: usize, reason: String },
}

/// Which attribute a position in the element grammar holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Category,
    X,
    Y,
    W,
    H,
}

impl Slot {
    /// Slot of the token at sequence position `pos` (≥ 1).
    pub fn at(pos: usize) -> Slot {
        match (pos - 1) % 5 {
            0 => Slot::Category,
            1 => Slot::X,
            2 => Slot::Y,
            3 => Slot::W,
            _ => Slot::H,
        }
    }

    /// Index into `[cx, cy, w, h]` for geometry slots.
    pub fn coord(self) -> Option<usize> {
        match self {
            Slot::Category => None,
            Slot::X => Some(0),
            Slot::Y => Some(1),
            Slot::W => Some(2),
            Slot::H => Some(3),
        }
    }
}

/// Token class of an id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Category(u32),
    Geometry(usize),
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_categories: usize,
    pub bins: usize,
}

impl Vocabulary {
    pub fn new(num_categories: usize, bins: usize) -> Self {
        Self { num_categories, bins }
    }

    pub fn size(&self) -> usize {
        3 + self.num_categories + self.bins
    }

    pub fn category_token(&self, category: u32) -> u32 {
        2 + category
    }

    pub fn geometry_token(&self, bin: usize) -> u32 {
        (3 + self.num_categories + bin) as u32
    }

    pub fn category_range(&self) -> std::ops::Range<usize> {
        3..3 + self.num_categories
    }

    pub fn geometry_range(&self) -> std::ops::Range<usize> {
        3 + self.num_categories..self.size()
    }

    pub fn kind(&self, token: u32) -> TokenKind {
        let t = token as usize;
        match token {
            PAD => TokenKind::Pad,
            BOS => TokenKind::Bos,
            EOS => TokenKind::Eos,
            _ if self.category_range().contains(&t) => TokenKind::Category(token - 2),
            _ if self.geometry_range().contains(&t) => TokenKind::Geometry(t - 3 - self.num_categories),
            _ => TokenKind::Unknown,
        }
    }

    /// Largest element count representable by a sequence of `max_len` tokens.
    pub fn max_len(max_elements: usize) -> usize {
        5 * max_elements + 2
    }
}

/// `min(floor(v·B), B−1)`.
pub fn quantize(v: f64, bins: usize) -> Result<usize, TokenError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(TokenError::ValueOutOfRange(v));
    }
    Ok(((v * bins as f64).floor() as usize).min(bins - 1))
}

/// Bin center `(bin + 0.5) / B`.
pub fn dequantize(bin: usize, bins: usize) -> Result<f64, TokenError> {
    if bin >= bins {
        return Err(TokenError::BinOutOfRange { bin, bins });
    }
    Ok((bin as f64 + 0.5) / bins as f64)
}

/// Quantized `[x, y, w, h]` bins of a box.
pub fn quantize_box(b: &BBox, bins: usize) -> Result<[usize; 4], TokenError> {
    Ok([
        quantize(b.cx, bins)?,
        quantize(b.cy, bins)?,
        quantize(b.w, bins)?,
        quantize(b.h, bins)?,
    ])
}

/// Layout whose coordinates are snapped to bin centers.
pub fn snap_layout(layout: &Layout, bins: usize) -> Result<Layout, TokenError> {
    let elements = layout
        .elements
        .iter()
        .map(|e| {
            let q = quantize_box(&e.bbox, bins)?;
            Ok(Element::new(
                e.category,
                dequantize(q[0], bins)?,
                dequantize(q[1], bins)?,
                dequantize(q[2], bins)?,
                dequantize(q[3], bins)?,
            ))
        })
        .collect::<Result<_, TokenError>>()?;
    Ok(Layout::new(elements))
}

pub fn tokenize_layout(layout: &Layout, vocab: &Vocabulary) -> Result<Vec<u32>, TokenError> {
    let mut out = Vec::with_capacity(5 * layout.len() + 2);
    out.push(BOS);
    for e in &layout.elements {
        if e.category == 0 || e.category as usize > vocab.num_categories {
            return Err(TokenError::CategoryOutOfRange {
                category: e.category,
                num_categories: vocab.num_categories,
            });
        }
        out.push(vocab.category_token(e.category));
        for b in quantize_box(&e.bbox, vocab.bins)? {
            out.push(vocab.geometry_token(b));
        }
    }
    out.push(EOS);
    Ok(out)
}

/// Inverse of [`tokenize_layout`]; coordinates come back as bin centers.
pub fn detokenize(tokens: &[u32], vocab: &Vocabulary) -> Result<Layout, TokenError> {
    let grammar = |position: usize, reason: String| TokenError::Grammar { position, reason };
    if tokens.first() != Some(&BOS) {
        return Err(grammar(0, "sequence must start with bos".into()));
    }
    let mut elements = Vec::new();
    let mut pos = 1;
    loop {
        match tokens.get(pos).map(|&t| vocab.kind(t)) {
            None => return Err(grammar(pos, "sequence ends without eos".into())),
            Some(TokenKind::Eos) => {
                if pos + 1 != tokens.len() {
                    return Err(grammar(pos + 1, "tokens after eos".into()));
                }
                return Ok(Layout::new(elements));
            }
            Some(TokenKind::Category(category)) => {
                let mut coords = [0.0; 4];
                for (i, c) in coords.iter_mut().enumerate() {
                    let p = pos + 1 + i;
                    match tokens.get(p).map(|&t| vocab.kind(t)) {
                        Some(TokenKind::Geometry(bin)) => *c = dequantize(bin, vocab.bins)?,
                        None => return Err(grammar(p, "truncated element".into())),
                        Some(k) => return Err(grammar(p, format!("expected a geometry token, found {k:?}"))),
                    }
                }
                elements.push(Element::new(category, coords[0], coords[1], coords[2], coords[3]));
                pos += 5;
            }
            Some(k) => return Err(grammar(pos, format!("expected a category or eos, found {k:?}"))),
        }
    }
}
