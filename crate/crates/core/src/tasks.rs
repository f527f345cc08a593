//! Constrained-generation tasks.
//!
//! A [`ConstraintSpec`] is derived from a ground-truth layout, serialized to
//! tokens for the constraint encoder, enforced during decoding, and checked
//! afterwards with [`check_satisfaction`].
//!
//! Constraint token grammar (ids share the layout vocabulary for categories
//! and geometry):
//!
//! ```text
//! C→S+P         [TASK] cat*
//! C+S→P         [TASK] (cat w h)*
//! Completion    [TASK] (cat x y w h)*        given elements
//! Refinement    [TASK] (cat x y w h)*        noisy elements
//! Relationship  [TASK] cat* ([REL] i rel j)*
//! Unconstrained (no tokens)
//! ```

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Element, Layout};
use crate::tokenizer::{quantize, quantize_box, Vocabulary};
use crate::{Error, Result};

/// Noise level of the refinement corruption.
pub const REFINEMENT_SIGMA: f64 = 0.01;
/// Fraction of derivable relations kept for the relationship task.
pub const RELATION_FRACTION: f64 = 0.1;
/// Relative tolerance under which two areas count as equal.
pub const AREA_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Unconstrained,
    #[serde(rename = "c_to_sp")]
    CtoSP,
    #[serde(rename = "cs_to_p")]
    CStoP,
    Completion,
    Refinement,
    Relationship,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Unconstrained,
        TaskKind::CtoSP,
        TaskKind::CStoP,
        TaskKind::Completion,
        TaskKind::Refinement,
        TaskKind::Relationship,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Unconstrained => "unconstrained",
            TaskKind::CtoSP => "c_to_sp",
            TaskKind::CStoP => "cs_to_p",
            TaskKind::Completion => "completion",
            TaskKind::Refinement => "refinement",
            TaskKind::Relationship => "relationship",
        }
    }

    /// Offset of the task marker among the constraint-only tokens.
    fn marker_index(self) -> Option<u32> {
        match self {
            TaskKind::Unconstrained => None,
            TaskKind::CtoSP => Some(0),
            TaskKind::CStoP => Some(1),
            TaskKind::Completion => Some(2),
            TaskKind::Refinement => Some(3),
            TaskKind::Relationship => Some(4),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeRelation {
    Smaller,
    Larger,
    Equal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRelation {
    Above,
    Below,
    Left,
    Right,
    Overlap,
}

/// Relation of element `i` to element `j`, e.g. `i` above `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relationship {
    pub i: usize,
    pub j: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_rel: Option<SizeRelation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_rel: Option<PositionRelation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial: Option<Layout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy: Option<Layout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relations: Option<Vec<Relationship>>,
}

impl ConstraintSpec {
    pub fn unconstrained() -> Self {
        Self::empty(TaskKind::Unconstrained)
    }

    fn empty(kind: TaskKind) -> Self {
        Self {
            kind,
            categories: None,
            sizes: None,
            partial: None,
            noisy: None,
            relations: None,
        }
    }

    /// Element count fixed by the constraints, if any.
    pub fn element_count(&self) -> Option<usize> {
        match self.kind {
            TaskKind::CtoSP | TaskKind::CStoP | TaskKind::Relationship => self.categories.as_ref().map(Vec::len),
            TaskKind::Refinement => self.noisy.as_ref().map(Layout::len),
            TaskKind::Unconstrained | TaskKind::Completion => None,
        }
    }

    /// Checks that exactly the fields required by the kind are present and
    /// consistent with each other and with `vocab`.
    pub fn validate(&self, vocab: &Vocabulary, max_elements: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{} spec: {m}", self.kind)));
        let need = |present: bool, field: &str, required: bool| -> Result<()> {
            match (present, required) {
                (false, true) => bad(format!("missing field {field}")),
                (true, false) => bad(format!("unexpected field {field}")),
                _ => Ok(()),
            }
        };
        let k = self.kind;
        need(
            self.categories.is_some(),
            "categories",
            matches!(k, TaskKind::CtoSP | TaskKind::CStoP | TaskKind::Relationship),
        )?;
        need(self.sizes.is_some(), "sizes", k == TaskKind::CStoP)?;
        need(self.partial.is_some(), "partial", k == TaskKind::Completion)?;
        need(self.noisy.is_some(), "noisy", k == TaskKind::Refinement)?;
        need(self.relations.is_some(), "relations", k == TaskKind::Relationship)?;

        let check_cat = |c: u32| -> Result<()> {
            if c == 0 || c as usize > vocab.num_categories {
                return bad(format!("category {c} outside 1..={}", vocab.num_categories));
            }
            Ok(())
        };
        let check_layout = |l: &Layout| -> Result<()> {
            for e in &l.elements {
                check_cat(e.category)?;
                quantize_box(&e.bbox, vocab.bins)?;
            }
            Ok(())
        };
        if let Some(cats) = &self.categories {
            cats.iter().try_for_each(|&c| check_cat(c))?;
        }
        if let (Some(cats), Some(sizes)) = (&self.categories, &self.sizes) {
            if cats.len() != sizes.len() {
                return bad(format!("{} categories but {} sizes", cats.len(), sizes.len()));
            }
            for &(w, h) in sizes {
                quantize(w, vocab.bins)?;
                quantize(h, vocab.bins)?;
            }
        }
        if let Some(p) = &self.partial {
            check_layout(p)?;
            if p.len() > max_elements {
                return bad(format!("{} given elements exceeds {max_elements}", p.len()));
            }
        }
        if let Some(n) = &self.noisy {
            check_layout(n)?;
        }
        if let Some(t) = self.element_count() {
            if t > max_elements {
                return bad(format!("{t} elements exceeds {max_elements}"));
            }
        }
        if let Some(rels) = &self.relations {
            let t = self.categories.as_ref().map_or(0, Vec::len);
            for r in rels {
                if r.i == r.j || r.i >= t || r.j >= t {
                    return bad(format!("relation between {} and {} invalid for {t} elements", r.i, r.j));
                }
                if r.size_rel.is_none() && r.pos_rel.is_none() {
                    return bad(format!("relation between {} and {} sets nothing", r.i, r.j));
                }
            }
        }
        Ok(())
    }
}

/// Derives a spec of the given kind from a ground-truth layout.
pub fn build_spec(kind: TaskKind, ground_truth: &Layout, rng: &mut impl Rng) -> Result<ConstraintSpec> {
    let mut spec = ConstraintSpec::empty(kind);
    match kind {
        TaskKind::Unconstrained => {}
        TaskKind::CtoSP => spec.categories = Some(ground_truth.categories()),
        TaskKind::CStoP => {
            spec.categories = Some(ground_truth.categories());
            spec.sizes = Some(ground_truth.elements.iter().map(|e| (e.bbox.w, e.bbox.h)).collect());
        }
        TaskKind::Completion => {
            let t = ground_truth.len();
            if t == 0 {
                return Err(Error::Config("completion needs at least one element".into()));
            }
            // A single-element layout keeps its element as the given prefix.
            let keep = if t == 1 { 1 } else { rng.random_range(1..t) };
            let mut idx = sample(rng, t, keep).into_vec();
            idx.sort_unstable();
            spec.partial = Some(Layout::new(idx.iter().map(|&i| ground_truth.elements[i]).collect()));
        }
        TaskKind::Refinement => spec.noisy = Some(perturb_for_refinement(ground_truth, rng)),
        TaskKind::Relationship => {
            spec.categories = Some(ground_truth.categories());
            spec.relations = Some(sample_relationships(ground_truth, RELATION_FRACTION, rng));
        }
    }
    Ok(spec)
}

pub fn perturb_for_refinement(layout: &Layout, rng: &mut impl Rng) -> Layout {
    perturb_with_sigma(layout, REFINEMENT_SIGMA, rng)
}

/// Adds i.i.d. `N(0, σ²)` noise to every coordinate, clamped to `[0,1]`.
pub fn perturb_with_sigma(layout: &Layout, sigma: f64, rng: &mut impl Rng) -> Layout {
    if sigma == 0.0 {
        return layout.clone();
    }
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let mut jitter = |v: f64| (v + noise.sample(rng)).clamp(0.0, 1.0);
    Layout::new(
        layout
            .elements
            .iter()
            .map(|e| {
                let b = e.bbox;
                let (cx, cy, w, h) = (jitter(b.cx), jitter(b.cy), jitter(b.w), jitter(b.h));
                Element::new(e.category, cx, cy, w, h)
            })
            .collect(),
    )
}

fn size_relation(a: &Element, b: &Element) -> SizeRelation {
    let (x, y) = (a.bbox.area(), b.bbox.area());
    if (x - y).abs() <= AREA_TOLERANCE * x.max(y) {
        SizeRelation::Equal
    } else if x < y {
        SizeRelation::Smaller
    } else {
        SizeRelation::Larger
    }
}

/// Position of `a` relative to `b`: overlap when they intersect, otherwise
/// the first separating direction among above, below, left, right.
fn position_relation(a: &Element, b: &Element) -> PositionRelation {
    let (p, q) = (&a.bbox, &b.bbox);
    if p.iou(q) > 0.0 {
        PositionRelation::Overlap
    } else if p.bottom() <= q.top() {
        PositionRelation::Above
    } else if q.bottom() <= p.top() {
        PositionRelation::Below
    } else if p.right() <= q.left() {
        PositionRelation::Left
    } else {
        PositionRelation::Right
    }
}

/// Every pair `i < j` yields one size and one position relation; each is
/// kept independently with probability `fraction`.
pub fn sample_relationships(layout: &Layout, fraction: f64, rng: &mut impl Rng) -> Vec<Relationship> {
    let els = &layout.elements;
    let mut out = Vec::new();
    for i in 0..els.len() {
        for j in i + 1..els.len() {
            let size_rel = rng
                .random_bool(fraction.clamp(0.0, 1.0))
                .then(|| size_relation(&els[i], &els[j]));
            let pos_rel = rng
                .random_bool(fraction.clamp(0.0, 1.0))
                .then(|| position_relation(&els[i], &els[j]));
            if size_rel.is_some() || pos_rel.is_some() {
                out.push(Relationship { i, j, size_rel, pos_rel });
            }
        }
    }
    out
}

pub fn size_holds(rel: SizeRelation, a: &Element, b: &Element) -> bool {
    size_relation(a, b) == rel
}

pub fn position_holds(rel: PositionRelation, a: &Element, b: &Element) -> bool {
    let (p, q) = (&a.bbox, &b.bbox);
    match rel {
        PositionRelation::Above => p.bottom() <= q.top(),
        PositionRelation::Below => q.bottom() <= p.top(),
        PositionRelation::Left => p.right() <= q.left(),
        PositionRelation::Right => q.right() <= p.left(),
        PositionRelation::Overlap => p.iou(q) > 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintCheck {
    pub name: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SatisfactionReport {
    pub checks: Vec<ConstraintCheck>,
}

impl SatisfactionReport {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }

    /// Fraction satisfied; 1 when there is nothing to check.
    pub fn rate(&self) -> f64 {
        if self.checks.is_empty() {
            1.0
        } else {
            self.passed() as f64 / self.checks.len() as f64
        }
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool) {
        self.checks.push(ConstraintCheck {
            name: name.into(),
            passed,
        });
    }
}

fn bins_of(v: f64, bins: usize) -> Option<usize> {
    quantize(v, bins).ok()
}

/// Checks `layout` against `spec`. Categories, sizes and given elements are
/// compared on quantized tokens; relations use the geometric predicates on
/// the layout's coordinates. Refinement checks the category sequence only.
pub fn check_satisfaction(layout: &Layout, spec: &ConstraintSpec, vocab: &Vocabulary) -> SatisfactionReport {
    let mut r = SatisfactionReport::default();
    let b = vocab.bins;
    let cats = layout.categories();
    match spec.kind {
        TaskKind::Unconstrained => {}
        TaskKind::CtoSP | TaskKind::Relationship => {
            r.push("categories", Some(&cats) == spec.categories.as_ref());
        }
        TaskKind::CStoP => {
            r.push("categories", Some(&cats) == spec.categories.as_ref());
            let sizes = spec.sizes.as_deref().unwrap_or_default();
            for (i, &(w, h)) in sizes.iter().enumerate() {
                let ok = layout.elements.get(i).is_some_and(|e| {
                    bins_of(e.bbox.w, b) == bins_of(w, b) && bins_of(e.bbox.h, b) == bins_of(h, b)
                });
                r.push(format!("size[{i}]"), ok);
            }
        }
        TaskKind::Completion => {
            let partial = spec.partial.as_ref().map_or(&[][..], |p| &p.elements[..]);
            for (i, want) in partial.iter().enumerate() {
                let ok = layout.elements.get(i).is_some_and(|e| {
                    e.category == want.category && quantize_box(&e.bbox, b).ok() == quantize_box(&want.bbox, b).ok()
                });
                r.push(format!("given[{i}]"), ok);
            }
        }
        TaskKind::Refinement => {
            let want = spec.noisy.as_ref().map(Layout::categories);
            r.push("categories", Some(cats) == want);
        }
    }
    if spec.kind == TaskKind::Relationship {
        for rel in spec.relations.as_deref().unwrap_or_default() {
            let pair = layout.elements.get(rel.i).zip(layout.elements.get(rel.j));
            if let Some(s) = rel.size_rel {
                r.push(
                    format!("{}:{s:?}:{}", rel.i, rel.j),
                    pair.is_some_and(|(a, c)| size_holds(s, a, c)),
                );
            }
            if let Some(p) = rel.pos_rel {
                r.push(
                    format!("{}:{p:?}:{}", rel.i, rel.j),
                    pair.is_some_and(|(a, c)| position_holds(p, a, c)),
                );
            }
        }
    }
    r
}

const RELATION_TOKENS: [Relation; 8] = [
    Relation::Size(SizeRelation::Smaller),
    Relation::Size(SizeRelation::Larger),
    Relation::Size(SizeRelation::Equal),
    Relation::Position(PositionRelation::Above),
    Relation::Position(PositionRelation::Below),
    Relation::Position(PositionRelation::Left),
    Relation::Position(PositionRelation::Right),
    Relation::Position(PositionRelation::Overlap),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Size(SizeRelation),
    Position(PositionRelation),
}

/// Token ids of the constraint encoder: the layout vocabulary followed by
/// five task markers, `[REL]`, eight relation names and element indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintVocab {
    pub layout: Vocabulary,
    pub max_elements: usize,
}

impl ConstraintVocab {
    pub fn new(layout: Vocabulary, max_elements: usize) -> Self {
        Self { layout, max_elements }
    }

    fn base(&self) -> u32 {
        self.layout.size() as u32
    }

    pub fn task_token(&self, kind: TaskKind) -> Option<u32> {
        kind.marker_index().map(|m| self.base() + m)
    }

    pub fn rel_token(&self) -> u32 {
        self.base() + 5
    }

    pub fn relation_token(&self, rel: Relation) -> u32 {
        let pos = RELATION_TOKENS.iter().position(|&r| r == rel).expect("all relations listed");
        self.base() + 6 + pos as u32
    }

    pub fn index_token(&self, i: usize) -> u32 {
        self.base() + 14 + i as u32
    }

    pub fn size(&self) -> usize {
        self.layout.size() + 14 + self.max_elements
    }

    /// Longest serialization any valid spec can produce.
    pub fn max_len(&self) -> usize {
        let t = self.max_elements;
        (1 + 5 * t).max(1 + t + 4 * 2 * t * t.saturating_sub(1) / 2)
    }
}

/// Constraint tokens for the constraint encoder; empty when unconstrained.
pub fn serialize_constraints(spec: &ConstraintSpec, vocab: &ConstraintVocab) -> Result<Vec<u32>> {
    spec.validate(&vocab.layout, vocab.max_elements)?;
    let lv = &vocab.layout;
    let Some(marker) = vocab.task_token(spec.kind) else {
        return Ok(Vec::new());
    };
    let mut out = vec![marker];
    let push_full = |out: &mut Vec<u32>, l: &Layout| -> Result<()> {
        for e in &l.elements {
            out.push(lv.category_token(e.category));
            for q in quantize_box(&e.bbox, lv.bins)? {
                out.push(lv.geometry_token(q));
            }
        }
        Ok(())
    };
    match spec.kind {
        TaskKind::Unconstrained => {}
        TaskKind::CtoSP => {
            out.extend(spec.categories.iter().flatten().map(|&c| lv.category_token(c)));
        }
        TaskKind::CStoP => {
            let sizes = spec.sizes.as_deref().unwrap_or_default();
            for (&c, &(w, h)) in spec.categories.iter().flatten().zip(sizes) {
                out.push(lv.category_token(c));
                out.push(lv.geometry_token(quantize(w, lv.bins)?));
                out.push(lv.geometry_token(quantize(h, lv.bins)?));
            }
        }
        TaskKind::Completion => push_full(&mut out, spec.partial.as_ref().expect("validated"))?,
        TaskKind::Refinement => push_full(&mut out, spec.noisy.as_ref().expect("validated"))?,
        TaskKind::Relationship => {
            out.extend(spec.categories.iter().flatten().map(|&c| lv.category_token(c)));
            for r in spec.relations.iter().flatten() {
                let rels = r
                    .size_rel
                    .map(Relation::Size)
                    .into_iter()
                    .chain(r.pos_rel.map(Relation::Position));
                for rel in rels {
                    out.extend([
                        vocab.rel_token(),
                        vocab.index_token(r.i),
                        vocab.relation_token(rel),
                        vocab.index_token(r.j),
                    ]);
                }
            }
        }
    }
    Ok(out)
}

/// Inclusive range of bins a geometry variable may still take.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinRange {
    pub lo: i64,
    pub hi: i64,
}

impl BinRange {
    pub fn fixed(v: usize) -> Self {
        Self { lo: v as i64, hi: v as i64 }
    }

    pub fn free(bins: usize) -> Self {
        Self {
            lo: 0,
            hi: bins as i64 - 1,
        }
    }
}

/// Ranges of `[x, y, w, h]` for one element.
pub type BoxRange = [BinRange; 4];

/// Whether some assignment within the ranges satisfies `rel(a, b)` on
/// bin-center coordinates. Each check is exact for a single relation.
pub fn relation_feasible(rel: Relation, a: &BoxRange, b: &BoxRange) -> bool {
    // With bin centers, side `lo` edge of a box along an axis is
    // (2q − s)/2B and the high edge is (2q + s + 2)/2B, so the predicates
    // become integer inequalities on (q, s).
    let precedes = |a: &BoxRange, b: &BoxRange, axis: usize| {
        let (p, s) = (axis, axis + 2);
        2 * a[p].lo + a[s].lo + 1 <= 2 * b[p].hi - b[s].lo
    };
    let overlaps_axis = |a: &BoxRange, b: &BoxRange, axis: usize| {
        let (p, s) = (axis, axis + 2);
        let gap = (a[p].lo - b[p].hi).max(b[p].lo - a[p].hi).max(0);
        2 * gap < a[s].hi + b[s].hi + 1
    };
    let prod = |w: i64, h: i64| (2 * w + 1) * (2 * h + 1);
    match rel {
        Relation::Position(PositionRelation::Above) => precedes(a, b, 1),
        Relation::Position(PositionRelation::Below) => precedes(b, a, 1),
        Relation::Position(PositionRelation::Left) => precedes(a, b, 0),
        Relation::Position(PositionRelation::Right) => precedes(b, a, 0),
        Relation::Position(PositionRelation::Overlap) => overlaps_axis(a, b, 0) && overlaps_axis(a, b, 1),
        Relation::Size(SizeRelation::Smaller) => prod(a[2].lo, a[3].lo) < prod(b[2].hi, b[3].hi),
        Relation::Size(SizeRelation::Larger) => prod(a[2].hi, a[3].hi) > prod(b[2].lo, b[3].lo),
        Relation::Size(SizeRelation::Equal) => {
            let (small, large) = if (a[2].hi - a[2].lo + 1) * (a[3].hi - a[3].lo + 1)
                <= (b[2].hi - b[2].lo + 1) * (b[3].hi - b[3].lo + 1)
            {
                (a, b)
            } else {
                (b, a)
            };
            (small[2].lo..=small[2].hi).any(|w| {
                (small[3].lo..=small[3].hi).any(|h| {
                    let p = prod(w, h);
                    (large[2].lo..=large[2].hi).any(|w2| {
                        let f = 2 * w2 + 1;
                        p % f == 0 && {
                            let h2 = (p / f - 1) / 2;
                            (p / f) % 2 == 1 && h2 >= large[3].lo && h2 <= large[3].hi
                        }
                    })
                })
            })
        }
    }
}

/// Every relation of a spec, flattened.
pub fn flat_relations(spec: &ConstraintSpec) -> Vec<(usize, Relation, usize)> {
    spec.relations
        .iter()
        .flatten()
        .flat_map(|r| {
            r.size_rel
                .map(|s| (r.i, Relation::Size(s), r.j))
                .into_iter()
                .chain(r.pos_rel.map(|p| (r.i, Relation::Position(p), r.j)))
        })
        .collect()
}
