//! Canvases, saliency maps, layouts and the canonical JSONL dataset format.
//!
//! A dataset directory holds `train.jsonl`, `val.jsonl` and `test.jsonl`.
//! Each line is one sample:
//!
//! ```json
//! {"id":"s0001","canvas":"canvas/s0001.png","saliency":"saliency/s0001.png",
//!  "elements":[{"category":2,"cx":0.5,"cy":0.2,"w":0.6,"h":0.1}]}
//! ```
//!
//! Image paths are relative to the dataset directory. Canvases are RGB PNG
//! or binary PPM; saliency maps are 8-bit grayscale PNG or PGM, scaled by
//! `v / 255`. Elements may also be given in corner form
//! (`x1`, `y1`, `x2`, `y2`); they are converted to center form on load and
//! always written back in center form. Elements are stored in raster order.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Default cap on the number of elements per layout.
pub const DEFAULT_MAX_ELEMENTS: usize = 10;
pub const DEFAULT_CANVAS_HEIGHT: usize = 350;
pub const DEFAULT_CANVAS_WIDTH: usize = 240;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file} line {line}: {message}")]
    Malformed {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("sample {id}: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidSample { id: String, violations: Vec<Violation> },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("sample id {0:?} must be non-empty and use only [A-Za-z0-9_.-]")]
    BadId(String),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("invalid category schema: {0}")]
    Schema(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Category labels with the roles the metrics care about. Ids are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySchema {
    pub names: Vec<String>,
    pub underlay_ids: Vec<u32>,
    pub text_ids: Vec<u32>,
    #[serde(default = "default_max_elements")]
    pub max_elements: usize,
}

fn default_max_elements() -> usize {
    DEFAULT_MAX_ELEMENTS
}

impl CategorySchema {
    pub fn new(names: Vec<String>, underlay_ids: Vec<u32>, text_ids: Vec<u32>) -> Result<Self, DataError> {
        let s = Self {
            names,
            underlay_ids,
            text_ids,
            max_elements: DEFAULT_MAX_ELEMENTS,
        };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<(), DataError> {
        if self.names.is_empty() {
            return Err(DataError::Schema("at least one category is required".into()));
        }
        for (i, n) in self.names.iter().enumerate() {
            if self.names[..i].contains(n) {
                return Err(DataError::Schema(format!("duplicate category name {n}")));
            }
        }
        let c = self.names.len() as u32;
        if let Some(bad) = self.underlay_ids.iter().chain(&self.text_ids).find(|&&id| id == 0 || id > c) {
            return Err(DataError::Schema(format!("category id {bad} outside 1..={c}")));
        }
        Ok(())
    }

    /// logo, text, underlay.
    pub fn pku() -> Self {
        Self::new(vec!["logo".into(), "text".into(), "underlay".into()], vec![3], vec![2])
            .expect("static schema")
    }

    /// logo, text, underlay, embellishment.
    pub fn cgl() -> Self {
        Self::new(
            vec!["logo".into(), "text".into(), "underlay".into(), "embellishment".into()],
            vec![3],
            vec![2],
        )
        .expect("static schema")
    }

    pub fn num_categories(&self) -> usize {
        self.names.len()
    }

    pub fn is_underlay(&self, category: u32) -> bool {
        self.underlay_ids.contains(&category)
    }

    pub fn is_text(&self, category: u32) -> bool {
        self.text_ids.contains(&category)
    }

    pub fn name(&self, category: u32) -> Option<&str> {
        self.names.get((category as usize).checked_sub(1)?).map(|s| s.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32 + 1)
    }
}

/// Center-form box in normalized canvas coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.right().min(other.right()) - self.left().max(other.left());
        let h = self.bottom().min(other.bottom()) - self.top().max(other.top());
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// True when `other` lies entirely inside `self` (edges may touch).
    pub fn contains(&self, other: &BBox) -> bool {
        self.left() <= other.left()
            && self.right() >= other.right()
            && self.top() <= other.top()
            && self.bottom() >= other.bottom()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub category: u32,
    pub bbox: BBox,
}

impl Element {
    pub fn new(category: u32, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            category,
            bbox: BBox::new(cx, cy, w, h),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub elements: Vec<Element>,
}

/// Raster order: top-to-bottom, then left-to-right by box center, with
/// category and size as tie-breakers so the order is total.
pub fn raster_cmp(a: &Element, b: &Element) -> Ordering {
    a.bbox
        .cy
        .total_cmp(&b.bbox.cy)
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.category.cmp(&b.category))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

impl Layout {
    pub fn new(elements: Vec<Element>) -> Self {
        Self { elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn raster_sorted(mut self) -> Self {
        self.elements.sort_by(raster_cmp);
        self
    }

    pub fn categories(&self) -> Vec<u32> {
        self.elements.iter().map(|e| e.category).collect()
    }
}

/// A single invariant violation found by [`validate_layout`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    TooManyElements { count: usize, max: usize },
    CategoryOutOfRange { index: usize, category: u32, num_categories: usize },
    CoordinateOutOfRange { index: usize, field: &'static str, value: f64 },
    NonPositiveSize { index: usize, field: &'static str, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooManyElements { count, max } => write!(f, "{count} elements exceeds maximum {max}"),
            Violation::CategoryOutOfRange {
                index,
                category,
                num_categories,
            } => write!(f, "elements[{index}].category {category} outside 1..={num_categories}"),
            Violation::CoordinateOutOfRange { index, field, value } => {
                write!(f, "elements[{index}].{field} = {value} outside [0,1]")
            }
            Violation::NonPositiveSize { index, field, value } => {
                write!(f, "elements[{index}].{field} = {value} must be > 0")
            }
        }
    }
}

const FIELDS: [&str; 4] = ["cx", "cy", "w", "h"];

/// Every invariant violation of `layout` under `schema`; empty iff valid.
pub fn validate_layout(layout: &Layout, schema: &CategorySchema) -> Vec<Violation> {
    let mut out = Vec::new();
    if layout.len() > schema.max_elements {
        out.push(Violation::TooManyElements {
            count: layout.len(),
            max: schema.max_elements,
        });
    }
    let c = schema.num_categories();
    for (index, e) in layout.elements.iter().enumerate() {
        if e.category == 0 || e.category as usize > c {
            out.push(Violation::CategoryOutOfRange {
                index,
                category: e.category,
                num_categories: c,
            });
        }
        for (field, value) in FIELDS.iter().zip(e.bbox.coords()) {
            if !(0.0..=1.0).contains(&value) {
                out.push(Violation::CoordinateOutOfRange { index, field, value });
            }
        }
        for (field, value) in [("w", e.bbox.w), ("h", e.bbox.h)] {
            if value <= 0.0 {
                out.push(Violation::NonPositiveSize { index, field, value });
            }
        }
    }
    out
}

/// RGB image with values in `[0,1]`, stored row-major as `H×W×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Canvas {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width * 3, "canvas buffer size");
        Self { height, width, pixels }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Luma with weights 0.299, 0.587, 0.114.
    pub fn gray(&self) -> Vec<f32> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

/// Per-pixel importance in `[0,1]`, row-major `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), height * width, "saliency buffer size");
        Self { height, width, values }
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub id: String,
    pub canvas: Canvas,
    pub saliency: SaliencyMap,
    pub layout: Layout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other}")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<AnnotatedSample>,
    pub val: Vec<AnnotatedSample>,
    pub test: Vec<AnnotatedSample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[AnnotatedSample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<AnnotatedSample> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "train={} val={} test={}",
            self.train.len(),
            self.val.len(),
            self.test.len()
        )
    }
}

fn check_id(id: &str) -> Result<(), DataError> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'));
    if ok {
        Ok(())
    } else {
        Err(DataError::BadId(id.to_string()))
    }
}

#[derive(Debug, Deserialize)]
struct RecordHead {
    id: String,
    canvas: String,
    saliency: String,
    elements: Vec<Value>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    canvas: String,
    saliency: String,
    elements: Vec<ElementOut>,
}

#[derive(Serialize)]
struct ElementOut {
    category: u32,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

fn parse_element(v: &Value, index: usize) -> Result<Element, String> {
    let obj = v
        .as_object()
        .ok_or_else(|| format!("elements[{index}]: expected an object"))?;
    let num = |field: &str| -> Result<f64, String> {
        obj.get(field)
            .ok_or_else(|| format!("elements[{index}].{field}: missing"))?
            .as_f64()
            .ok_or_else(|| format!("elements[{index}].{field}: expected a number"))
    };
    let category = obj
        .get("category")
        .ok_or_else(|| format!("elements[{index}].category: missing"))?
        .as_u64()
        .and_then(|c| u32::try_from(c).ok())
        .ok_or_else(|| format!("elements[{index}].category: expected a non-negative integer"))?;
    let bbox = if obj.contains_key("cx") {
        BBox::new(num("cx")?, num("cy")?, num("w")?, num("h")?)
    } else if obj.contains_key("x1") {
        BBox::from_corners(num("x1")?, num("y1")?, num("x2")?, num("y2")?)
    } else {
        return Err(format!("elements[{index}]: needs cx/cy/w/h or x1/y1/x2/y2"));
    };
    Ok(Element { category, bbox })
}

/// Parses one JSONL line into a record without touching images.
fn parse_line(line: &str) -> Result<(RecordHead, Layout), String> {
    let head: RecordHead = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let elements = head
        .elements
        .iter()
        .enumerate()
        .map(|(i, v)| parse_element(v, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((head, Layout::new(elements)))
}

pub fn load_canvas(path: &Path) -> Result<Canvas, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Canvas::new(h as usize, w as usize, pixels))
}

pub fn load_saliency(path: &Path) -> Result<SaliencyMap, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let values = gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(SaliencyMap::new(h as usize, w as usize, values))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn canvas_to_image(canvas: &Canvas) -> image::RgbImage {
    let raw = canvas.pixels.iter().map(|&v| to_u8(v)).collect();
    image::RgbImage::from_raw(canvas.width as u32, canvas.height as u32, raw).expect("sized buffer")
}

pub fn saliency_to_image(s: &SaliencyMap) -> image::GrayImage {
    let raw = s.values.iter().map(|&v| to_u8(v)).collect();
    image::GrayImage::from_raw(s.width as u32, s.height as u32, raw).expect("sized buffer")
}

fn save_image<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<(), DataError>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Loads and validates one split file.
pub fn load_split(dir: &Path, split: Split, schema: &CategorySchema) -> Result<Vec<AnnotatedSample>, DataError> {
    let file = dir.join(format!("{}.jsonl", split.name()));
    let text = fs::read_to_string(&file).map_err(io_err(&file))?;
    let mut out: Vec<AnnotatedSample> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (head, layout) = parse_line(line).map_err(|message| DataError::Malformed {
            file: file.clone(),
            line: i + 1,
            message,
        })?;
        check_id(&head.id)?;
        let violations = validate_layout(&layout, schema);
        if !violations.is_empty() {
            return Err(DataError::InvalidSample { id: head.id, violations });
        }
        if !seen.insert(head.id.clone()) {
            return Err(DataError::DuplicateId(head.id));
        }
        let canvas = load_canvas(&dir.join(&head.canvas))?;
        let saliency = load_saliency(&dir.join(&head.saliency))?;
        if (canvas.height, canvas.width) != (saliency.height, saliency.width) {
            return Err(DataError::Image {
                path: dir.join(&head.saliency),
                message: format!(
                    "saliency is {}x{} but canvas is {}x{}",
                    saliency.height, saliency.width, canvas.height, canvas.width
                ),
            });
        }
        out.push(AnnotatedSample {
            id: head.id,
            canvas,
            saliency,
            layout: layout.raster_sorted(),
        });
    }
    Ok(out)
}

/// Loads all three splits from `dir`.
pub fn load_dataset(dir: impl AsRef<Path>, schema: &CategorySchema) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    let mut ds = Dataset::default();
    for s in Split::ALL {
        *ds.split_mut(s) = load_split(dir, s, schema)?;
    }
    log::info!("loaded {}: {}", dir.display(), ds.summary());
    Ok(ds)
}

pub fn canvas_rel_path(id: &str) -> String {
    format!("canvas/{id}.png")
}

pub fn saliency_rel_path(id: &str) -> String {
    format!("saliency/{id}.png")
}

/// Serializes one split to its JSONL text (no trailing blank line besides
/// the final LF).
pub fn split_to_jsonl(samples: &[AnnotatedSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let rec = RecordOut {
            id: &s.id,
            canvas: canvas_rel_path(&s.id),
            saliency: saliency_rel_path(&s.id),
            elements: s
                .layout
                .elements
                .iter()
                .map(|e| ElementOut {
                    category: e.category,
                    cx: e.bbox.cx,
                    cy: e.bbox.cy,
                    w: e.bbox.w,
                    h: e.bbox.h,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain record"));
        out.push('\n');
    }
    out
}

/// Writes the canonical format: three JSONL files plus PNG images.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<(), DataError> {
    let dir = dir.as_ref();
    for sub in ["canvas", "saliency"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    for split in Split::ALL {
        let samples = ds.split(split);
        for s in samples {
            check_id(&s.id)?;
            save_image(&canvas_to_image(&s.canvas), &dir.join(canvas_rel_path(&s.id)))?;
            save_image(&saliency_to_image(&s.saliency), &dir.join(saliency_rel_path(&s.id)))?;
        }
        let file = dir.join(format!("{}.jsonl", split.name()));
        let mut f = fs::File::create(&file).map_err(io_err(&file))?;
        f.write_all(split_to_jsonl(samples).as_bytes()).map_err(io_err(&file))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_layout_is_valid() {
        assert!(validate_layout(&Layout::default(), &CategorySchema::pku()).is_empty());
    }

    #[test]
    fn unknown_category_is_one_violation() {
        let l = Layout::new(vec![Element::new(5, 0.5, 0.5, 0.1, 0.1)]);
        let v = validate_layout(&l, &CategorySchema::pku());
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::CategoryOutOfRange { category: 5, .. }));
    }

    #[test]
    fn eleven_elements_exceed_the_cap() {
        let l = Layout::new(vec![Element::new(1, 0.5, 0.5, 0.1, 0.1); 11]);
        let v = validate_layout(&l, &CategorySchema::pku());
        assert_eq!(v, vec![Violation::TooManyElements { count: 11, max: 10 }]);
    }

    #[test]
    fn out_of_range_and_zero_size_are_reported() {
        let l = Layout::new(vec![Element::new(2, 1.2, 0.5, 0.0, 0.1)]);
        let v = validate_layout(&l, &CategorySchema::pku());
        assert_eq!(v.len(), 2);
        assert!(v.iter().any(|x| x.to_string().contains("cx")));
        assert!(v.iter().any(|x| matches!(x, Violation::NonPositiveSize { field: "w", .. })));
    }

    #[test]
    fn corner_form_converts_to_center_form() {
        let (_, l) = parse_line(
            r#"{"id":"a","canvas":"c.png","saliency":"s.png","elements":[{"category":1,"x1":0.1,"y1":0.2,"x2":0.5,"y2":0.4}]}"#,
        )
        .unwrap();
        let b = l.elements[0].bbox;
        assert!((b.cx - 0.3).abs() < 1e-12 && (b.cy - 0.3).abs() < 1e-12);
        assert!((b.w - 0.4).abs() < 1e-12 && (b.h - 0.2).abs() < 1e-12);
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_line(r#"{"id":"a","canvas":"c","saliency":"s","elements":[{"category":1,"cx":0.1,"cy":0.2,"w":0.5}]}"#)
            .unwrap_err();
        assert!(err.contains("elements[0].h"), "{err}");
        let err = parse_line(r#"{"id":"a","saliency":"s","elements":[]}"#).unwrap_err();
        assert!(err.contains("canvas"), "{err}");
    }

    #[test]
    fn raster_order_is_top_to_bottom_then_left_to_right() {
        let l = Layout::new(vec![
            Element::new(1, 0.8, 0.5, 0.1, 0.1),
            Element::new(1, 0.2, 0.5, 0.1, 0.1),
            Element::new(2, 0.5, 0.1, 0.1, 0.1),
        ])
        .raster_sorted();
        let xs: Vec<f64> = l.elements.iter().map(|e| e.bbox.cx).collect();
        assert_eq!(xs, vec![0.5, 0.2, 0.8]);
    }

    #[test]
    fn iou_of_offset_squares_is_one_third() {
        let a = BBox::new(0.3, 0.5, 0.2, 0.2);
        let b = BBox::new(0.4, 0.5, 0.2, 0.2);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }
}
