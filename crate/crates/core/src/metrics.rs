//! Layout quality metrics.
//!
//! Graphic metrics look at the layout alone (overlay, alignment, underlay
//! effectiveness), content metrics relate it to the canvas (occlusion,
//! readability), and distribution metrics compare sets of layout features
//! (FID, density, coverage).

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Canvas, CategorySchema, Layout, SaliencyMap};
use crate::encoders::LayoutFeature;
use crate::{Error, Result};

/// Diagonal added to both covariances before the Fréchet distance.
pub const FID_SHRINKAGE: f64 = 1e-6;
pub const DEFAULT_DC_K: usize = 5;

fn to_matrix(feats: &[LayoutFeature]) -> Result<DMatrix<f64>> {
    let d = feats.first().map_or(0, LayoutFeature::dim);
    if feats.iter().any(|f| f.dim() != d) {
        return Err(Error::Config("features of different lengths".into()));
    }
    if feats.iter().any(|f| f.0.iter().any(|v| !v.is_finite())) {
        return Err(Error::Config("non-finite feature value".into()));
    }
    Ok(DMatrix::from_fn(feats.len(), d, |i, j| feats[i].0[j] as f64))
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (n.max(2) - 1) as f64;
    let mut cov = centered.transpose() * &centered / denom;
    for i in 0..cov.nrows() {
        cov[(i, i)] += FID_SHRINKAGE;
    }
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(real: &[LayoutFeature], generated: &[LayoutFeature]) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::Config("FID needs at least two features per set".into()));
    }
    let (a, b) = (to_matrix(real)?, to_matrix(generated)?);
    if a.ncols() != b.ncols() {
        return Err(Error::Config(format!("feature length {} vs {}", a.ncols(), b.ncols())));
    }
    let (m1, s1) = mean_cov(&a);
    let (m2, s2) = mean_cov(&b);
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

fn non_underlay<'a>(layout: &'a Layout, schema: &'a CategorySchema) -> impl Iterator<Item = &'a BBox> {
    layout
        .elements
        .iter()
        .filter(|e| !schema.is_underlay(e.category))
        .map(|e| &e.bbox)
}

fn underlays<'a>(layout: &'a Layout, schema: &'a CategorySchema) -> impl Iterator<Item = &'a BBox> {
    layout
        .elements
        .iter()
        .filter(|e| schema.is_underlay(e.category))
        .map(|e| &e.bbox)
}

/// Share of underlays that fully contain some non-underlay element; `None`
/// without underlays.
pub fn underlay_strict(layout: &Layout, schema: &CategorySchema) -> Option<f64> {
    let scores: Vec<f64> = underlays(layout, schema)
        .map(|u| f64::from(u8::from(non_underlay(layout, schema).any(|b| u.contains(b)))))
        .collect();
    mean(&scores)
}

/// Mean over underlays of the best covered fraction of a non-underlay
/// element; `None` without underlays.
pub fn underlay_loose(layout: &Layout, schema: &CategorySchema) -> Option<f64> {
    let scores: Vec<f64> = underlays(layout, schema)
        .map(|u| {
            non_underlay(layout, schema)
                // Rounding can push a fully covered element just above 1.
                .map(|b| if b.area() > 0.0 { (u.intersection_area(b) / b.area()).min(1.0) } else { 0.0 })
                .fold(0.0, f64::max)
        })
        .collect();
    mean(&scores)
}

/// Mean IoU over unordered pairs of non-underlay elements.
pub fn overlay(layout: &Layout, schema: &CategorySchema) -> f64 {
    let boxes: Vec<&BBox> = non_underlay(layout, schema).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            total += boxes[i].iou(boxes[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

fn lines(b: &BBox) -> [f64; 6] {
    [b.left(), b.cx, b.right(), b.top(), b.cy, b.bottom()]
}

/// Mean over elements of `−log(1−d)`, `d` the smallest distance between
/// one of its six alignment lines and the same line of another element.
pub fn alignment(layout: &Layout) -> f64 {
    let els = &layout.elements;
    if els.len() < 2 {
        return 0.0;
    }
    let per: Vec<f64> = els
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let la = lines(&a.bbox);
            let d = els
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, b)| {
                    let lb = lines(&b.bbox);
                    (0..6).map(move |k| (la[k] - lb[k]).abs())
                })
                .fold(f64::INFINITY, f64::min)
                .min(1.0 - 1e-8);
            -(1.0 - d).ln()
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// Half-open pixel span `[start, end)` whose pixel centers fall inside
/// `[lo, hi)` on an axis of `n` pixels.
fn pixel_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let conv = |v: f64| ((v * n as f64 - 0.5).ceil().max(0.0) as usize).min(n);
    (conv(lo), conv(hi))
}

fn box_pixels(b: &BBox, height: usize, width: usize) -> ((usize, usize), (usize, usize)) {
    (pixel_span(b.top(), b.bottom(), height), pixel_span(b.left(), b.right(), width))
}

/// Mean saliency over the union of pixels covered by any element.
pub fn occlusion(layout: &Layout, saliency: &SaliencyMap) -> f64 {
    let (h, w) = (saliency.height, saliency.width);
    let mut covered = vec![false; h * w];
    for e in &layout.elements {
        let ((y0, y1), (x0, x1)) = box_pixels(&e.bbox, h, w);
        for y in y0..y1 {
            covered[y * w + x0..y * w + x1].fill(true);
        }
    }
    let (sum, count) = covered
        .iter()
        .zip(&saliency.values)
        .filter(|(&c, _)| c)
        .fold((0.0, 0usize), |(s, n), (_, &v)| (s + v as f64, n + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean over text elements of the average `(|∂x| + |∂y|)/2` of the gray
/// canvas inside the box (forward differences, zero at the canvas edge).
/// `None` without text elements.
pub fn readability(layout: &Layout, canvas: &Canvas, schema: &CategorySchema) -> Option<f64> {
    let (h, w) = (canvas.height, canvas.width);
    let gray = canvas.gray();
    let scores: Vec<f64> = layout
        .elements
        .iter()
        .filter(|e| schema.is_text(e.category))
        .map(|e| {
            let ((y0, y1), (x0, x1)) = box_pixels(&e.bbox, h, w);
            let n = (y1 - y0) * (x1 - x0);
            if n == 0 {
                return 0.0;
            }
            let mut total = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let g = gray[y * w + x];
                    let dx = if x + 1 < w { (gray[y * w + x + 1] - g).abs() } else { 0.0 };
                    let dy = if y + 1 < h { (gray[(y + 1) * w + x] - g).abs() } else { 0.0 };
                    total += (dx + dy) as f64 / 2.0;
                }
            }
            total / n as f64
        })
        .collect();
    mean(&scores)
}

fn dist(a: &LayoutFeature, b: &LayoutFeature) -> f64 {
    a.distance(b)
}

/// Density and coverage of generated features against real ones using
/// each real point's `k`-th nearest real neighbor as its radius.
pub fn density_coverage(real: &[LayoutFeature], generated: &[LayoutFeature], k: usize) -> Result<(f64, f64)> {
    let n = real.len();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("k={k} needs 1 ≤ k < {n} real features")));
    }
    if generated.is_empty() {
        return Err(Error::Config("no generated features".into()));
    }
    let radius: Vec<f64> = real
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut d: Vec<f64> = real
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, o)| dist(r, o))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let mut hits = 0usize;
    let mut covered = vec![false; n];
    for g in generated {
        for (i, r) in real.iter().enumerate() {
            if dist(g, r) <= radius[i] {
                hits += 1;
                covered[i] = true;
            }
        }
    }
    let den = hits as f64 / (k * generated.len()) as f64;
    let cov = covered.iter().filter(|&&c| c).count() as f64 / n as f64;
    Ok((den, cov))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Metrics of one generation trial.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub fid: f64,
    pub und_s: Option<f64>,
    pub und_l: Option<f64>,
    pub ove: f64,
    pub align: f64,
    pub occ: f64,
    pub rea: Option<f64>,
    pub den: f64,
    pub cov: f64,
    pub samples: usize,
}

/// Trial metrics averaged over trials, with the per-trial breakdown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub und_s: Option<f64>,
    pub und_l: Option<f64>,
    pub ove: f64,
    pub align: f64,
    pub occ: f64,
    pub rea: Option<f64>,
    pub den: f64,
    pub cov: f64,
    pub samples: usize,
    pub real_samples: usize,
    pub trials: Vec<TrialMetrics>,
}

/// One generated layout with the canvas it was generated for.
pub struct Generated<'a> {
    pub layout: &'a Layout,
    pub canvas: &'a Canvas,
    pub saliency: &'a SaliencyMap,
}

/// Evaluates one trial. `gen_feats` are the frozen-encoder features of the
/// generated layouts, in the same order.
pub fn evaluate_trial(
    items: &[Generated<'_>],
    gen_feats: &[LayoutFeature],
    real_feats: &[LayoutFeature],
    schema: &CategorySchema,
    k: usize,
) -> Result<TrialMetrics> {
    if items.len() != gen_feats.len() {
        return Err(Error::Config(format!("{} layouts but {} features", items.len(), gen_feats.len())));
    }
    let collect = |f: &dyn Fn(&Generated<'_>) -> Option<f64>| -> Option<f64> {
        mean(&items.iter().filter_map(f).collect::<Vec<_>>())
    };
    let (den, cov) = density_coverage(real_feats, gen_feats, k)?;
    Ok(TrialMetrics {
        fid: fid(real_feats, gen_feats)?,
        und_s: collect(&|g| underlay_strict(g.layout, schema)),
        und_l: collect(&|g| underlay_loose(g.layout, schema)),
        ove: collect(&|g| Some(overlay(g.layout, schema))).unwrap_or(0.0),
        align: collect(&|g| Some(alignment(g.layout))).unwrap_or(0.0),
        occ: collect(&|g| Some(occlusion(g.layout, g.saliency))).unwrap_or(0.0),
        rea: collect(&|g| readability(g.layout, g.canvas, schema)),
        den,
        cov,
        samples: items.len(),
    })
}

impl MetricReport {
    pub fn from_trials(trials: Vec<TrialMetrics>, real_samples: usize) -> Self {
        let n = trials.len().max(1) as f64;
        let avg = |f: &dyn Fn(&TrialMetrics) -> f64| trials.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&TrialMetrics) -> Option<f64>| mean(&trials.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            fid: avg(&|t| t.fid),
            und_s: avg_opt(&|t| t.und_s),
            und_l: avg_opt(&|t| t.und_l),
            ove: avg(&|t| t.ove),
            align: avg(&|t| t.align),
            occ: avg(&|t| t.occ),
            rea: avg_opt(&|t| t.rea),
            den: avg(&|t| t.den),
            cov: avg(&|t| t.cov),
            samples: trials.iter().map(|t| t.samples).sum(),
            real_samples,
            trials,
        }
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "{:<8} {:>10}", "metric", "value")?;
        writeln!(f, "{:<8} {:>10.4}", "FID", self.fid)?;
        writeln!(f, "{:<8} {:>10}", "Und_S", opt(self.und_s))?;
        writeln!(f, "{:<8} {:>10}", "Und_L", opt(self.und_l))?;
        writeln!(f, "{:<8} {:>10.4}", "Ove", self.ove)?;
        writeln!(f, "{:<8} {:>10.4}", "Align", self.align)?;
        writeln!(f, "{:<8} {:>10.4}", "Occ", self.occ)?;
        writeln!(f, "{:<8} {:>10}", "Rea", opt(self.rea))?;
        writeln!(f, "{:<8} {:>10.4}", "Den", self.den)?;
        write!(f, "{:<8} {:>10.4}", "Cov", self.cov)
    }
}
