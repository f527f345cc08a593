//! Procedural posters: a gradient background with one to three smooth
//! blobs as the subject, the exact blob mask as saliency, and a stack of
//! text and logo elements placed in the least salient band of rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    validate_layout, AnnotatedSample, Canvas, CategorySchema, Dataset, Element, Layout, SaliencyMap, DEFAULT_CANVAS_HEIGHT,
    DEFAULT_CANVAS_WIDTH,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub min_subjects: usize,
    pub max_subjects: usize,
    pub min_elements: usize,
    pub max_elements: usize,
    pub underlay_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 800,
            val: 100,
            test: 100,
            height: DEFAULT_CANVAS_HEIGHT,
            width: DEFAULT_CANVAS_WIDTH,
            min_subjects: 1,
            max_subjects: 3,
            min_elements: 1,
            max_elements: 10,
            underlay_prob: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth config: {m}")));
        if self.height < 8 || self.width < 8 {
            return bad("canvas must be at least 8x8");
        }
        if self.min_subjects == 0 || self.min_subjects > self.max_subjects {
            return bad("subject range must satisfy 1 ≤ min ≤ max");
        }
        if self.min_elements == 0 || self.min_elements > self.max_elements || self.max_elements > 10 {
            return bad("element range must satisfy 1 ≤ min ≤ max ≤ 10");
        }
        if !(0.0..=1.0).contains(&self.underlay_prob) {
            return bad("underlay probability outside [0,1]");
        }
        Ok(())
    }
}

const PLACEMENT_RETRIES: usize = 20;

struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    color: [f32; 3],
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn render(cfg: &SynthConfig, rng: &mut impl Rng) -> (Canvas, SaliencyMap) {
    let (h, w) = (cfg.height, cfg.width);
    let top = random_color(rng);
    let bottom = random_color(rng);
    let tilt: f32 = rng.random_range(-0.2..0.2);
    let blobs: Vec<Blob> = (0..rng.random_range(cfg.min_subjects..=cfg.max_subjects))
        .map(|_| Blob {
            cx: rng.random_range(0.15..0.85),
            cy: rng.random_range(0.15..0.85),
            sx: rng.random_range(0.08..0.2),
            sy: rng.random_range(0.06..0.16),
            color: random_color(rng),
        })
        .collect();
    let mut pixels = Vec::with_capacity(h * w * 3);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let fx = (x as f64 + 0.5) / w as f64;
            let t = (fy as f32 + tilt * (fx as f32 - 0.5)).clamp(0.0, 1.0);
            let mut px: [f32; 3] = std::array::from_fn(|c| top[c] * (1.0 - t) + bottom[c] * t);
            let mut m = 0f32;
            for b in &blobs {
                let d = ((fx - b.cx) / b.sx).powi(2) + ((fy - b.cy) / b.sy).powi(2);
                let a = (-0.5 * d).exp() as f32;
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + b.color[c] * a;
                }
                m = m.max(a);
            }
            pixels.extend(px);
            mask.push(m);
        }
    }
    let peak = mask.iter().copied().fold(0f32, f32::max);
    let values = mask.iter().map(|&m| if peak > 0.0 { m / peak } else { 0.0 }).collect();
    (Canvas::new(h, w, pixels), SaliencyMap::new(h, w, values))
}

#[derive(Clone, Copy)]
enum Align {
    Left,
    Center,
    Right,
}

/// Mean saliency over rows `[top, bottom)` given as fractions.
fn band_saliency(row_mean: &[f64], top: f64, bottom: f64) -> f64 {
    let n = row_mean.len();
    let a = ((top * n as f64).floor() as usize).min(n - 1);
    let b = ((bottom * n as f64).ceil() as usize).clamp(a + 1, n);
    row_mean[a..b].iter().sum::<f64>() / (b - a) as f64
}

/// Builds one poster layout; `None` when the stack does not fit.
fn place(cfg: &SynthConfig, saliency: &SaliencyMap, schema: &CategorySchema, rng: &mut impl Rng) -> Option<Layout> {
    let logo = schema.id_of("logo")?;
    let text = schema.id_of("text")?;
    let underlay = schema.id_of("underlay")?;
    let count = rng.random_range(cfg.min_elements..=cfg.max_elements);
    let with_underlay = count >= 2 && rng.random_bool(cfg.underlay_prob);
    let content = count - usize::from(with_underlay);
    let with_logo = content >= 2 && rng.random_bool(0.5);
    let lines = content - usize::from(with_logo);

    let align = match rng.random_range(0..3) {
        0 => Align::Left,
        1 => Align::Center,
        _ => Align::Right,
    };
    let margin = rng.random_range(0.04..0.1);
    let gap = rng.random_range(0.01..0.02);
    // (category, w, h) from top to bottom.
    let mut stack: Vec<(u32, f64, f64)> = Vec::with_capacity(content);
    if with_logo {
        stack.push((logo, rng.random_range(0.12..0.22), rng.random_range(0.05..0.08)));
    }
    for i in 0..lines {
        let (w, h) = if i == 0 {
            (rng.random_range(0.55..0.85), rng.random_range(0.06..0.1))
        } else {
            (rng.random_range(0.3..0.65), rng.random_range(0.025..0.045))
        };
        stack.push((text, w, h));
    }
    let total: f64 = stack.iter().map(|s| s.2).sum::<f64>() + gap * (stack.len() - 1) as f64;
    if total > 0.9 {
        return None;
    }

    let row_mean: Vec<f64> = (0..saliency.height)
        .map(|y| saliency.values[y * saliency.width..(y + 1) * saliency.width].iter().map(|&v| v as f64).sum::<f64>() / saliency.width as f64)
        .collect();
    let lo = 0.03;
    let hi = 0.97 - total;
    if hi < lo {
        return None;
    }
    let mut candidates: Vec<(f64, f64)> = (0..=40)
        .map(|k| lo + (hi - lo) * k as f64 / 40.0)
        .map(|top| (band_saliency(&row_mean, top, top + total), top))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let start = candidates[rng.random_range(0..3.min(candidates.len()))].1;

    let mut elements = Vec::with_capacity(count);
    let mut y = start;
    for &(cat, w, h) in &stack {
        let cx = match align {
            Align::Left => margin + w / 2.0,
            Align::Center => 0.5,
            Align::Right => 1.0 - margin - w / 2.0,
        };
        if cx - w / 2.0 < 0.0 || cx + w / 2.0 > 1.0 {
            return None;
        }
        elements.push(Element::new(cat, cx, y + h / 2.0, w, h));
        y += h + gap;
    }
    if with_underlay {
        let texts: Vec<usize> = (0..elements.len()).filter(|&i| elements[i].category == text).collect();
        let target = elements[texts[rng.random_range(0..texts.len())]].bbox;
        let pad_x = rng.random_range(0.01..0.03f64).min(target.left()).min(1.0 - target.right());
        let pad_y = rng.random_range(0.005..0.015f64).min(target.top()).min(1.0 - target.bottom());
        elements.push(Element::new(underlay, target.cx, target.cy, target.w + 2.0 * pad_x, target.h + 2.0 * pad_y));
    }
    Some(Layout::new(elements).raster_sorted())
}

fn sample_at(cfg: &SynthConfig, schema: &CategorySchema, index: u64, id: String) -> Result<AnnotatedSample> {
    for attempt in 0..PLACEMENT_RETRIES as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index | (attempt << 40));
        let (canvas, saliency) = render(cfg, &mut rng);
        if let Some(layout) = place(cfg, &saliency, schema, &mut rng) {
            if validate_layout(&layout, schema).is_empty() {
                return Ok(AnnotatedSample {
                    id,
                    canvas,
                    saliency,
                    layout,
                });
            }
        }
        log::debug!("sample {id}: placement failed, regenerating with a new sub-seed");
    }
    Err(Error::Config(format!("sample {id}: no feasible placement after {PLACEMENT_RETRIES} attempts")))
}

/// Train, val and test splits with disjoint ids. Every sample depends only
/// on the seed and its index.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, schema: &CategorySchema) -> Result<Dataset> {
    cfg.validate()?;
    for name in ["logo", "text", "underlay"] {
        if schema.id_of(name).is_none() {
            return Err(Error::Config(format!("schema lacks category {name:?}")));
        }
    }
    let mut index = 0u64;
    let mut split = |n: usize, name: &str| -> Result<Vec<AnnotatedSample>> {
        (0..n)
            .map(|i| {
                let s = sample_at(cfg, schema, index, format!("{name}-{i:05}"));
                index += 1;
                s
            })
            .collect()
    };
    Ok(Dataset {
        train: split(cfg.train, "train")?,
        val: split(cfg.val, "val")?,
        test: split(cfg.test, "test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::underlay_strict;

    fn small() -> SynthConfig {
        SynthConfig {
            train: 60,
            val: 20,
            test: 20,
            height: 80,
            width: 56,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn samples_are_valid_and_deterministic() {
        let schema = CategorySchema::pku();
        let a = generate_synthetic_dataset(&small(), &schema).unwrap();
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), 100);
        for s in a.train.iter().chain(&a.val).chain(&a.test) {
            assert!(validate_layout(&s.layout, &schema).is_empty(), "{}", s.id);
            assert!((1..=10).contains(&s.layout.len()));
            assert!(s.saliency.values.iter().sum::<f32>() > 0.0);
        }
        assert_eq!(a, generate_synthetic_dataset(&small(), &schema).unwrap());
    }

    #[test]
    fn underlays_wrap_text() {
        let schema = CategorySchema::pku();
        let cfg = SynthConfig {
            underlay_prob: 1.0,
            min_elements: 3,
            ..small()
        };
        let ds = generate_synthetic_dataset(&cfg, &schema).unwrap();
        let scores: Vec<f64> = ds.train.iter().filter_map(|s| underlay_strict(&s.layout, &schema)).collect();
        assert_eq!(scores.len(), ds.train.len());
        assert!(scores.iter().sum::<f64>() / scores.len() as f64 >= 0.9);
    }

    #[test]
    fn bad_ranges_are_rejected() {
        let cfg = SynthConfig {
            max_elements: 11,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }
}
