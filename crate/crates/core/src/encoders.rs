//! Image encoder and the frozen layout encoder.
//!
//! The image encoder splits the canvas (RGB plus saliency as a fourth
//! channel, resized to `H_e × W_e`) into non-overlapping `P×P` patches,
//! embeds each patch linearly, adds learned row and column embeddings and
//! refines the grid with a transformer encoder, giving `H′W′ × d` features.
//!
//! The layout encoder embeds each element as the sum of a category
//! embedding and four quantized-coordinate embeddings, runs a transformer
//! encoder without positional information, and mean-pools to one
//! `d`-vector. It is pretrained by masked-element reconstruction and then
//! frozen; only a frozen encoder may produce features.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ralf_numerics::checkpoint::Checkpoint;
use ralf_numerics::nn::{Embedding, Encoder, Linear, TransformerConfig};
use ralf_numerics::optim::{clip_grad_norm, AdamW};
use ralf_numerics::{Graph, Mode, ParamStore, Scalar, Tensor, Var};

use crate::data::{Canvas, Layout, SaliencyMap};
use crate::tokenizer::{quantize_box, Vocabulary};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// 352×240 input, 16-pixel patches, d=256, 6 layers, 8 heads, 1024 hidden.
    pub fn full() -> Self {
        Self {
            patch_size: 16,
            input_height: 352,
            input_width: 240,
            dim: 256,
            layers: 6,
            heads: 8,
            hidden: 1024,
            dropout: 0.1,
        }
    }

    /// 80×56 input, 8-pixel patches, d=64, 2 layers, 4 heads, 256 hidden.
    pub fn toy() -> Self {
        Self {
            patch_size: 8,
            input_height: 80,
            input_width: 56,
            dim: 64,
            layers: 2,
            heads: 4,
            hidden: 256,
            dropout: 0.1,
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            dim: self.dim,
            heads: self.heads,
            hidden: self.hidden,
            layers: self.layers,
            dropout: self.dropout,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_height / self.patch_size, self.input_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_len(&self) -> usize {
        4 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.input_height % p != 0 || self.input_width % p != 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not a positive multiple of patch size {p}",
                self.input_height, self.input_width
            )));
        }
        self.transformer().validate()?;
        Ok(())
    }
}

/// Encoded image grid, `rows = H′W′`, `dim = d`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

/// Nearest-neighbor resample of canvas and saliency into `P×P` patches.
/// Each patch row holds `[r, g, b, s]` for every pixel of the patch.
pub fn patchify<T: Scalar>(canvas: &Canvas, saliency: &SaliencyMap, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if (canvas.height, canvas.width) != (saliency.height, saliency.width) {
        return Err(Error::Config(format!(
            "canvas {}x{} and saliency {}x{} differ",
            canvas.height, canvas.width, saliency.height, saliency.width
        )));
    }
    let (he, we, p) = (cfg.input_height, cfg.input_width, cfg.patch_size);
    let (gh, gw) = cfg.grid();
    let src_y: Vec<usize> = (0..he).map(|y| ((y as f64 + 0.5) * canvas.height as f64 / he as f64) as usize).collect();
    let src_x: Vec<usize> = (0..we).map(|x| ((x as f64 + 0.5) * canvas.width as f64 / we as f64) as usize).collect();
    let mut data = Vec::with_capacity(gh * gw * cfg.patch_len());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let sy = src_y[py * p + dy].min(canvas.height - 1);
                for dx in 0..p {
                    let sx = src_x[px * p + dx].min(canvas.width - 1);
                    let [r, g, b] = canvas.rgb(sy, sx);
                    data.extend([T::of(r as f64), T::of(g as f64), T::of(b as f64), T::of(saliency.at(sy, sx) as f64)]);
                }
            }
        }
    }
    Ok(Tensor::matrix(gh * gw, cfg.patch_len(), data)?)
}

/// Parameter handles of the image encoder.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub cfg: EncoderConfig,
    patch: Linear,
    row_pos: Embedding,
    col_pos: Embedding,
    encoder: Encoder,
}

impl ImageEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (gh, gw) = cfg.grid();
        Ok(Self {
            patch: Linear::new(store, &format!("{name}.patch"), cfg.patch_len(), cfg.dim, rng)?,
            row_pos: Embedding::new(store, &format!("{name}.row_pos"), gh, cfg.dim, rng)?,
            col_pos: Embedding::new(store, &format!("{name}.col_pos"), gw, cfg.dim, rng)?,
            encoder: Encoder::new(store, &format!("{name}.encoder"), &cfg.transformer(), rng)?,
            cfg,
        })
    }

    /// `patches` comes from [`patchify`]; returns the `H′W′ × d` node.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let (gh, gw) = self.cfg.grid();
        let got = g.value(patches).shape().to_vec();
        if got != [gh * gw, self.cfg.patch_len()] {
            return Err(Error::Config(format!(
                "patch tensor {got:?} does not match grid {gh}x{gw} with patch length {}",
                self.cfg.patch_len()
            )));
        }
        let x = self.patch.forward(g, patches)?;
        let rows: Vec<usize> = (0..gh * gw).map(|i| i / gw).collect();
        let cols: Vec<usize> = (0..gh * gw).map(|i| i % gw).collect();
        let rp = self.row_pos.forward(g, &rows)?;
        let cp = self.col_pos.forward(g, &cols)?;
        let x = g.add(x, rp)?;
        let x = g.add(x, cp)?;
        let x = g.dropout(x, self.cfg.dropout)?;
        Ok(self.encoder.forward(g, x)?)
    }
}

/// Standalone image encoder with its own weights, evaluated without dropout.
pub struct ImageEncoderModel {
    pub net: ImageEncoder,
    pub store: ParamStore<f32>,
}

impl ImageEncoderModel {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = ImageEncoder::new(&mut store, "image", cfg, &mut rng)?;
        Ok(Self { net, store })
    }

    pub fn encode_image(&self, canvas: &Canvas, saliency: &SaliencyMap) -> Result<FeatureMap> {
        let patches = patchify::<f32>(canvas, saliency, &self.net.cfg)?;
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let p = g.constant(patches);
        let out = self.net.forward(&mut g, p)?;
        let v = g.value(out);
        Ok(FeatureMap {
            rows: v.rows(),
            dim: v.cols(),
            data: v.data().to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEncoderConfig {
    pub vocab: Vocabulary,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Fraction of elements hidden during pretraining.
    pub mask_ratio: f64,
}

impl LayoutEncoderConfig {
    pub fn full(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            dim: 256,
            layers: 6,
            heads: 8,
            hidden: 1024,
            dropout: 0.1,
            mask_ratio: 0.3,
        }
    }

    pub fn toy(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            dim: 64,
            layers: 2,
            heads: 4,
            hidden: 256,
            dropout: 0.1,
            mask_ratio: 0.3,
        }
    }

    fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            dim: self.dim,
            heads: self.heads,
            hidden: self.hidden,
            layers: self.layers,
            dropout: self.dropout,
        }
    }
}

/// Fixed-length layout descriptor from a frozen layout encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutFeature(pub Vec<f32>);

impl LayoutFeature {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &LayoutFeature) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Parameter handles of the layout encoder.
#[derive(Clone, Debug)]
pub struct LayoutEncoderNet {
    pub cfg: LayoutEncoderConfig,
    category: Embedding,
    coords: [Embedding; 4],
    mask: Embedding,
    empty: Embedding,
    encoder: Encoder,
    category_head: Linear,
    coord_heads: [Linear; 4],
}

/// Quantized element as `[category, x, y, w, h]`; category is 1-based.
type ElementTokens = [usize; 5];

fn element_tokens(layout: &Layout, vocab: &Vocabulary) -> Result<Vec<ElementTokens>> {
    layout
        .elements
        .iter()
        .map(|e| {
            let q = quantize_box(&e.bbox, vocab.bins)?;
            if e.category == 0 || e.category as usize > vocab.num_categories {
                return Err(Error::Config(format!("category {} outside vocabulary", e.category)));
            }
            Ok([e.category as usize, q[0], q[1], q[2], q[3]])
        })
        .collect()
}

impl LayoutEncoderNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: LayoutEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.dim;
        let b = cfg.vocab.bins;
        let c = cfg.vocab.num_categories;
        let coords = ["x", "y", "w", "h"];
        Ok(Self {
            category: Embedding::new(store, "layout.category", c, d, rng)?,
            coords: [0, 1, 2, 3].map(|i| Embedding::new(store, &format!("layout.coord_{}", coords[i]), b, d, rng).expect("fresh names")),
            mask: Embedding::new(store, "layout.mask", 1, d, rng)?,
            empty: Embedding::new(store, "layout.empty", 1, d, rng)?,
            encoder: Encoder::new(store, "layout.encoder", &cfg.transformer(), rng)?,
            category_head: Linear::new(store, "layout.head_category", d, c, rng)?,
            coord_heads: [0, 1, 2, 3].map(|i| Linear::new(store, &format!("layout.head_{}", coords[i]), d, b, rng).expect("fresh names")),
            cfg,
        })
    }

    /// Per-element embeddings; elements listed in `masked` use the mask
    /// embedding instead.
    fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, elements: &[ElementTokens], masked: &[bool]) -> Result<Var> {
        let cats: Vec<usize> = elements.iter().map(|e| e[0] - 1).collect();
        let mut x = self.category.forward(g, &cats)?;
        for (i, emb) in self.coords.iter().enumerate() {
            let ids: Vec<usize> = elements.iter().map(|e| e[i + 1]).collect();
            let c = emb.forward(g, &ids)?;
            x = g.add(x, c)?;
        }
        if masked.iter().any(|&m| m) {
            // Rows are rebuilt: unmasked rows from `x`, masked rows from the mask table.
            let mask_table = g.param(self.mask.table);
            let mut rows = Vec::with_capacity(elements.len());
            for (i, &m) in masked.iter().enumerate() {
                rows.push(if m { g.gather_rows(mask_table, &[0])? } else { g.slice_rows(x, i, 1)? });
            }
            x = g.concat_rows(&rows)?;
        }
        Ok(x)
    }

    /// Pooled `1×d` feature. Elements are put in a canonical order first so
    /// any permutation of the same elements gives bit-identical output.
    pub fn pooled<T: Scalar>(&self, g: &mut Graph<'_, T>, layout: &Layout) -> Result<Var> {
        let mut elements = element_tokens(layout, &self.cfg.vocab)?;
        if elements.is_empty() {
            let t = g.param(self.empty.table);
            return Ok(g.gather_rows(t, &[0])?);
        }
        elements.sort();
        let x = self.embed(g, &elements, &vec![false; elements.len()])?;
        let h = self.encoder.forward(g, x)?;
        Ok(g.mean_rows(h)?)
    }

    /// Masked-element reconstruction loss: mean cross-entropy over the five
    /// tokens of every masked element.
    pub fn reconstruction_loss<T: Scalar>(&self, g: &mut Graph<'_, T>, layout: &Layout, masked: &[bool]) -> Result<Var> {
        let elements = element_tokens(layout, &self.cfg.vocab)?;
        let x = self.embed(g, &elements, masked)?;
        let h = self.encoder.forward(g, x)?;
        let idx: Vec<usize> = (0..masked.len()).filter(|&i| masked[i]).collect();
        if idx.is_empty() {
            return Err(Error::Config("reconstruction needs at least one masked element".into()));
        }
        let hm = g.gather_rows(h, &idx)?;
        let cat_logits = self.category_head.forward(g, hm)?;
        let cat_targets: Vec<usize> = idx.iter().map(|&i| elements[i][0] - 1).collect();
        let mut total = g.cross_entropy(cat_logits, &cat_targets)?;
        for (k, head) in self.coord_heads.iter().enumerate() {
            let logits = head.forward(g, hm)?;
            let targets: Vec<usize> = idx.iter().map(|&i| elements[i][k + 1]).collect();
            let l = g.cross_entropy(logits, &targets)?;
            total = g.add(total, l)?;
        }
        Ok(g.scale(total, 0.2)?)
    }
}

/// Chooses `max(1, round(ratio·T))` elements to hide.
pub fn choose_mask(len: usize, ratio: f64, rng: &mut impl Rng) -> Vec<bool> {
    let count = ((len as f64 * ratio).round() as usize).clamp(1, len.max(1));
    let mut mask = vec![false; len];
    if len == 0 {
        return mask;
    }
    for i in sample(rng, len, count.min(len)).into_iter() {
        mask[i] = true;
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Layout encoder weights plus a freeze stamp.
pub struct LayoutEncoder {
    pub net: LayoutEncoderNet,
    pub store: ParamStore<f32>,
    stamp: Option<String>,
}

impl LayoutEncoder {
    pub fn new(cfg: LayoutEncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = LayoutEncoderNet::new(&mut store, cfg, &mut rng)?;
        Ok(Self { net, store, stamp: None })
    }

    pub fn config(&self) -> &LayoutEncoderConfig {
        &self.net.cfg
    }

    pub fn is_frozen(&self) -> bool {
        self.stamp.is_some()
    }

    /// Version stamp of the frozen weights.
    pub fn stamp(&self) -> Result<&str> {
        self.stamp.as_deref().ok_or(Error::EncoderNotFrozen)
    }

    /// Freezes the weights; the stamp fingerprints them.
    pub fn freeze(mut self) -> Self {
        self.stamp = Some(self.checkpoint().stamp());
        self
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let config = serde_json::json!({ "kind": "layout_encoder", "config": self.net.cfg });
        Checkpoint::from_store(&self.store, config, self.stamp.is_some())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: LayoutEncoderConfig = serde_json::from_value(ck.config["config"].clone())
            .map_err(|e| Error::Config(format!("layout encoder config: {e}")))?;
        let mut enc = Self::new(cfg, 0)?;
        ck.restore_into(&mut enc.store)?;
        if ck.frozen {
            enc.stamp = Some(ck.stamp());
        }
        Ok(enc)
    }

    pub fn encode_layout(&self, layout: &Layout) -> Result<LayoutFeature> {
        self.stamp()?;
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let v = self.net.pooled(&mut g, layout)?;
        Ok(LayoutFeature(g.value(v).data().to_vec()))
    }

    /// Mean reconstruction loss over `layouts` (those with `T ≥ 1`) with
    /// masks drawn from `seed`.
    pub fn reconstruction_loss(&self, layouts: &[Layout], seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        let mut n = 0usize;
        for l in layouts.iter().filter(|l| !l.is_empty()) {
            let mask = choose_mask(l.len(), self.net.cfg.mask_ratio, &mut rng);
            let mut g = Graph::new(&self.store, Mode::Eval, 0);
            let loss = self.net.reconstruction_loss(&mut g, l, &mask)?;
            total += g.value(loss).data()[0] as f64;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Config("no non-empty layouts".into()));
        }
        Ok(total / n as f64)
    }
}

/// Masked-element pretraining of a fresh layout encoder, returned frozen.
pub fn pretrain_layout_encoder(
    layouts: &[Layout],
    cfg: LayoutEncoderConfig,
    train: PretrainConfig,
) -> Result<LayoutEncoder> {
    let usable: Vec<&Layout> = layouts.iter().filter(|l| !l.is_empty()).collect();
    if usable.len() < 2 {
        return Err(Error::Config(format!(
            "layout encoder pretraining needs at least 2 non-empty layouts, got {}",
            usable.len()
        )));
    }
    let mut enc = LayoutEncoder::new(cfg, train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_1a70);
    let opt = AdamW {
        lr: train.lr,
        weight_decay: train.weight_decay,
        ..AdamW::default()
    };
    let batch = train.batch_size.max(1);
    for step in 0..train.steps {
        enc.store.zero_grad();
        for _ in 0..batch {
            let l = usable[rng.random_range(0..usable.len())];
            let mask = choose_mask(l.len(), cfg.mask_ratio, &mut rng);
            let grads = {
                let mut g = Graph::new(&enc.store, Mode::Train, rng.random());
                let loss = enc.net.reconstruction_loss(&mut g, l, &mask)?;
                g.backward(loss)?
            };
            enc.store.accumulate(&grads, 1.0 / batch as f32);
        }
        clip_grad_norm(&mut enc.store, train.grad_clip);
        opt.step(&mut enc.store)?;
        if step % 100 == 0 {
            log::debug!("layout encoder pretraining step {step}");
        }
    }
    Ok(enc.freeze())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Element;

    fn toy_encoder() -> LayoutEncoder {
        LayoutEncoder::new(LayoutEncoderConfig::toy(Vocabulary::new(3, 128)), 1)
            .unwrap()
            .freeze()
    }

    #[test]
    fn toy_grid_has_seventy_rows() {
        let m = ImageEncoderModel::new(EncoderConfig::toy(), 0).unwrap();
        let c = Canvas::filled(80, 56, [0.2, 0.4, 0.6]);
        let s = SaliencyMap::filled(80, 56, 0.5);
        let f = m.encode_image(&c, &s).unwrap();
        assert_eq!((f.rows, f.dim), (70, 64));
        assert_eq!(f, m.encode_image(&c, &s).unwrap());
    }

    #[test]
    fn patch_mismatch_is_rejected() {
        let cfg = EncoderConfig {
            input_height: 81,
            ..EncoderConfig::toy()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unfrozen_encoder_refuses_to_encode() {
        let enc = LayoutEncoder::new(LayoutEncoderConfig::toy(Vocabulary::new(3, 128)), 1).unwrap();
        assert!(matches!(enc.encode_layout(&Layout::default()), Err(Error::EncoderNotFrozen)));
    }

    #[test]
    fn feature_length_is_fixed_and_order_free() {
        let enc = toy_encoder();
        let one = Layout::new(vec![Element::new(1, 0.5, 0.5, 0.2, 0.1)]);
        let many = Layout::new((0..10).map(|i| Element::new(1 + (i % 3), 0.05 + 0.09 * i as f64, 0.5, 0.1, 0.1)).collect());
        assert_eq!(enc.encode_layout(&one).unwrap().dim(), 64);
        assert_eq!(enc.encode_layout(&many).unwrap().dim(), 64);
        let mut rev = many.clone();
        rev.elements.reverse();
        assert_eq!(enc.encode_layout(&many).unwrap(), enc.encode_layout(&rev).unwrap());
    }

    #[test]
    fn empty_layout_maps_to_learned_embedding() {
        let enc = toy_encoder();
        let f = enc.encode_layout(&Layout::default()).unwrap();
        let id = enc.store.id("layout.empty.table").unwrap();
        assert_eq!(f.0, enc.store.value(id).data());
    }

    #[test]
    fn checkpoint_keeps_frozen_stamp() {
        let enc = toy_encoder();
        let back = LayoutEncoder::from_checkpoint(&Checkpoint::from_bytes(&enc.checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.stamp().unwrap(), enc.stamp().unwrap());
    }

    #[test]
    fn mask_count_follows_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(choose_mask(10, 0.3, &mut rng).iter().filter(|&&m| m).count(), 3);
        assert_eq!(choose_mask(1, 0.3, &mut rng), vec![true]);
    }
}
