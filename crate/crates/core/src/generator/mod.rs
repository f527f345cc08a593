//! The retrieval-augmented layout generator.
//!
//! The image encoder gives `f_I` (`H′W′ × d`). Retrieved layout features are
//! projected to `f̃_L` (`K × d`) and cross-attended by the image features
//! (`f_C = CrossAttn(f_I, f̃_L)`), and the three are stacked into
//! `f_R = [f_I; f̃_L; f_C]` with `2H′W′ + K` rows. Constraint tokens, when
//! present, are encoded separately and appended. The decoder cross-attends
//! to that single memory sequence while predicting layout tokens.
//!
//! With retrieval off the memory is `f_I` alone, which gives the plain
//! autoregressive baseline.

pub mod decode;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ralf_numerics::checkpoint::Checkpoint;
use ralf_numerics::nn::{
    causal_mask, DecoderLayer, Embedding, Encoder, LayerCache, LayerNorm, Linear, MultiHeadAttention, TransformerConfig,
};
use ralf_numerics::{Graph, Mode, ParamStore, Scalar, Tensor, Var};

use crate::data::CategorySchema;
use crate::encoders::{EncoderConfig, ImageEncoder};
use crate::retrieval::RetrievalDatabase;
use crate::tasks::ConstraintVocab;
use crate::tokenizer::Vocabulary;
use crate::{Error, Result};

pub use decode::{generate, generate_from, refinement_window, retrieve_for, Restrictor, SamplingConfig};
pub use train::{
    canonicalize, teacher_forced, teacher_forced_accuracy, train, train_step, train_with_progress, Example, PreparedSample,
    TrainConfig, TrainReport, TrainingSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Saliency,
    Random,
    Off,
}

impl std::str::FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saliency" => Ok(RetrievalMode::Saliency),
            "random" => Ok(RetrievalMode::Random),
            "off" => Ok(RetrievalMode::Off),
            other => Err(Error::Config(format!("unknown retrieval mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Number of retrieved layouts.
    pub k: usize,
    pub max_elements: usize,
    pub vocab: Vocabulary,
    pub encoder: EncoderConfig,
    /// Length of the frozen layout encoder's features.
    pub feature_dim: usize,
    pub retrieval: RetrievalMode,
    /// Adds rank embeddings to the retrieved rows.
    pub retrieval_pos_emb: bool,
}

impl GeneratorConfig {
    pub fn full(vocab: Vocabulary) -> Self {
        Self {
            dim: 256,
            layers: 6,
            heads: 8,
            hidden: 1024,
            dropout: 0.1,
            k: 16,
            max_elements: 10,
            vocab,
            encoder: EncoderConfig::full(),
            feature_dim: 256,
            retrieval: RetrievalMode::Saliency,
            retrieval_pos_emb: false,
        }
    }

    pub fn toy(vocab: Vocabulary) -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            hidden: 256,
            dropout: 0.1,
            k: 4,
            max_elements: 10,
            vocab,
            encoder: EncoderConfig::toy(),
            feature_dim: 64,
            retrieval: RetrievalMode::Saliency,
            retrieval_pos_emb: false,
        }
    }

    pub fn preset(name: &str, vocab: Vocabulary) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(vocab)),
            "toy" => Ok(Self::toy(vocab)),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
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

    pub fn constraint_vocab(&self) -> ConstraintVocab {
        ConstraintVocab::new(self.vocab, self.max_elements)
    }

    /// `5·max_T + 2`.
    pub fn max_seq_len(&self) -> usize {
        Vocabulary::max_len(self.max_elements)
    }

    pub fn uses_retrieval(&self) -> bool {
        self.retrieval != RetrievalMode::Off
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer().validate()?;
        self.encoder.validate()?;
        if self.encoder.dim != self.dim {
            return Err(Error::Config(format!(
                "image encoder width {} differs from model width {}",
                self.encoder.dim, self.dim
            )));
        }
        if self.uses_retrieval() && self.k == 0 {
            return Err(Error::Config("retrieval needs k ≥ 1".into()));
        }
        if self.max_elements == 0 {
            return Err(Error::Config("max_elements must be positive".into()));
        }
        Ok(())
    }
}

const SEG_IMAGE: usize = 0;
const SEG_RETRIEVED: usize = 1;
const SEG_CROSS: usize = 2;
const SEG_CONSTRAINT: usize = 3;

#[derive(Clone, Debug)]
struct RetrievalFusion {
    proj: Linear,
    rank: Option<Embedding>,
    attn: MultiHeadAttention,
}

#[derive(Clone, Debug)]
struct ConstraintEncoder {
    token: Embedding,
    position: Embedding,
    encoder: Encoder,
}

/// Parameter handles of the whole generator.
#[derive(Clone, Debug)]
pub struct GeneratorNet {
    pub cfg: GeneratorConfig,
    image: ImageEncoder,
    retrieval: Option<RetrievalFusion>,
    segments: Embedding,
    constraint: ConstraintEncoder,
    token: Embedding,
    position: Embedding,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    head: Linear,
}

/// Row order that sorts the retrieved features lexicographically, so the
/// attention below sees the same key order for any input permutation.
fn canonical_order<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..t.rows()).collect();
    order.sort_by(|&a, &b| {
        t.row(a)
            .iter()
            .zip(t.row(b))
            .map(|(x, y)| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

impl GeneratorNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let tc = cfg.transformer();
        let cv = cfg.constraint_vocab();
        let retrieval = if cfg.uses_retrieval() {
            Some(RetrievalFusion {
                proj: Linear::new(store, "retrieval.proj", cfg.feature_dim, d, rng)?,
                rank: if cfg.retrieval_pos_emb {
                    Some(Embedding::new(store, "retrieval.rank", cfg.k, d, rng)?)
                } else {
                    None
                },
                attn: MultiHeadAttention::new(store, "retrieval.cross_attn", d, cfg.heads, rng)?,
            })
        } else {
            None
        };
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(store, &format!("decoder.layers.{i}"), &tc, rng))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            image: ImageEncoder::new(store, "image", cfg.encoder, rng)?,
            retrieval,
            segments: Embedding::new(store, "segments", 4, d, rng)?,
            constraint: ConstraintEncoder {
                token: Embedding::new(store, "constraint.token", cv.size(), d, rng)?,
                position: Embedding::new(store, "constraint.position", cv.max_len(), d, rng)?,
                encoder: Encoder::new(store, "constraint.encoder", &tc, rng)?,
            },
            token: Embedding::new(store, "decoder.token", cfg.vocab.size(), d, rng)?,
            position: Embedding::new(store, "decoder.position", cfg.max_seq_len(), d, rng)?,
            layers,
            norm: LayerNorm::new(store, "decoder.norm", d)?,
            head: Linear::new(store, "decoder.head", d, cfg.vocab.size(), rng)?,
            cfg,
        })
    }

    pub fn encode_image<T: Scalar>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        self.image.forward(g, patches)
    }

    /// `[f_I; f̃_L; f_C]` from image features and the `K × d_F` retrieved
    /// layout features.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, f_i: Var, retrieved: Var) -> Result<Var> {
        let fusion = self
            .retrieval
            .as_ref()
            .ok_or_else(|| Error::Config("retrieval is disabled for this model".into()))?;
        let shape = g.value(retrieved).shape().to_vec();
        if shape != [self.cfg.k, self.cfg.feature_dim] {
            return Err(Error::Config(format!(
                "expected {}x{} retrieved features, got {shape:?}",
                self.cfg.k, self.cfg.feature_dim
            )));
        }
        let order = canonical_order(g.value(retrieved));
        let mut f_l = fusion.proj.forward(g, retrieved)?;
        if let Some(rank) = &fusion.rank {
            let ids: Vec<usize> = (0..self.cfg.k).collect();
            let r = rank.forward(g, &ids)?;
            f_l = g.add(f_l, r)?;
        }
        let keys = g.gather_rows(f_l, &order)?;
        let f_c = fusion.attn.forward(g, f_i, keys, None)?;
        Ok(g.concat_rows(&[f_i, f_l, f_c])?)
    }

    /// Encoded constraint tokens, `None` when there are none.
    pub fn encode_constraint<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: &[u32]) -> Result<Option<Var>> {
        if tokens.is_empty() {
            return Ok(None);
        }
        let cv = self.cfg.constraint_vocab();
        if tokens.len() > cv.max_len() {
            return Err(Error::Config(format!("{} constraint tokens exceed {}", tokens.len(), cv.max_len())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cv.size()) {
            return Err(Error::Config(format!("constraint token {bad} outside vocabulary")));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..ids.len()).collect();
        let c = &self.constraint;
        let x = c.token.forward(g, &ids)?;
        let p = c.position.forward(g, &pos)?;
        let x = g.add(x, p)?;
        let x = g.dropout(x, self.cfg.dropout)?;
        Ok(Some(c.encoder.forward(g, x)?))
    }

    /// The decoder memory: fused features (or `f_I` alone without
    /// retrieval) with segment embeddings, then the constraint features.
    pub fn memory<T: Scalar>(&self, g: &mut Graph<'_, T>, patches: Var, retrieved: Option<Var>, constraint: &[u32]) -> Result<Var> {
        let f_i = self.encode_image(g, patches)?;
        let hw = g.value(f_i).rows();
        let (fused, mut seg) = match (&self.retrieval, retrieved) {
            (Some(_), Some(r)) => {
                let fused = self.fuse(g, f_i, r)?;
                let mut seg = vec![SEG_IMAGE; hw];
                seg.extend(std::iter::repeat_n(SEG_RETRIEVED, self.cfg.k));
                seg.extend(std::iter::repeat_n(SEG_CROSS, hw));
                (fused, seg)
            }
            (None, None) => (f_i, vec![SEG_IMAGE; hw]),
            (Some(_), None) => return Err(Error::Config("model expects retrieved features".into())),
            (None, Some(_)) => return Err(Error::Config("model was built without retrieval".into())),
        };
        let c = self.encode_constraint(g, constraint)?;
        let mut parts = vec![fused];
        if let Some(c) = c {
            parts.push(c);
            seg.extend(std::iter::repeat_n(SEG_CONSTRAINT, constraint.len()));
        }
        let mem = if parts.len() == 1 { fused } else { g.concat_rows(&parts)? };
        let s = self.segments.forward(g, &seg)?;
        Ok(g.add(mem, s)?)
    }

    /// Next-token logits for every position of `inputs`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, memory: Var, inputs: &[u32]) -> Result<Var> {
        let len = inputs.len();
        if len == 0 || len >= self.cfg.max_seq_len() + 1 {
            return Err(Error::Config(format!("decoder input of length {len}")));
        }
        let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..len).collect();
        let x = self.token.forward(g, &ids)?;
        let p = self.position.forward(g, &pos)?;
        let mut x = g.add(x, p)?;
        x = g.dropout(x, self.cfg.dropout)?;
        let mask = g.constant(causal_mask(len));
        for layer in &self.layers {
            x = layer.forward(g, x, memory, mask)?;
        }
        let x = self.norm.forward(g, x)?;
        Ok(self.head.forward(g, x)?)
    }

    /// Mean next-token cross-entropy over the `5T+1` predicted positions.
    /// Returns the loss and the logits.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        patches: Var,
        retrieved: Option<Var>,
        constraint: &[u32],
        tokens: &[u32],
    ) -> Result<(Var, Var)> {
        if tokens.len() > self.cfg.max_seq_len() {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds maximum {}",
                tokens.len(),
                self.cfg.max_seq_len()
            )));
        }
        if tokens.len() < 2 {
            return Err(Error::Config("sequence needs bos and eos".into()));
        }
        let memory = self.memory(g, patches, retrieved, constraint)?;
        let logits = self.decode(g, memory, &tokens[..tokens.len() - 1])?;
        let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
        let loss = g.cross_entropy(logits, &targets)?;
        Ok((loss, logits))
    }

    /// Per-layer caches with the memory projected once.
    pub fn prepare_caches<T: Scalar>(&self, store: &ParamStore<T>, memory: &Tensor<T>) -> Vec<LayerCache<T>> {
        self.layers.iter().map(|l| l.prepare_cache(store, memory)).collect()
    }

    /// Logits after feeding `token` at position `pos`, extending `caches`.
    pub fn step_logits<T: Scalar>(&self, store: &ParamStore<T>, token: u32, pos: usize, caches: &mut [LayerCache<T>]) -> Vec<T> {
        let tok = self.token.row(store, token as usize);
        let pe = self.position.row(store, pos);
        let mut x: Vec<T> = tok.iter().zip(pe).map(|(&a, &b)| a + b).collect();
        for (layer, cache) in self.layers.iter().zip(caches) {
            x = layer.step(store, &x, cache);
        }
        let h = self.norm.apply(store, &x, 1);
        self.head.apply(store, &h, 1)
    }
}

/// Generator weights with the schema and the layout-encoder stamp they were
/// trained against.
pub struct RalfModel {
    pub net: GeneratorNet,
    pub store: ParamStore<f32>,
    pub schema: CategorySchema,
    pub encoder_stamp: Option<String>,
}

impl RalfModel {
    pub fn new(cfg: GeneratorConfig, schema: CategorySchema, seed: u64) -> Result<Self> {
        if cfg.vocab.num_categories != schema.num_categories() {
            return Err(Error::Config(format!(
                "vocabulary has {} categories, schema {}",
                cfg.vocab.num_categories,
                schema.num_categories()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = GeneratorNet::new(&mut store, cfg, &mut rng)?;
        Ok(Self {
            net,
            store,
            schema,
            encoder_stamp: None,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.net.cfg
    }

    /// `K × d_F` feature matrix of the given database entries.
    pub fn retrieved_features(&self, db: &RetrievalDatabase, indices: &[usize]) -> Result<Tensor<f32>> {
        let d = self.config().feature_dim;
        if db.feature_dim != d {
            return Err(Error::Config(format!("database features have length {}, model expects {d}", db.feature_dim)));
        }
        let data = indices
            .iter()
            .flat_map(|&i| db.entries[i].layout_feature.0.iter().copied())
            .collect();
        Ok(Tensor::matrix(indices.len(), d, data)?)
    }

    /// Fails unless `db` was built with the encoder this model trained with.
    pub fn check_database(&self, db: &RetrievalDatabase) -> Result<()> {
        match &self.encoder_stamp {
            Some(s) if *s != db.stamp => Err(Error::StampMismatch {
                expected: s.clone(),
                found: db.stamp.clone(),
            }),
            _ => Ok(()),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let config = serde_json::json!({
            "kind": "generator",
            "config": self.net.cfg,
            "schema": self.schema,
            "encoder_stamp": self.encoder_stamp,
        });
        Checkpoint::from_store(&self.store, config, false)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config["kind"] != "generator" {
            return Err(Error::Config("checkpoint does not hold a generator".into()));
        }
        let cfg: GeneratorConfig = serde_json::from_value(ck.config["config"].clone())?;
        let schema: CategorySchema = serde_json::from_value(ck.config["schema"].clone())?;
        let mut m = Self::new(cfg, schema, 0)?;
        ck.restore_into(&mut m.store)?;
        m.encoder_stamp = serde_json::from_value(ck.config["encoder_stamp"].clone())?;
        Ok(m)
    }

    /// Memory tensor for inference (dropout off).
    pub fn memory_tensor(&self, patches: &Tensor<f32>, retrieved: Option<&Tensor<f32>>, constraint: &[u32]) -> Result<Tensor<f32>> {
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let p = g.constant(patches.clone());
        let r = retrieved.map(|r| g.constant(r.clone()));
        let m = self.net.memory(&mut g, p, r, constraint)?;
        Ok(g.value(m).clone())
    }
}
