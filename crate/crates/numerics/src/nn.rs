//! Transformer building blocks expressed over the tape primitives.
//!
//! Every block stores only [`ParamId`]s; values live in a [`ParamStore`].
//! Blocks are pre-norm: `x + sublayer(norm(x))`.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::kernels;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Standard deviation used for weight initialization.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
/// Additive mask value for disallowed attention positions. Large and finite
/// so every tensor stays finite.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_normal(format!("{name}.weight"), &[in_dim, out_dim], INIT_STD, rng)?;
        let bias = store.add_constant(format!("{name}.bias"), &[1, out_dim], 0.0)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Graph-free application to an `r×in` matrix given as a slice.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let mut out = vec![T::zero(); rows * self.out_dim];
        kernels::matmul_slices(
            x,
            rows,
            self.in_dim,
            store.value(self.weight).data(),
            self.out_dim,
            false,
            &mut out,
        );
        let b = store.value(self.bias).data();
        for r in 0..rows {
            for (o, &bv) in out[r * self.out_dim..(r + 1) * self.out_dim].iter_mut().zip(b) {
                *o += bv;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_constant(format!("{name}.gamma"), &[1, dim], 1.0)?,
            beta: store.add_constant(format!("{name}.beta"), &[1, dim], 0.0)?,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let t = Tensor::matrix(rows, self.dim, x.to_vec()).expect("rows × dim");
        kernels::layer_norm(
            &t,
            store.value(self.gamma).data(),
            store.value(self.beta).data(),
            T::of(LN_EPS),
        )
        .expect("matching dims")
        .y
        .into_data()
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        count: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            table: store.add_normal(format!("{name}.table"), &[count, dim], INIT_STD, rng)?,
            count,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }

    pub fn row<'a, T: Scalar>(&self, store: &'a ParamStore<T>, id: usize) -> &'a [T] {
        store.value(self.table).row(id)
    }
}

/// Hyperparameters shared by the encoder and decoder stacks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention with separate query and memory
/// inputs. Self-attention passes the same node for both.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `mask`, when given, is an additive `Lq×Lk` constant.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        memory: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let scores = g.matmul_t(qh, false, kh, true)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let weights = g.softmax(scores)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.out.forward(g, merged)
    }

    /// Attention for `rows` query rows (already projected) over cached,
    /// already projected keys and values of `len` rows. Returns the output
    /// after the final projection.
    pub fn attend_projected<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        q: &[T],
        rows: usize,
        keys: &[T],
        values: &[T],
        len: usize,
    ) -> Vec<T> {
        let hd = self.head_dim();
        let d = self.dim;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut merged = vec![T::zero(); rows * d];
        let mut scores = vec![T::zero(); len];
        for r in 0..rows {
            let qr = &q[r * d..(r + 1) * d];
            for h in 0..self.heads {
                let qh = &qr[h * hd..(h + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                    let dot: T = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum();
                    *s = dot * scale;
                }
                kernels::softmax_in_place(&mut scores);
                let o = &mut merged[r * d + h * hd..r * d + (h + 1) * hd];
                for (j, &w) in scores.iter().enumerate() {
                    let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
                    for (ov, &vv) in o.iter_mut().zip(vh) {
                        *ov += w * vv;
                    }
                }
            }
        }
        self.out.apply(store, &merged, rows)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        let h = g.dropout(h, dropout)?;
        self.down.forward(g, h)
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let mut h = self.up.apply(store, x, rows);
        h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        self.down.apply(store, &h, rows)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &TransformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.dim, cfg.hidden, rng)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = self.attn.forward(g, h, h, mask)?;
        let h = g.dropout(h, self.dropout)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.ffn.forward(g, h, self.dropout)?;
        let h = g.dropout(h, self.dropout)?;
        g.add(x, h)
    }
}

/// A stack of encoder layers followed by a final norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &TransformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layers.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x, None)?;
        }
        self.norm.forward(g, x)
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention to a
/// memory sequence, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

/// Per-layer key/value cache for incremental decoding.
#[derive(Clone, Debug, Default)]
pub struct LayerCache<T> {
    self_keys: Vec<T>,
    self_values: Vec<T>,
    memory_keys: Vec<T>,
    memory_values: Vec<T>,
    memory_len: usize,
}

impl<T> LayerCache<T> {
    pub fn len(&self) -> usize {
        self.self_keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.self_keys.is_empty()
    }

    /// Forgets every decoded position from `steps` on.
    pub fn truncate(&mut self, steps: usize) {
        let d = self.memory_keys.len() / self.memory_len.max(1);
        self.self_keys.truncate(steps * d);
        self.self_values.truncate(steps * d);
    }
}

impl DecoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &TransformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg.dim, cfg.heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), cfg.dim, cfg.heads, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), cfg.dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.dim, cfg.hidden, rng)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        memory: Var,
        causal: Var,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = self.self_attn.forward(g, h, h, Some(causal))?;
        let h = g.dropout(h, self.dropout)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.cross_attn.forward(g, h, memory, None)?;
        let h = g.dropout(h, self.dropout)?;
        let x = g.add(x, h)?;
        let h = self.norm3.forward(g, x)?;
        let h = self.ffn.forward(g, h, self.dropout)?;
        let h = g.dropout(h, self.dropout)?;
        g.add(x, h)
    }

    /// Projects the memory once so each decoding step only attends.
    pub fn prepare_cache<T: Scalar>(&self, store: &ParamStore<T>, memory: &Tensor<T>) -> LayerCache<T> {
        let rows = memory.rows();
        LayerCache {
            self_keys: Vec::new(),
            self_values: Vec::new(),
            memory_keys: self.cross_attn.key.apply(store, memory.data(), rows),
            memory_values: self.cross_attn.value.apply(store, memory.data(), rows),
            memory_len: rows,
        }
    }

    /// Processes one new position given the cache of all earlier ones.
    pub fn step<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], cache: &mut LayerCache<T>) -> Vec<T> {
        let d = x.len();
        let h = self.norm1.apply(store, x, 1);
        let q = self.self_attn.query.apply(store, &h, 1);
        cache.self_keys.extend(self.self_attn.key.apply(store, &h, 1));
        cache.self_values.extend(self.self_attn.value.apply(store, &h, 1));
        let len = cache.self_keys.len() / d;
        let a = self
            .self_attn
            .attend_projected(store, &q, 1, &cache.self_keys, &cache.self_values, len);
        let x1: Vec<T> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();

        let h = self.norm2.apply(store, &x1, 1);
        let q = self.cross_attn.query.apply(store, &h, 1);
        let a = self.cross_attn.attend_projected(
            store,
            &q,
            1,
            &cache.memory_keys,
            &cache.memory_values,
            cache.memory_len,
        );
        let x2: Vec<T> = x1.iter().zip(&a).map(|(&u, &v)| u + v).collect();

        let h = self.norm3.apply(store, &x2, 1);
        let f = self.ffn.apply(store, &h, 1);
        x2.iter().zip(&f).map(|(&u, &v)| u + v).collect()
    }
}

/// Additive causal mask: row `i` may attend to columns `0..=i`.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, len], |idx| {
        let (r, c) = (idx / len, idx % len);
        if c <= r {
            T::zero()
        } else {
            T::of(MASK_NEG)
        }
    })
}
