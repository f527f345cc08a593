//! Autoregressive sampling with grammar masking and decoding-space
//! restriction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use ralf_numerics::{topk_sample, Tensor};

use super::train::canonicalize;
use super::{RalfModel, RetrievalMode};
use crate::data::{Canvas, Layout, SaliencyMap};
use crate::encoders::patchify;
use crate::retrieval::RetrievalDatabase;
use crate::tasks::{
    flat_relations, relation_feasible, serialize_constraints, BinRange, BoxRange, ConstraintSpec, Relation,
    TaskKind,
};
use crate::tokenizer::{detokenize, quantize, quantize_box, Slot, Vocabulary, BOS, EOS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top_k: usize,
    pub temperature: f32,
    /// Restarts allowed when relationship pruning reaches a dead end.
    pub max_attempts: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            temperature: 1.0,
            max_attempts: 16,
        }
    }
}

/// Refinement window half-width `⌈0.05·B⌉`.
pub fn refinement_window(bins: usize) -> usize {
    (bins * 5).div_ceil(100)
}

/// Precomputed token restrictions for one constraint spec.
#[derive(Clone, Debug)]
pub struct Restrictor {
    vocab: Vocabulary,
    max_elements: usize,
    kind: TaskKind,
    categories: Option<Vec<u32>>,
    sizes: Option<Vec<[usize; 2]>>,
    prefix: Vec<u32>,
    noisy: Option<Vec<[usize; 4]>>,
    window: usize,
    relations: Vec<(usize, Relation, usize)>,
}

impl Restrictor {
    pub fn new(spec: &ConstraintSpec, vocab: Vocabulary, max_elements: usize) -> Result<Self> {
        spec.validate(&vocab, max_elements)?;
        let bins = vocab.bins;
        let sizes = match (&spec.kind, &spec.sizes) {
            (TaskKind::CStoP, Some(s)) => Some(
                s.iter()
                    .map(|&(w, h)| Ok([quantize(w, bins)?, quantize(h, bins)?]))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let mut prefix = Vec::new();
        if let (TaskKind::Completion, Some(p)) = (&spec.kind, &spec.partial) {
            for e in &p.elements {
                prefix.push(vocab.category_token(e.category));
                for q in quantize_box(&e.bbox, bins)? {
                    prefix.push(vocab.geometry_token(q));
                }
            }
        }
        let noisy = match (&spec.kind, &spec.noisy) {
            (TaskKind::Refinement, Some(n)) => Some(
                n.elements
                    .iter()
                    .map(|e| Ok(quantize_box(&e.bbox, bins)?))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let categories = match spec.kind {
            TaskKind::Refinement => spec.noisy.as_ref().map(Layout::categories),
            TaskKind::CtoSP | TaskKind::CStoP | TaskKind::Relationship => spec.categories.clone(),
            _ => None,
        };
        Ok(Self {
            vocab,
            max_elements,
            kind: spec.kind,
            categories,
            sizes,
            prefix,
            noisy,
            window: refinement_window(bins),
            relations: if spec.kind == TaskKind::Relationship { flat_relations(spec) } else { Vec::new() },
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    /// Elements before `e` sharing a relation with it, in increasing order.
    pub fn related_before(&self, e: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .relations
            .iter()
            .filter_map(|&(i, _, j)| match (i == e, j == e) {
                (true, _) if j < e => Some(j),
                (_, true) if i < e => Some(i),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn empty(&self, step: usize, what: String) -> Error {
        Error::EmptyDecodingSpace {
            step,
            constraint: format!("{}: {what}", self.kind),
        }
    }

    /// Tokens allowed at the next position given the sequence so far
    /// (which starts with `bos`), in increasing order.
    pub fn allowed(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        let pos = tokens.len();
        if pos == 0 {
            return Ok(vec![BOS]);
        }
        let e = (pos - 1) / 5;
        let slot = Slot::at(pos);
        let bins = self.vocab.bins;
        let geometry = |lo: usize, hi: usize| -> Vec<u32> { (lo..=hi).map(|b| self.vocab.geometry_token(b)).collect() };

        if let Some(&t) = self.prefix.get(pos - 1) {
            return Ok(vec![t]);
        }
        let out = match slot {
            Slot::Category => {
                if let Some(cats) = &self.categories {
                    match cats.get(e) {
                        Some(&c) => vec![self.vocab.category_token(c)],
                        None => vec![EOS],
                    }
                } else if e >= self.max_elements {
                    vec![EOS]
                } else {
                    let mut v: Vec<u32> = self.vocab.category_range().map(|t| t as u32).collect();
                    // At least one element, and never stop inside a forced prefix.
                    if e >= 1 && pos > self.prefix.len() {
                        v.insert(0, EOS);
                    }
                    v
                }
            }
            geo => {
                let c = geo.coord().expect("geometry slot");
                if let (Some(sizes), true) = (&self.sizes, c >= 2) {
                    vec![self.vocab.geometry_token(sizes[e][c - 2])]
                } else if let Some(noisy) = &self.noisy {
                    let q = noisy[e][c];
                    geometry(q.saturating_sub(self.window), (q + self.window).min(bins - 1))
                } else if !self.relations.is_empty() {
                    self.prune_relations(tokens, e, c)
                } else {
                    geometry(0, bins - 1)
                }
            }
        };
        if out.is_empty() {
            return Err(self.empty(pos, format!("no feasible token for element {e} slot {slot:?}")));
        }
        Ok(out)
    }

    /// Geometry tokens for coordinate `c` of element `e` such that the
    /// relations involving `e` can still hold together.
    ///
    /// With earlier elements fixed, the constraints on `e` split into a
    /// horizontal part on `(x, w)`, a vertical part on `(y, h)` and a size
    /// part on `(w, h)`. Tabulating each part over bin pairs makes the joint
    /// check exact against placed elements; later elements stay free, so
    /// relations with them are only checked one at a time.
    fn prune_relations(&self, tokens: &[u32], e: usize, c: usize) -> Vec<u32> {
        let bins = self.vocab.bins;
        let n = self.categories.as_ref().map_or(0, Vec::len);
        let mut ranges: Vec<BoxRange> = vec![[BinRange::free(bins); 4]; n.max(e + 1)];
        for (k, &t) in tokens.iter().enumerate().skip(1) {
            if let Some(ci) = Slot::at(k).coord() {
                let g = t as usize - self.vocab.geometry_range().start;
                ranges[(k - 1) / 5][ci] = BinRange::fixed(g);
            }
        }
        let rels: Vec<(usize, Relation, usize)> =
            self.relations.iter().copied().filter(|&(i, _, j)| i == e || j == e).collect();
        // Coordinates before `c` are decided; the rest range over all bins.
        let dom: Vec<Vec<usize>> = (0..4)
            .map(|k| if k < c { vec![ranges[e][k].lo as usize] } else { (0..bins).collect() })
            .collect();
        let free = BinRange::free(bins);
        let mut table = |a: usize, b: usize| {
            let mut t = vec![false; bins * bins];
            for &u in &dom[a] {
                for &v in &dom[b] {
                    let mut bx = [free; 4];
                    bx[a] = BinRange::fixed(u);
                    bx[b] = BinRange::fixed(v);
                    ranges[e] = bx;
                    t[u * bins + v] = rels.iter().all(|&(i, rel, j)| relation_feasible(rel, &ranges[i], &ranges[j]));
                }
            }
            t
        };
        let (horiz, vert, size) = (table(0, 2), table(1, 3), table(2, 3));
        let at = |t: &[bool], u: usize, v: usize| t[u * bins + v];
        let wx: Vec<bool> = (0..bins).map(|w| (0..bins).any(|x| at(&horiz, x, w))).collect();
        let hy: Vec<bool> = (0..bins).map(|h| (0..bins).any(|y| at(&vert, y, h))).collect();
        let feasible: Vec<bool> = match c {
            0 => {
                let sw: Vec<bool> = (0..bins).map(|w| (0..bins).any(|h| hy[h] && at(&size, w, h))).collect();
                (0..bins).map(|x| (0..bins).any(|w| at(&horiz, x, w) && sw[w])).collect()
            }
            1 => {
                let sh: Vec<bool> = (0..bins).map(|h| (0..bins).any(|w| wx[w] && at(&size, w, h))).collect();
                (0..bins).map(|y| (0..bins).any(|h| at(&vert, y, h) && sh[h])).collect()
            }
            2 => (0..bins).map(|w| wx[w] && (0..bins).any(|h| hy[h] && at(&size, w, h))).collect(),
            _ => (0..bins).map(|h| hy[h] && (0..bins).any(|w| wx[w] && at(&size, w, h))).collect(),
        };
        (0..bins).filter(|&b| feasible[b]).map(|b| self.vocab.geometry_token(b)).collect()
    }
}

impl Restrictor {
    /// Sets every disallowed logit to `-inf`.
    pub fn restrict_logits(&self, tokens: &[u32], logits: &mut [f32]) -> Result<()> {
        let allowed = self.allowed(tokens)?;
        let mut keep = vec![false; logits.len()];
        for &t in &allowed {
            if let Some(k) = keep.get_mut(t as usize) {
                *k = true;
            }
        }
        for (l, k) in logits.iter_mut().zip(keep) {
            if !k {
                *l = f32::NEG_INFINITY;
            }
        }
        Ok(())
    }
}

/// Retrieved feature matrix for a canvas, rows in canonical order; `None`
/// when the model does not use retrieval.
pub fn retrieve_for(
    model: &RalfModel,
    db: Option<&RetrievalDatabase>,
    saliency: &SaliencyMap,
    exclude_id: Option<&str>,
    rng: &mut impl Rng,
) -> Result<Option<Tensor<f32>>> {
    let cfg = model.config();
    if cfg.retrieval == RetrievalMode::Off {
        return Ok(None);
    }
    let db = db.ok_or_else(|| Error::Config("retrieval needs a database".into()))?;
    model.check_database(db)?;
    let idx = match cfg.retrieval {
        RetrievalMode::Random => db.random_retrieve(cfg.k, exclude_id, rng)?,
        _ => db.retrieve(saliency, cfg.k, exclude_id, rng)?,
    };
    Ok(Some(canonicalize(&model.retrieved_features(db, &idx)?)?))
}

/// Rewinds allowed per attempt when relationship pruning hits a dead end.
const MAX_BACKJUMPS: usize = 64;

/// Samples one token sequence.
///
/// Under relationship constraints a dead end at element `e` means the
/// placed elements leave no room for it. The sampler then rewinds to the
/// geometry of a random earlier element related to `e` and resamples from
/// there, up to [`MAX_BACKJUMPS`] times.
fn sample_once(
    model: &RalfModel,
    memory: &Tensor<f32>,
    restrictor: &Restrictor,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<Vec<u32>> {
    let net = &model.net;
    let max_len = net.cfg.max_seq_len();
    let mut caches = net.prepare_caches(&model.store, memory);
    let mut tokens = vec![BOS];
    let mut jumps = 0;
    while tokens.len() < max_len {
        let pos = tokens.len() - 1;
        let mut logits = net.step_logits(&model.store, tokens[pos], pos, &mut caches);
        match restrictor.restrict_logits(&tokens, &mut logits) {
            Err(Error::EmptyDecodingSpace { .. })
                if restrictor.kind() == TaskKind::Relationship && jumps < MAX_BACKJUMPS && tokens.len() > 1 =>
            {
                jumps += 1;
                let e = (tokens.len() - 1) / 5;
                let related = restrictor.related_before(e);
                let k = if related.is_empty() { e.saturating_sub(1) } else { related[rng.random_range(0..related.len())] };
                // Keep BOS and everything up to element k's category token.
                let keep = 5 * k + 2;
                tokens.truncate(keep);
                for c in &mut caches {
                    c.truncate(keep - 1);
                }
                continue;
            }
            r => r?,
        }
        let next = topk_sample(&logits, sampling.top_k, sampling.temperature, rng).map_err(|e| match e {
            ralf_numerics::Error::EmptyDecodingSpace => restrictor.empty(tokens.len(), "all logits masked".into()),
            other => other.into(),
        })? as u32;
        tokens.push(next);
        if next == EOS {
            return Ok(tokens);
        }
    }
    Err(restrictor.empty(tokens.len(), "maximum length reached without eos".into()))
}

/// Generates a layout from precomputed patches and retrieved features.
pub fn generate_from(
    model: &RalfModel,
    patches: &Tensor<f32>,
    retrieved: Option<&Tensor<f32>>,
    spec: &ConstraintSpec,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<Layout> {
    let cfg = model.config();
    let restrictor = Restrictor::new(spec, cfg.vocab, cfg.max_elements)?;
    let constraint = serialize_constraints(spec, &cfg.constraint_vocab())?;
    let memory = model.memory_tensor(patches, retrieved, &constraint)?;
    let attempts = if spec.kind == TaskKind::Relationship { sampling.max_attempts.max(1) } else { 1 };
    let mut last = None;
    for attempt in 0..attempts {
        match sample_once(model, &memory, &restrictor, sampling, rng) {
            Ok(tokens) => return Ok(detokenize(&tokens, &cfg.vocab)?),
            Err(e @ Error::EmptyDecodingSpace { .. }) => {
                log::debug!("decoding attempt {attempt} hit a dead end: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Retrieves for the canvas, then samples a layout satisfying `spec`.
pub fn generate(
    model: &RalfModel,
    canvas: &Canvas,
    saliency: &SaliencyMap,
    db: Option<&RetrievalDatabase>,
    spec: &ConstraintSpec,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<Layout> {
    let patches = patchify(canvas, saliency, &model.config().encoder)?;
    let retrieved = retrieve_for(model, db, saliency, None, rng)?;
    generate_from(model, &patches, retrieved.as_ref(), spec, sampling, rng)
}
