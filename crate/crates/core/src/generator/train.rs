//! Teacher-forced training with leave-one-out retrieval.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ralf_numerics::optim::{clip_grad_norm, AdamW, StepSchedule};
use ralf_numerics::{Graph, Mode, Tensor};

use super::{canonical_order, RalfModel, RetrievalMode};
use crate::data::{AnnotatedSample, Layout};
use crate::encoders::patchify;
use crate::retrieval::{embed_saliency, EmbeddingKind, RetrievalDatabase};
use crate::tasks::{build_spec, serialize_constraints, TaskKind};
use crate::tokenizer::tokenize_layout;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Fraction of steps after which the learning rate drops tenfold.
    pub lr_drop_fraction: f64,
    pub seed: u64,
    /// Each training example draws its task uniformly from this list.
    pub tasks: Vec<TaskKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            lr_drop_fraction: 0.7,
            seed: 0,
            tasks: vec![TaskKind::Unconstrained],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr and grad_clip must be positive, weight decay non-negative".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one training task is required".into()));
        }
        Ok(())
    }
}

/// A training sample with everything that does not change between steps.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub layout: Layout,
    pub tokens: Vec<u32>,
    pub patches: Tensor<f32>,
    /// Saliency neighbors in the database, own entry excluded.
    pub neighbors: Vec<usize>,
}

/// One fully specified training example.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub patches: &'a Tensor<f32>,
    pub retrieved: Option<Tensor<f32>>,
    pub constraint: Vec<u32>,
    pub tokens: &'a [u32],
}

pub struct TrainingSet<'d> {
    pub samples: Vec<PreparedSample>,
    pub db: Option<&'d RetrievalDatabase>,
}

impl<'d> TrainingSet<'d> {
    /// Tokenizes, patchifies and, for saliency retrieval, looks up the
    /// `K` nearest database entries of every sample with its own id
    /// excluded.
    pub fn prepare(model: &RalfModel, samples: &[AnnotatedSample], db: Option<&'d RetrievalDatabase>) -> Result<Self> {
        let cfg = model.config();
        let db = match (cfg.retrieval, db) {
            (RetrievalMode::Off, _) => None,
            (_, None) => return Err(Error::Config("retrieval needs a database".into())),
            (mode, Some(db)) => {
                model.check_database(db)?;
                if mode == RetrievalMode::Saliency && db.kind != EmbeddingKind::Saliency {
                    return Err(Error::Config("saliency retrieval needs a saliency-embedded database".into()));
                }
                if db.len() <= cfg.k {
                    return Err(Error::DatabaseTooSmall {
                        needed: cfg.k + 1,
                        available: db.len(),
                    });
                }
                Some(db)
            }
        };
        let grid = db.map(|d| (d.embedding_dim as f64).sqrt().round() as usize);
        let prepared = samples
            .iter()
            .map(|s| {
                if s.layout.len() > cfg.max_elements {
                    return Err(Error::Config(format!(
                        "sample {} has {} elements, model allows {}",
                        s.id,
                        s.layout.len(),
                        cfg.max_elements
                    )));
                }
                let neighbors = match (cfg.retrieval, db) {
                    (RetrievalMode::Saliency, Some(db)) => {
                        let q = embed_saliency(&s.saliency, grid.unwrap_or(1));
                        db.query_knn(&q, cfg.k, Some(&s.id))?.into_iter().map(|n| n.index).collect()
                    }
                    _ => Vec::new(),
                };
                Ok(PreparedSample {
                    id: s.id.clone(),
                    layout: s.layout.clone(),
                    tokens: tokenize_layout(&s.layout, &cfg.vocab)?,
                    patches: patchify(&s.canvas, &s.saliency, &cfg.encoder)?,
                    neighbors,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples: prepared, db })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Builds the example for sample `i`, drawing random neighbors and the
    /// task from `rng` as needed.
    pub fn example(&self, model: &RalfModel, i: usize, tasks: &[TaskKind], rng: &mut impl Rng) -> Result<Example<'_>> {
        let cfg = model.config();
        let s = &self.samples[i];
        let retrieved = match (cfg.retrieval, self.db) {
            (RetrievalMode::Off, _) | (_, None) => None,
            (RetrievalMode::Saliency, Some(db)) => Some(model.retrieved_features(db, &s.neighbors)?),
            (RetrievalMode::Random, Some(db)) => {
                let idx = db.random_retrieve(cfg.k, Some(&s.id), rng)?;
                Some(model.retrieved_features(db, &idx)?)
            }
        };
        let kind = *tasks.choose(rng).ok_or_else(|| Error::Config("no training tasks".into()))?;
        let spec = build_spec(kind, &s.layout, rng)?;
        let constraint = serialize_constraints(&spec, &cfg.constraint_vocab())?;
        Ok(Example {
            patches: &s.patches,
            retrieved,
            constraint,
            tokens: &s.tokens,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Gradient norm before clipping, per step.
    pub grad_norms: Vec<f64>,
}

/// Loss of one example and its gradients accumulated into the store with
/// weight `scale`.
fn accumulate(model: &mut RalfModel, ex: &Example<'_>, scale: f32, seed: u64) -> Result<f64> {
    let grads = {
        let mut g = Graph::new(&model.store, Mode::Train, seed);
        let p = g.constant(ex.patches.clone());
        let r = ex.retrieved.clone().map(|r| g.constant(r));
        let (loss, _) = model.net.loss(&mut g, p, r, &ex.constraint, ex.tokens)?;
        let value = g.value(loss).data()[0] as f64;
        (g.backward(loss)?, value)
    };
    model.store.accumulate(&grads.0, scale);
    Ok(grads.1)
}

/// One optimizer step over `batch`: mean loss, clip, AdamW at `lr`.
pub fn train_step(model: &mut RalfModel, batch: &[Example<'_>], optimizer: &AdamW, clip: f64, lr: f64, seed: u64) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    model.store.zero_grad();
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        total += accumulate(model, ex, scale, seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64))?;
    }
    let norm = clip_grad_norm(&mut model.store, clip);
    optimizer.step_with_lr(&mut model.store, lr)?;
    Ok((total / batch.len() as f64, norm))
}

/// Trains for `cfg.steps` steps, sampling batches without replacement
/// within each epoch.
pub fn train(model: &mut RalfModel, set: &TrainingSet<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_progress(model, set, cfg, |_, _| {})
}

pub fn train_with_progress(
    model: &mut RalfModel,
    set: &TrainingSet<'_>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let optimizer = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let schedule = StepSchedule {
        drop_fraction: cfg.lr_drop_fraction,
        ..StepSchedule::new(cfg.lr, cfg.steps)
    };
    let mut order: Vec<usize> = Vec::new();
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(set.len()) {
            if order.is_empty() {
                order = (0..set.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let batch = idx
            .iter()
            .map(|&i| set.example(model, i, &cfg.tasks, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let seed = rng.random();
        let (loss, norm) = train_step(model, &batch, &optimizer, cfg.grad_clip, schedule.lr_at(step), seed)?;
        report.losses.push(loss);
        report.grad_norms.push(norm);
        progress(step, loss);
    }
    Ok(report)
}

/// Eval-mode loss and logits of one example.
pub fn teacher_forced(model: &RalfModel, ex: &Example<'_>) -> Result<(f64, Tensor<f32>)> {
    let mut g = Graph::new(&model.store, Mode::Eval, 0);
    let p = g.constant(ex.patches.clone());
    let r = ex.retrieved.clone().map(|r| g.constant(r));
    let (loss, logits) = model.net.loss(&mut g, p, r, &ex.constraint, ex.tokens)?;
    Ok((g.value(loss).data()[0] as f64, g.value(logits).clone()))
}

/// Fraction of next tokens predicted correctly by argmax under teacher
/// forcing, pooled over all positions of all examples. Also returns the
/// mean loss.
pub fn teacher_forced_accuracy(model: &RalfModel, examples: &[Example<'_>]) -> Result<(f64, f64)> {
    let (mut hit, mut total, mut loss) = (0usize, 0usize, 0.0);
    for ex in examples {
        let (l, logits) = teacher_forced(model, ex)?;
        loss += l;
        for (r, &t) in ex.tokens[1..].iter().enumerate() {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            hit += usize::from(best == t as usize);
            total += 1;
        }
    }
    Ok((hit as f64 / total.max(1) as f64, loss / examples.len().max(1) as f64))
}

/// Retrieved rows reordered canonically.
pub fn canonicalize(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let order = canonical_order(t);
    let data = order.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Ok(Tensor::matrix(t.rows(), t.cols(), data)?)
}
