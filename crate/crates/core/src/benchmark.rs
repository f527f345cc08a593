//! End-to-end comparison of retrieval settings on the synthetic posters.
//!
//! Each seed gets its own dataset, layout encoder and database; every arm
//! then trains a fresh toy generator on the same data and is scored by
//! layout FID on the test split.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CategorySchema;
use crate::encoders::{pretrain_layout_encoder, LayoutEncoderConfig, LayoutFeature, PretrainConfig};
use crate::generator::{
    generate_from, retrieve_for, train_with_progress, GeneratorConfig, RalfModel, RetrievalMode, SamplingConfig,
    TrainConfig, TrainingSet,
};
use crate::metrics::{evaluate_trial, Generated, MetricReport};
use crate::retrieval::{EmbeddingKind, RetrievalDatabase, DEFAULT_GRID};
use crate::synth::{generate_synthetic_dataset, SynthConfig};
use crate::tasks::{ConstraintSpec, TaskKind};
use crate::tokenizer::{Vocabulary, DEFAULT_BINS};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub retrieval: RetrievalMode,
    pub k: usize,
}

impl Arm {
    pub fn new(name: &str, retrieval: RetrievalMode, k: usize) -> Self {
        Self {
            name: name.to_string(),
            retrieval,
            k,
        }
    }

    /// No retrieval, saliency with K ∈ {1, 4, 16}, random with K=16.
    pub fn standard() -> Vec<Arm> {
        vec![
            Arm::new("off", RetrievalMode::Off, 1),
            Arm::new("saliency-k1", RetrievalMode::Saliency, 1),
            Arm::new("saliency-k4", RetrievalMode::Saliency, 4),
            Arm::new("saliency-k16", RetrievalMode::Saliency, 16),
            Arm::new("random-k16", RetrievalMode::Random, 16),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub train: usize,
    pub test: usize,
    pub seeds: Vec<u64>,
    pub height: usize,
    pub width: usize,
    pub encoder: PretrainConfig,
    pub training: TrainConfig,
    pub arms: Vec<Arm>,
    /// Neighborhood size for density and coverage.
    pub nn_k: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            train: 5000,
            test: 500,
            seeds: vec![0, 1, 2],
            height: 80,
            width: 56,
            encoder: PretrainConfig {
                steps: 400,
                ..PretrainConfig::default()
            },
            training: TrainConfig {
                steps: 1000,
                batch_size: 16,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            arms: Arm::standard(),
            nn_k: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub report: MetricReport,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub runs: Vec<ArmRun>,
}

impl BenchmarkReport {
    pub fn fid(&self, arm: &str, seed: u64) -> Option<f64> {
        self.runs.iter().find(|r| r.arm == arm && r.seed == seed).map(|r| r.report.fid)
    }

    /// Seeds on which `a` has strictly lower FID than `b`.
    pub fn wins(&self, a: &str, b: &str) -> usize {
        let mut seeds: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds
            .iter()
            .filter(|&&s| matches!((self.fid(a, s), self.fid(b, s)), (Some(x), Some(y)) if x < y))
            .count()
    }

    pub fn mean_fid(&self, arm: &str) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.arm == arm).map(|r| r.report.fid).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn table(&self) -> String {
        let mut arms: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !arms.contains(&r.arm.as_str()) {
                arms.push(&r.arm);
            }
        }
        let mut seeds: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut out = format!("{:<14}", "arm");
        for s in &seeds {
            out += &format!(" {:>10}", format!("seed {s}"));
        }
        out += &format!(" {:>10}\n", "mean");
        for a in arms {
            out += &format!("{a:<14}");
            for &s in &seeds {
                out += &self.fid(a, s).map_or(format!(" {:>10}", "-"), |f| format!(" {f:>10.4}"));
            }
            out += &format!(" {:>10.4}\n", self.mean_fid(a).unwrap_or(f64::NAN));
        }
        out
    }
}

/// Runs every arm on every seed; `on_run` sees each result as it lands.
pub fn run_benchmark(cfg: &BenchmarkConfig, mut on_run: impl FnMut(&ArmRun)) -> Result<BenchmarkReport> {
    let schema = CategorySchema::pku();
    let vocab = Vocabulary::new(schema.num_categories(), DEFAULT_BINS);
    let mut report = BenchmarkReport::default();
    for &seed in &cfg.seeds {
        let ds = generate_synthetic_dataset(
            &SynthConfig {
                train: cfg.train,
                val: 0,
                test: cfg.test,
                height: cfg.height,
                width: cfg.width,
                seed,
                ..SynthConfig::default()
            },
            &schema,
        )?;
        let layouts: Vec<_> = ds.train.iter().map(|s| s.layout.clone()).collect();
        let encoder = pretrain_layout_encoder(
            &layouts,
            LayoutEncoderConfig::toy(vocab),
            PretrainConfig {
                seed,
                ..cfg.encoder
            },
        )?;
        let db = RetrievalDatabase::build(&ds.train, EmbeddingKind::Saliency, &encoder, DEFAULT_GRID)?;
        let real: Vec<LayoutFeature> = ds.test.iter().map(|s| encoder.encode_layout(&s.layout)).collect::<Result<_>>()?;

        for arm in &cfg.arms {
            let start = Instant::now();
            let mut gcfg = GeneratorConfig::toy(vocab);
            gcfg.retrieval = arm.retrieval;
            gcfg.k = arm.k;
            gcfg.feature_dim = encoder.config().dim;
            let mut model = RalfModel::new(gcfg, schema.clone(), seed)?;
            model.encoder_stamp = Some(encoder.stamp()?.to_string());
            let db_ref = (arm.retrieval != RetrievalMode::Off).then_some(&db);
            let losses = {
                let set = TrainingSet::prepare(&model, &ds.train, db_ref)?;
                let training = TrainConfig {
                    seed,
                    tasks: vec![TaskKind::Unconstrained],
                    ..cfg.training.clone()
                };
                train_with_progress(&mut model, &set, &training, |step, loss| {
                    if step % 100 == 0 {
                        log::info!("{} seed {seed} step {step} loss {loss:.4}", arm.name);
                    }
                })?
                .losses
            };

            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
            let spec = ConstraintSpec::unconstrained();
            let sampling = SamplingConfig::default();
            let mut generated = Vec::with_capacity(ds.test.len());
            for s in &ds.test {
                let patches = crate::encoders::patchify(&s.canvas, &s.saliency, &model.config().encoder)?;
                let retrieved = retrieve_for(&model, db_ref, &s.saliency, None, &mut rng)?;
                generated.push(generate_from(&model, &patches, retrieved.as_ref(), &spec, &sampling, &mut rng)?);
            }
            let feats: Vec<LayoutFeature> = generated.iter().map(|l| encoder.encode_layout(l)).collect::<Result<_>>()?;
            let items: Vec<Generated<'_>> = generated
                .iter()
                .zip(&ds.test)
                .map(|(l, s)| Generated {
                    layout: l,
                    canvas: &s.canvas,
                    saliency: &s.saliency,
                })
                .collect();
            let trial = evaluate_trial(&items, &feats, &real, &schema, cfg.nn_k)?;
            let run = ArmRun {
                arm: arm.name.clone(),
                seed,
                report: MetricReport::from_trials(vec![trial], real.len()),
                final_loss: losses.iter().rev().take(50).sum::<f64>() / losses.len().clamp(1, 50) as f64,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_run(&run);
            report.runs.push(run);
        }
    }
    Ok(report)
}
