// Briefly train a generator, then sample under every constraint task and
// check the outputs against their specs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ralf::data::CategorySchema;
use ralf::encoders::patchify;
use ralf::generator::{
    generate_from, train, GeneratorConfig, RalfModel, RetrievalMode, SamplingConfig, TrainConfig, TrainingSet,
};
use ralf::synth::{generate_synthetic_dataset, SynthConfig};
use ralf::tasks::{build_spec, check_satisfaction, TaskKind};
use ralf::tokenizer::{Vocabulary, DEFAULT_BINS};

pub fn run_example() -> anyhow::Result<()> {
    let schema = CategorySchema::pku();
    let ds = generate_synthetic_dataset(
        &SynthConfig {
            train: 24,
            val: 0,
            test: 4,
            height: 80,
            width: 56,
            seed: 3,
            ..SynthConfig::default()
        },
        &schema,
    )?;
    let vocab = Vocabulary::new(schema.num_categories(), DEFAULT_BINS);
    let mut cfg = GeneratorConfig::toy(vocab);
    cfg.retrieval = RetrievalMode::Off;
    let mut model = RalfModel::new(cfg, schema, 0)?;
    let set = TrainingSet::prepare(&model, &ds.train, None)?;
    let report = train(
        &mut model,
        &set,
        &TrainConfig {
            steps: 10,
            batch_size: 4,
            lr: 1e-3,
            tasks: TaskKind::ALL.to_vec(),
            ..TrainConfig::default()
        },
    )?;
    println!("trained {} steps, last loss {:.3}", report.losses.len(), report.losses.last().unwrap_or(&f64::NAN));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sampling = SamplingConfig::default();
    for kind in TaskKind::ALL {
        let mut satisfied = 0;
        for s in &ds.test {
            let spec = build_spec(kind, &s.layout, &mut rng)?;
            let patches = patchify(&s.canvas, &s.saliency, &model.config().encoder)?;
            let layout = generate_from(&model, &patches, None, &spec, &sampling, &mut rng)?;
            satisfied += usize::from(check_satisfaction(&layout, &spec, &vocab).all_passed());
        }
        println!("{kind:<14} {satisfied}/{} satisfied", ds.test.len());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
