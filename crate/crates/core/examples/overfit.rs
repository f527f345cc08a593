// Memorize 32 synthetic posters with the toy generator and report
// teacher-forced next-token accuracy.

use std::time::Instant;

use ralf::data::CategorySchema;
use ralf::generator::{
    teacher_forced_accuracy, train_with_progress, GeneratorConfig, RalfModel, RetrievalMode, TrainConfig,
    TrainingSet,
};
use ralf::synth::{generate_synthetic_dataset, SynthConfig};
use ralf::tasks::TaskKind;
use ralf::tokenizer::Vocabulary;

pub fn run_example() -> anyhow::Result<()> {
    let steps: usize = std::env::var("OVERFIT_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(40);
    let schema = CategorySchema::pku();
    let ds = generate_synthetic_dataset(
        &SynthConfig {
            train: 32,
            val: 0,
            test: 0,
            height: 80,
            width: 56,
            seed: 1,
            ..SynthConfig::default()
        },
        &schema,
    )?;
    let mut cfg = GeneratorConfig::toy(Vocabulary::new(schema.num_categories(), 128));
    cfg.retrieval = RetrievalMode::Off;
    cfg.dropout = 0.0;
    cfg.encoder.dropout = 0.0;
    let mut model = RalfModel::new(cfg, schema, 0)?;
    let set = TrainingSet::prepare(&model, &ds.train, None)?;
    let train = TrainConfig {
        steps,
        batch_size: 8,
        lr: 1e-3,
        tasks: vec![TaskKind::Unconstrained],
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let report = train_with_progress(&mut model, &set, &train, |step, loss| {
        if step % 10 == 0 {
            println!("step {step:4}  loss {loss:.4}");
        }
    })?;
    let mut rng = rand::rng();
    let examples = (0..set.len())
        .map(|i| set.example(&model, i, &train.tasks, &mut rng))
        .collect::<ralf::Result<Vec<_>>>()?;
    let (acc, loss) = teacher_forced_accuracy(&model, &examples)?;
    println!(
        "{} steps in {:.1}s, final loss {:.4}, eval loss {loss:.4}, accuracy {:.2}%",
        report.losses.len(),
        start.elapsed().as_secs_f64(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        100.0 * acc
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
