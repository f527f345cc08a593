// Score jittered copies of the test layouts against the originals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ralf::data::{CategorySchema, Layout};
use ralf::encoders::{pretrain_layout_encoder, LayoutEncoderConfig, LayoutFeature, PretrainConfig};
use ralf::metrics::{evaluate_trial, Generated, MetricReport};
use ralf::synth::{generate_synthetic_dataset, SynthConfig};
use ralf::tasks::perturb_with_sigma;
use ralf::tokenizer::{Vocabulary, DEFAULT_BINS};

pub fn run_example() -> anyhow::Result<()> {
    let schema = CategorySchema::pku();
    let ds = generate_synthetic_dataset(
        &SynthConfig {
            train: 100,
            val: 0,
            test: 40,
            height: 80,
            width: 56,
            seed: 4,
            ..SynthConfig::default()
        },
        &schema,
    )?;
    let layouts: Vec<Layout> = ds.train.iter().map(|s| s.layout.clone()).collect();
    let encoder = pretrain_layout_encoder(
        &layouts,
        LayoutEncoderConfig::toy(Vocabulary::new(schema.num_categories(), DEFAULT_BINS)),
        PretrainConfig {
            steps: 20,
            ..PretrainConfig::default()
        },
    )?;
    let real: Vec<LayoutFeature> = ds.test.iter().map(|s| encoder.encode_layout(&s.layout)).collect::<ralf::Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sigma in [0.0, 0.02, 0.1] {
        let jittered: Vec<Layout> = ds.test.iter().map(|s| perturb_with_sigma(&s.layout, sigma, &mut rng)).collect();
        let feats: Vec<LayoutFeature> = jittered.iter().map(|l| encoder.encode_layout(l)).collect::<ralf::Result<_>>()?;
        let items: Vec<Generated<'_>> = jittered
            .iter()
            .zip(&ds.test)
            .map(|(l, s)| Generated {
                layout: l,
                canvas: &s.canvas,
                saliency: &s.saliency,
            })
            .collect();
        let trial = evaluate_trial(&items, &feats, &real, &schema, 5)?;
        println!("sigma {sigma}: {}", MetricReport::from_trials(vec![trial], real.len()));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
