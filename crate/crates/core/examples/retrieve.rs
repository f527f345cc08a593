// Pretrain a layout encoder, build a saliency database and look up the
// nearest training posters for a test canvas.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ralf::data::{CategorySchema, Layout};
use ralf::encoders::{pretrain_layout_encoder, LayoutEncoderConfig, PretrainConfig};
use ralf::retrieval::{embed_saliency, EmbeddingKind, RetrievalDatabase, DEFAULT_GRID};
use ralf::synth::{generate_synthetic_dataset, SynthConfig};
use ralf::tokenizer::{Vocabulary, DEFAULT_BINS};

pub fn run_example() -> anyhow::Result<()> {
    let schema = CategorySchema::pku();
    let ds = generate_synthetic_dataset(
        &SynthConfig {
            train: 200,
            val: 0,
            test: 3,
            height: 80,
            width: 56,
            seed: 2,
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
    let db = RetrievalDatabase::build(&ds.train, EmbeddingKind::Saliency, &encoder, DEFAULT_GRID)?;
    println!("database: {} entries, stamp {}", db.len(), db.stamp);
    for s in &ds.test {
        let hits = db.query_knn(&embed_saliency(&s.saliency, DEFAULT_GRID), 4, None)?;
        let shown: Vec<String> = hits
            .iter()
            .map(|h| format!("{} ({:.3})", db.entries[h.index].sample_id, h.similarity))
            .collect();
        println!("{} -> {}", s.id, shown.join(", "));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let random = db.random_retrieve(4, None, &mut rng)?;
    println!("random draw: {random:?}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
