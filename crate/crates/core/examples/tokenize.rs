// Turn a layout into tokens and back.

use ralf::data::{Element, Layout};
use ralf::tokenizer::{detokenize, tokenize_layout, Vocabulary, DEFAULT_BINS};

pub fn run_example() -> anyhow::Result<()> {
    let vocab = Vocabulary::new(3, DEFAULT_BINS);
    let layout = Layout::new(vec![
        Element::new(1, 0.20, 0.10, 0.25, 0.08),
        Element::new(2, 0.50, 0.45, 0.70, 0.12),
        Element::new(3, 0.50, 0.46, 0.80, 0.20),
    ])
    .raster_sorted();
    let tokens = tokenize_layout(&layout, &vocab)?;
    println!("vocabulary size {}, {} tokens: {tokens:?}", vocab.size(), tokens.len());
    let back = detokenize(&tokens, &vocab)?;
    for (a, b) in layout.elements.iter().zip(&back.elements) {
        let err = a.bbox.coords().iter().zip(b.bbox.coords()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        println!("category {}  max coordinate error {err:.5}", a.category);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
