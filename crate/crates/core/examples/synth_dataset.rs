// Generate a small synthetic poster dataset, write it to disk and read it
// back. Pass a directory to keep the files.

use ralf::data::{load_dataset, save_dataset, CategorySchema};
use ralf::synth::{generate_synthetic_dataset, SynthConfig};

pub fn run_example() -> anyhow::Result<()> {
    let schema = CategorySchema::pku();
    let cfg = SynthConfig {
        train: 20,
        val: 5,
        test: 5,
        seed: 7,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&cfg, &schema)?;
    let tmp = tempfile::tempdir()?;
    let dir = std::env::args().nth(1).map_or_else(|| tmp.path().to_path_buf(), Into::into);
    save_dataset(&dir, &ds)?;
    let back = load_dataset(&dir, &schema)?;
    println!("wrote {} to {}", back.summary(), dir.display());
    let s = &back.train[0];
    println!("{}: {}x{} canvas, {} elements", s.id, s.canvas.width, s.canvas.height, s.layout.len());
    for e in &s.layout.elements {
        let b = e.bbox;
        println!(
            "  {:<9} cx {:.3} cy {:.3} w {:.3} h {:.3}",
            schema.name(e.category).unwrap_or("?"),
            b.cx,
            b.cy,
            b.w,
            b.h
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
