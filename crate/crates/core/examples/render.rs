// Draw synthetic posters with their layouts as SVG files. Pass a directory
// to keep the output.

use ralf::data::CategorySchema;
use ralf::render::render_svg;
use ralf::synth::{generate_synthetic_dataset, SynthConfig};

pub fn run_example() -> anyhow::Result<()> {
    let schema = CategorySchema::pku();
    let ds = generate_synthetic_dataset(
        &SynthConfig {
            train: 3,
            val: 0,
            test: 0,
            seed: 5,
            ..SynthConfig::default()
        },
        &schema,
    )?;
    let tmp = tempfile::tempdir()?;
    let dir = std::env::args().nth(1).map_or_else(|| tmp.path().to_path_buf(), Into::into);
    std::fs::create_dir_all(&dir)?;
    for s in &ds.train {
        let path = dir.join(format!("{}.svg", s.id));
        let svg = render_svg(&s.canvas, &s.layout, &schema);
        std::fs::write(&path, &svg)?;
        println!("{} ({} bytes, {} elements)", path.display(), svg.len(), s.layout.len());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
