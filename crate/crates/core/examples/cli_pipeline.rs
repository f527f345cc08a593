// The whole command-line workflow on a tiny dataset, driven in-process.

use ralf::cli::main_with_args;

pub fn run_example() -> anyhow::Result<()> {
    let tmp = tempfile::tempdir()?;
    let d = tmp.path().display().to_string();
    let steps = [
        format!("synth --out {d}/data --train 40 --val 4 --test 8 --height 80 --width 56"),
        format!("pretrain-encoder --data {d}/data --out {d}/enc.ckpt --steps 5 --batch-size 8"),
        format!("build-db --data {d}/data --encoder {d}/enc.ckpt --out {d}/train.db"),
        format!("train --data {d}/data --db {d}/train.db --out {d}/model.ckpt --k 4 --steps 3 --batch-size 4 --lr 0.001"),
        format!("generate --data {d}/data --model {d}/model.ckpt --db {d}/train.db --out {d}/gen --trials 2"),
        format!("evaluate --data {d}/data --generated {d}/gen --encoder {d}/enc.ckpt --out {d}/report.json"),
        format!("render --data {d}/data --layouts {d}/gen/trial0.jsonl --out {d}/svg --limit 3"),
    ];
    for line in steps {
        println!("$ ralf {line}");
        let args = std::iter::once("ralf".to_string()).chain(line.split_whitespace().map(String::from)).collect();
        let code = main_with_args(args);
        anyhow::ensure!(code == 0, "command exited with {code}");
    }
    println!("{}", std::fs::read_to_string(tmp.path().join("gen/manifest.json"))?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
