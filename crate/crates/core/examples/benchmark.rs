// Retrieval ablation on synthetic posters. The defaults are tiny so the
// example finishes in seconds; `BENCH_TRAIN`, `BENCH_TEST`, `BENCH_STEPS`,
// `BENCH_SEEDS` and `BENCH_ARMS` (comma-separated names) scale it up.

use ralf::benchmark::{run_benchmark, Arm, BenchmarkConfig};

fn env_or<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

pub fn run_example() -> anyhow::Result<()> {
    let mut cfg = BenchmarkConfig::default();
    cfg.train = env_or("BENCH_TRAIN", 64);
    cfg.test = env_or("BENCH_TEST", 16);
    cfg.training.steps = env_or("BENCH_STEPS", 5);
    cfg.training.batch_size = env_or("BENCH_BATCH", cfg.training.batch_size);
    cfg.encoder.steps = env_or("BENCH_ENCODER_STEPS", 5);
    cfg.seeds = (0..env_or("BENCH_SEEDS", 1u64)).collect();
    if let Ok(names) = std::env::var("BENCH_ARMS") {
        let wanted: Vec<&str> = names.split(',').collect();
        cfg.arms = Arm::standard().into_iter().filter(|a| wanted.contains(&a.name.as_str())).collect();
    }
    let report = run_benchmark(&cfg, |run| {
        println!(
            "{:<14} seed {}  FID {:.4}  loss {:.4}  {:.0}s",
            run.arm, run.seed, run.report.fid, run.final_loss, run.seconds
        );
    })?;
    print!("{}", report.table());
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
