//! Trains all four variants over a few seeds and prints the results table.
//!
//!     cargo run --release --example ablation_table -- [epochs] [seeds...]

use affectfuse::data::{generate_dataset, GeneratorConfig};
use affectfuse::harness::run_ablation_with;
use affectfuse::model::{ModelConfig, Variant};
use affectfuse::train::TrainConfig;

fn main() -> affectfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().map_or(8, |a| a.parse().expect("epochs"));
    let seeds: Vec<u64> = if args.len() > 1 { args[1..].iter().map(|s| s.parse().expect("seed")).collect() } else { vec![1, 2, 3] };
    let ds = generate_dataset(&GeneratorConfig::noisy())?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let table = run_ablation_with(&Variant::ALL, &ds, &ModelConfig::default(), &cfg, &seeds, "example", &mut |c| {
        eprintln!("{} seed {}: accuracy {:.4} macro-F1 {:.4}", c.variant, c.seed, c.test.accuracy, c.test.macro_f1);
    })?;
    print!("{}", table.to_markdown());
    Ok(())
}
