//! Trains the full model and the equal-weight ablation on the noisy
//! benchmark, then evaluates both under the same injected missing masks.
//!
//!     cargo run --release --example robustness_sweep -- [epochs]

use affectfuse::data::{generate_dataset, GeneratorConfig, MissingMode};
use affectfuse::harness::missing_rate_sweep;
use affectfuse::model::{ModelConfig, Variant};
use affectfuse::train::{train, Checkpoint, TrainConfig};

fn main() -> affectfuse::Result<()> {
    let epochs = std::env::args().nth(1).map_or(10, |a| a.parse().expect("epochs"));
    let ds = generate_dataset(&GeneratorConfig::noisy())?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let mut models = Vec::new();
    for v in [Variant::Full, Variant::NoMie] {
        let out = train(&ModelConfig { variant: v, ..ModelConfig::default() }, &cfg, &ds.train, &ds.val)?;
        models.push((
            v.to_string(),
            Checkpoint {
                model: out.model,
                seed: cfg.seed,
                config_hash: "example".into(),
                data_fingerprint: ds.fingerprint.clone(),
                best_epoch: out.best_epoch,
                best_val_macro_f1: out.best_val_macro_f1,
            },
        ));
    }
    let rates = [0.0, 0.2, 0.4, 0.6];
    let res = missing_rate_sweep(&models, &ds.test, &ds.fingerprint, &rates, MissingMode::AtMostOne, 1)?;
    println!("model    {}", rates.map(|r| format!("{r:>6.1}")).join(""));
    for name in &res.models {
        let row: String = rates.iter().map(|&r| format!("{:>6.3}", res.cell(name, r).unwrap().accuracy)).collect();
        println!("{name:<8} {row}   drop {:.3}", res.accuracy_drop(name).unwrap());
    }
    Ok(())
}
