//! Trains the full model on the default synthetic benchmark and reports test
//! metrics.
//!
//!     cargo run --release --example train_desk -- [epochs] [variant] [noisy]

use std::time::Instant;

use affectfuse::data::{generate_dataset, GeneratorConfig};
use affectfuse::model::{ModelConfig, Variant};
use affectfuse::train::{evaluate, train_with, TrainConfig};

fn main() -> affectfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().map_or(30, |a| a.parse().expect("epochs"));
    let variant: Variant = args.get(1).map_or(Ok(Variant::Full), |a| a.parse())?;
    let noisy = args.get(2).is_some_and(|a| a == "noisy");

    let gen = if noisy { GeneratorConfig::noisy() } else { GeneratorConfig::default() };
    let ds = generate_dataset(&gen)?;
    let model_cfg = ModelConfig { variant, ..ModelConfig::default() };
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };

    let start = Instant::now();
    let out = train_with(&model_cfg, &cfg, &ds.train, &ds.val, &mut |r| {
        println!(
            "epoch {:>2}  lr {:.1e}  train {:.4} (ce {:.4} kl {:.4})  val acc {:.4} f1 {:.4}  [{:.1}s]",
            r.epoch,
            r.lr,
            r.train_total,
            r.train_ce,
            r.train_kl,
            r.val_acc,
            r.val_macro_f1,
            start.elapsed().as_secs_f64()
        );
    })?;
    let test = evaluate(&out.model, &ds.test, cfg.loss_config(variant))?;
    println!(
        "{variant}: best epoch {}  test accuracy {:.4}  macro-F1 {:.4}",
        out.best_epoch, test.accuracy, test.macro_f1
    );
    Ok(())
}
