//! Saves a dataset and a briefly trained checkpoint, reloads both, and shows
//! that a flipped byte is rejected.

use affectfuse::data::{generate_dataset, load_dataset, save_dataset, GeneratorConfig};
use affectfuse::model::ModelConfig;
use affectfuse::train::{evaluate, load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};

fn main() -> affectfuse::Result<()> {
    let dir = std::env::temp_dir().join("affectfuse-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let gen = GeneratorConfig { train_sessions: 60, val_sessions: 20, test_sessions: 20, ..GeneratorConfig::default() };
    let ds = generate_dataset(&gen)?;
    let data_path = dir.join("data.afus");
    save_dataset(&ds, &data_path)?;
    assert_eq!(load_dataset(&data_path)?, ds);

    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let out = train(&ModelConfig::default(), &cfg, &ds.train, &ds.val)?;
    let ckpt = Checkpoint {
        model: out.model,
        seed: cfg.seed,
        config_hash: "example".into(),
        data_fingerprint: ds.fingerprint.clone(),
        best_epoch: out.best_epoch,
        best_val_macro_f1: out.best_val_macro_f1,
    };
    let path = dir.join("model.afus");
    save_checkpoint(&ckpt, &path)?;
    let back = load_checkpoint(&path)?;
    let val = evaluate(&back.model, &ds.val, cfg.loss_config(back.model.config.variant))?;
    println!(
        "{} bytes; recorded val macro-F1 {:.6}, re-evaluated {:.6}",
        std::fs::metadata(&path)?.len(),
        back.best_val_macro_f1,
        val.macro_f1
    );

    let mut bytes = std::fs::read(&path)?;
    bytes[100] ^= 1;
    std::fs::write(&path, &bytes)?;
    match load_checkpoint(&path) {
        Err(e) => println!("corrupted copy rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
