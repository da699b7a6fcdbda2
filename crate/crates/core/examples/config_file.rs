//! Parses a run config, prints its canonical form and hash, and shows the
//! error for an unknown key.

use affectfuse::config::RunConfig;

fn main() -> affectfuse::Result<()> {
    let text = "\
# noisy desk run
generator.noise_schedule = audio_burst
generator.missing_rate = 0.2
train.epochs = 20
model.variant = no_mie
";
    let cfg = RunConfig::parse(text)?;
    println!("{}", cfg.canonical());
    println!("hash {}", cfg.hash());
    match RunConfig::parse("train.momentum = 0.9") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
