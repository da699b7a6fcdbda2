//! Trains on the noisy benchmark, whose audio noise spikes on steps 3 to 5,
//! and prints the fusion weights of one test session over time.
//!
//!     cargo run --release --example confidence_trace -- [epochs] [variant]

use affectfuse::data::{generate_dataset, GeneratorConfig, BURST_STEPS};
use affectfuse::harness::{confidence_trace, mean_weight_split};
use affectfuse::modality::Modality;
use affectfuse::model::{ModelConfig, Variant};
use affectfuse::train::{train, TrainConfig};

fn main() -> affectfuse::Result<()> {
    let epochs = std::env::args().nth(1).map_or(10, |a| a.parse().expect("epochs"));
    let variant: Variant = std::env::args().nth(2).map_or(Variant::Full, |a| a.parse().expect("variant"));
    let gen = GeneratorConfig { missing_rate: 0.0, ..GeneratorConfig::noisy() };
    let ds = generate_dataset(&gen)?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let model = train(&ModelConfig { variant, ..ModelConfig::default() }, &cfg, &ds.train, &ds.val)?.model;

    let rows = confidence_trace(&model, &ds.test[0])?;
    println!("step  sigma_a  w_audio  w_visual  w_text  label pred");
    for r in &rows {
        println!(
            "{:>4}  {:>7.2}  {:>7.3}  {:>8.3}  {:>6.3}  {:>5} {:>4}",
            r.step + 1, r.sigma[0], r.weights[0], r.weights[1], r.weights[2], r.label, r.pred
        );
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    for s in &ds.test {
        let (a, b) = mean_weight_split(&confidence_trace(&model, s)?, Modality::Audio, |t| BURST_STEPS.contains(&t));
        inside += a / ds.test.len() as f64;
        outside += b / ds.test.len() as f64;
    }
    println!("mean audio weight during the burst {inside:.4}, elsewhere {outside:.4}");
    Ok(())
}
