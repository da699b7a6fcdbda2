//! Generates the desk benchmark, prints split sizes and class shares, and
//! measures how separable each modality is on its own.

use affectfuse::data::{generate_dataset, nearest_mean_accuracy, GeneratorConfig, Split};
use affectfuse::modality::Modality;

fn main() -> affectfuse::Result<()> {
    for (name, cfg) in [("default", GeneratorConfig::default()), ("noisy", GeneratorConfig::noisy())] {
        let ds = generate_dataset(&cfg)?;
        println!("{name} benchmark, fingerprint {}", ds.fingerprint);
        for s in Split::ALL {
            let shares: Vec<String> = ds.class_shares(s).iter().map(|v| format!("{v:.3}")).collect();
            println!("  {:<5} {:>3} sessions  shares {}", s.as_str(), ds.split(s).len(), shares.join(" "));
        }
        for m in Modality::ALL {
            println!("  nearest-mean accuracy on {m}: {:.3}", nearest_mean_accuracy(&ds, Split::Test, m));
        }
        let missing: usize = ds.test.iter().map(|s| s.steps_missing(1)).sum();
        println!("  test steps with one modality absent: {missing}");
    }
    Ok(())
}
