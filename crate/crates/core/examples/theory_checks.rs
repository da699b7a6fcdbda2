//! Gradient, fixed-point and Lipschitz checks on small models.

use affectfuse::data::{generate_dataset, GeneratorConfig};
use affectfuse::harness::{check_fixed_point, check_gradients, check_lipschitz, grad_check_config, HarnessConfig};
use affectfuse::model::{Model, ModelConfig};
use affectfuse::rng::stream;

fn main() -> affectfuse::Result<()> {
    let grad = check_gradients(&grad_check_config(), 3, 2, 42)?;
    println!("gradient: {} blocks, max relative error {:.2e}, passed {}", grad.blocks.len(), grad.max_rel_err(), grad.passed());

    let fp = check_fixed_point(&ModelConfig::default(), &HarnessConfig::default(), 42)?;
    println!(
        "fixed point: bound {:.4}, {}/{} converged, max ratio {:.4}, passed {}",
        fp.contraction_bound, fp.converged, fp.trials, fp.max_contraction_ratio, fp.passed
    );

    let ds = generate_dataset(&GeneratorConfig { train_sessions: 1, val_sessions: 1, test_sessions: 1, ..GeneratorConfig::default() })?;
    let model = Model::new(ModelConfig::default(), &mut stream(42, "init"))?;
    let lip = check_lipschitz(&model, &ds.test[0], 200, 1e-3, 42)?;
    for r in &lip.rows {
        let regime = r.zeroed.map_or("all present".to_string(), |z| format!("{z} zeroed"));
        println!("lipschitz {:<6} {regime:<14} empirical {:.3e}  bound {:.3e}", r.modality.to_string(), r.empirical, r.bound);
    }
    Ok(())
}
