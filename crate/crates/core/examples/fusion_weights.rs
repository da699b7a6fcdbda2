//! Runs one session through an untrained model and prints the per-step
//! modality weights, then shows the symmetric case where they are all 1/3.

use affectfuse::data::{generate_dataset, GeneratorConfig};
use affectfuse::modality::Modality;
use affectfuse::model::{Model, ModelConfig};
use affectfuse::rng::stream;

fn main() -> affectfuse::Result<()> {
    let ds = generate_dataset(&GeneratorConfig { train_sessions: 1, val_sessions: 1, test_sessions: 1, ..GeneratorConfig::noisy() })?;
    let model = Model::new(ModelConfig::default(), &mut stream(7, "init"))?;
    let session = &ds.test[0];
    let pred = model.predict(&session.streams)?;
    println!("step  audio  visual  text   present   pred");
    for t in 0..session.len() {
        let w = Modality::ALL.map(|m| pred.weights.get(t, m));
        let present: String =
            session.streams.iter().map(|s| if s.present[t] { 'x' } else { '.' }).collect();
        println!("{t:>4}  {:.3}  {:.3}   {:.3}  {present:>7}   {}", w[0], w[1], w[2], pred.y_hat[t].argmax());
    }

    let cfg = ModelConfig { raw_dims: [16, 16, 16], mie_shared: true, ..ModelConfig::default() };
    let mut sym = Model::new(cfg, &mut stream(8, "init"))?;
    sym.params.symmetrize()?;
    let x = affectfuse::Tensor::filled(&[5, 16], 0.3);
    let p = sym.predict_raw(&[&x, &x, &x])?;
    println!("symmetric model, identical inputs: step 0 weights {:.6?}", Modality::ALL.map(|m| p.weights.get(0, m)));
    Ok(())
}
