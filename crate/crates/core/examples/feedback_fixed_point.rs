//! Iterates the prediction-feedback map to its fixed point for a head whose
//! contraction bound is below 1, and for a larger head where it is not.

use affectfuse::rng::stream;
use affectfuse::tfl::{contraction_bound, fixed_point_residual_kl, iterate_fixed_point, ProbabilityVector, TflParams};
use affectfuse::Tensor;
use rand_distr::{Distribution, StandardNormal};

fn main() -> affectfuse::Result<()> {
    let mut rng = stream(3, "example");
    let z: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z = Tensor::vector(&z);
    for gain in [0.05, 0.5, 3.0] {
        let p = TflParams::init(32, 4, 32, gain, &mut rng);
        let bound = contraction_bound(&p)?;
        let fp = iterate_fixed_point(&z, &ProbabilityVector::one_hot(4, 0), &p, 500, 1e-9)?;
        let ratios = fp.contraction_ratios(1e-12);
        let worst = ratios.iter().cloned().fold(0.0, f64::max);
        println!(
            "gain {gain:<4} bound {bound:.4}  converged {} in {:>3} steps  worst ratio {worst:.4}  residual KL {:.1e}",
            fp.converged,
            fp.iterations,
            fixed_point_residual_kl(&z, &fp.y_star, &p)?
        );
        println!("          y* = {:.5?}", fp.y_star.as_slice());
    }
    Ok(())
}
