//! Records a small computation on the tape, runs backward, and checks the
//! result against central differences.

use affectfuse::gradcheck::finite_diff_check;
use affectfuse::{Tape, Tensor};

fn loss(w: &Tensor, x: &Tensor) -> affectfuse::Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let wv = tape.param(w);
    let xv = tape.constant(x.clone());
    // mean(sigmoid(x W^T))
    let y = tape.matmul_bt(xv, wv)?;
    let s = tape.sigmoid(y);
    let l = tape.mean(s);
    let g = tape.backward(l)?;
    Ok((tape.value(l).data()[0], g.wrt(wv)))
}

fn main() -> affectfuse::Result<()> {
    let w = Tensor::matrix(&[&[0.3, -0.2, 0.5], &[0.1, 0.4, -0.6]])?;
    let x = Tensor::matrix(&[&[1.0, 2.0, -1.0], &[0.5, -0.5, 0.25]])?;
    let (value, grad) = loss(&w, &x)?;
    println!("loss {value:.6}");
    println!("dL/dW {grad:.6?}");

    let mut params = vec![("w".to_string(), w)];
    let report = finite_diff_check(&mut params, &[grad], |p| Ok(loss(&p[0].1, &x)?.0), 1e-5, 1e-6)?;
    println!("max relative error vs finite differences: {:.2e}", report.max_rel_err());
    Ok(())
}
