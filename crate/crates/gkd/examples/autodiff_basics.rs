//! Tape-based reverse-mode differentiation in a nutshell: record a few ops,
//! ask for gradients, and cross-check one of them against finite differences.

use gkd::{finite_difference_gradient, Result, Tape, Tensor};

fn main() -> Result<()> {
    // `param` marks a leaf as differentiable; plain `new` tensors stay data.
    let x = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?;
    let w = Tensor::param(&[2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6])?;
    let target = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?;

    let tape = Tape::new();
    let h = tape.relu(&tape.linear(&x, &w, None)?)?;
    let diff = tape.sub(&h, &target)?;
    let loss = tape.mean(&tape.square(&diff)?, &[])?;
    println!("loss            = {:.6}", loss.values()[0]);

    let grads = tape.backward(&loss)?;
    let gw = grads.get(&w).expect("w participates in the loss");
    println!("dloss/dw        = {:?}", gw.values());

    // Finite differences, one probe pair per weight entry, agree to ~1e-9.
    let fd = finite_difference_gradient(
        |probe| {
            let t = Tape::new();
            let h = t.relu(&t.linear(&x, probe, None)?)?;
            let d = t.sub(&h, &target)?;
            Ok(t.mean(&t.square(&d)?, &[])?.values()[0])
        },
        &w,
        1e-5,
    )?;
    let worst = gw
        .values()
        .iter()
        .zip(fd.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("max |ad - fd|   = {worst:.2e}");

    // detach() stops gradient flow: the loss still uses h's values, but the
    // backward sweep never reaches w, so no gradient is reported for it.
    let tape = Tape::new();
    let h = tape.relu(&tape.linear(&x, &w, None)?)?;
    let frozen = h.detach();
    let loss = tape.mean(&tape.square(&tape.sub(&frozen, &target)?)?, &[])?;
    let grads = tape.backward(&loss)?;
    println!("grad through detach: {:?}", grads.get(&w).map(|t| t.shape().to_vec()));

    // Ops that would produce NaN or infinity fail loudly instead of letting
    // a bad value poison the rest of training.
    let tape = Tape::new();
    let one = Tensor::new(&[1], vec![1.0])?;
    let zero = Tensor::new(&[1], vec![0.0])?;
    match tape.div(&one, &zero) {
        Err(e) => println!("1/0 rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
