//! Central finite differences, the independent oracle for every gradient in
//! this crate.

use crate::error::Result;
use crate::tensor::Tensor;

/// Numerically differentiates `f` at `x` with central differences:
/// `g[i] = (f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)`.
///
/// `f` is treated as a black box from tensor to scalar; the result never
/// touches the tape, which is what makes it a trustworthy oracle for
/// reverse-mode gradients.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let base = x.values();
    let mut grad = vec![0.0f64; base.len()];
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        plus[i] += eps;
        let mut minus = base.to_vec();
        minus[i] -= eps;
        let f_plus = f(&Tensor::new(x.shape(), plus)?)?;
        let f_minus = f(&Tensor::new(x.shape(), minus)?)?;
        grad[i] = (f_plus - f_minus) / (2.0 * eps);
    }
    Tensor::new(x.shape(), grad)
}

/// Largest elementwise relative error between two gradient estimates, with
/// denominators clamped at `floor` so agreement near zero is not penalised.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "comparing gradients of different shapes");
    a.values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn derivative_of_square_at_three_is_six() {
        let x = Tensor::scalar(3.0).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.values()[0] * t.values()[0]), &x, 1e-5).unwrap();
        assert!((g.values()[0] - 6.0).abs() < 1e-8, "got {}", g.values()[0]);
    }

    #[test]
    fn matches_reverse_mode_on_a_composite() {
        // f(x) = mean(sigmoid(x)²)
        let x = Tensor::param(&[2, 2], vec![0.4, -1.2, 2.0, 0.1]).unwrap();
        let analytic = {
            let tape = Tape::new();
            let s = tape.sigmoid(&x).unwrap();
            let sq = tape.square(&s).unwrap();
            let loss = tape.mean(&sq, &[]).unwrap();
            let grads = tape.backward(&loss).unwrap();
            grads.get(&x).unwrap().clone()
        };
        let fd = finite_difference_gradient(
            |t| {
                let tape = Tape::new();
                let s = tape.sigmoid(t)?;
                let sq = tape.square(&s)?;
                Ok(tape.mean(&sq, &[])?.item())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &fd, 1e-8) < 1e-4);
    }
}
