//! Central-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Max over all coordinates of `|analytic - numeric| / max(1, |analytic|)`,
/// where `numeric` is the central difference with step `h`.
///
/// `f` maps the leaf variables (one per tensor in `point`) to a scalar.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = point.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &leaves)?;
    let analytic: Vec<Tensor> = tape
        .grad(loss, &leaves, false)?
        .iter()
        .map(|g| g.value())
        .collect();

    let eval = |pt: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        // Leaves stay differentiable so `f` may take gradients internally.
        let vars: Vec<Var<'_>> = pt.iter().map(|t| tape.var(t.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..grad.numel() {
            let orig = point[ti].data()[k];
            probe[ti].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_fn(&[4], |i| i as f64);
        let err = grad_check(|tape, _| Ok(tape.constant(Tensor::scalar(3.0))), &[x], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_sines() {
        let x = Tensor::from_fn(&[6], |i| (i as f64 * 1.7).cos() * 2.0);
        let err = grad_check(|_, v| Ok(v[0].sin().sum()), &[x], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn three_class_cross_entropy() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.1, 0.4, -0.5]).unwrap();
        let err = grad_check(|_, v| v[0].cross_entropy(&[2, 0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
