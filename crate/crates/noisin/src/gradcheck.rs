//! Central finite-difference oracle for reverse-mode gradients.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Compares analytic gradients against central finite differences of a
/// scalar function, coordinate by coordinate, over every parameter tensor.
///
/// `f` must be a pure function of `theta` — in particular any noise draws
/// inside it must be frozen. The function is evaluated twice at the base
/// point and a mismatch is reported as a reproducibility violation.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(
    mut f: F,
    theta: &[Tensor],
    analytic: &[Tensor],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if theta.len() != analytic.len() {
        return Err(Error::InvalidParameter(format!(
            "grad_check: {} parameter tensors but {} gradient tensors",
            theta.len(),
            analytic.len()
        )));
    }
    let base1 = f(theta)?;
    let base2 = f(theta)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::NotReproducible(format!(
            "objective returned {base1} then {base2} at the same point"
        )));
    }

    let mut work: Vec<Tensor> = theta.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != theta[pi].shape() {
            return Err(Error::ShapeMismatch(format!(
                "grad_check: gradient {pi} shape {:?} vs parameter {:?}",
                grad.shape(),
                theta[pi].shape()
            )));
        }
        for i in 0..theta[pi].numel() {
            let orig = theta[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let up = f(&work)?;
            work[pi].data_mut()[i] = orig - step;
            let down = f(&work)?;
            work[pi].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn quadratic_is_near_exact() {
        let theta = [Tensor::scalar(3.0)];
        let analytic = [Tensor::scalar(6.0)];
        let err = grad_check(
            |t| Ok(t[0].data()[0] * t[0].data()[0]),
            &theta,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "err {err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let theta = [Tensor::scalar(3.0)];
        let wrong = [Tensor::scalar(5.0)];
        let err = grad_check(
            |t| Ok(t[0].data()[0] * t[0].data()[0]),
            &theta,
            &wrong,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn rejects_non_reproducible_objective() {
        let mut flip = 0.0;
        let theta = [Tensor::scalar(1.0)];
        let analytic = [Tensor::scalar(1.0)];
        let res = grad_check(
            move |t| {
                flip += 1e-3;
                Ok(t[0].data()[0] + flip)
            },
            &theta,
            &analytic,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NotReproducible(_))));
    }

    #[test]
    fn taped_composite_matches_finite_differences() {
        // loss = sum(sigmoid(x W) * tanh(x W)) over a tiny instance.
        let x = Tensor::new(&[2, 3], vec![0.5, -0.2, 0.8, 1.0, 0.1, -0.6]).unwrap();
        let w0 = Tensor::new(&[3, 2], vec![0.3, -0.4, 0.7, 0.2, -0.1, 0.5]).unwrap();

        let eval = |w: &Tensor| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let wn = tape.leaf(w.clone());
            let z = tape.matmul(xn, wn).unwrap();
            let s = tape.sigmoid(z);
            let t = tape.tanh(z);
            let p = tape.mul(s, t).unwrap();
            let loss = tape.sum_all(p);
            let mut grads = tape.backward(loss).unwrap();
            (tape.value(loss).item().unwrap(), grads.take(wn).unwrap())
        };

        let (_, analytic) = eval(&w0);
        let err = grad_check(
            |t| Ok(eval(&t[0]).0),
            std::slice::from_ref(&w0),
            std::slice::from_ref(&analytic),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "relative error {err}");
    }
}
