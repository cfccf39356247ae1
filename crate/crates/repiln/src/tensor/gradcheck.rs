//! Central finite-difference gradient checking, 64-bit only.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences at step `h`. Returns the maximum over coordinates of
/// `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_multi(|tape, vars| f(tape, vars[0]), &[x.clone()], h)
}

/// Multi-input variant: the closure receives one leaf var per input tensor,
/// in order. Every input participates in the gradient check.
pub fn finite_diff_check_multi<F>(f: F, xs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::invalid("finite_diff_check", "function must be scalar-valued"));
        }
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check: loss".into()));
        }
        Ok(v)
    };

    // Analytic gradients in one pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            tape.leaf(&t)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();

    let mut worst = 0.0f64;
    let mut inputs: Vec<Tensor<f64>> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            inputs[ti].data_mut()[i] = orig + h;
            let fp = eval(&inputs)?;
            inputs[ti].data_mut()[i] = orig - h;
            let fm = eval(&inputs)?;
            inputs[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("finite_diff_check: numeric gradient".into()));
            }
            let a = analytic[ti][i];
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        // f(x) = sum x^2 (as mean * n); exact for quadratics up to rounding.
        let x = Tensor::from_f64s(vec![2], &[1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                let m = tape.mean_all(sq)?;
                tape.scale(m, 2.0)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {}", err);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64s(vec![3], &[1.0, -1.0, 0.5]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let z = tape.scale(v, 0.0)?;
                tape.mean_all(z)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn conv_softmax_mse_composite() {
        let x = Tensor::from_f64s(vec![2, 6], &[0.3, -0.7, 1.2, 0.1, -0.2, 0.9, 0.6, -1.1, 0.4, 0.8, -0.5, 0.2])
            .unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let w = tape.constant(
                    Tensor::from_f64s(
                        vec![2, 2, 3],
                        &[0.5, -0.2, 0.1, 0.3, 0.4, -0.6, -0.1, 0.2, 0.7, 0.05, -0.3, 0.9],
                    )
                    .unwrap(),
                );
                let b = tape.constant(Tensor::from_f64s(vec![2], &[0.1, -0.1]).unwrap());
                let y = tape.conv1d(v, w, Some(b), 1, 1, 1)?;
                let s = tape.softmax_rows(y)?;
                let target = tape.constant(Tensor::from_f64s(vec![2, 6], &[0.2; 12]).unwrap());
                tape.mse_loss(s, target)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "err = {}", err);
    }

    #[test]
    fn two_conv_layers_match_finite_differences() {
        let x = Tensor::from_f64s(vec![1, 8], &[0.5, -0.3, 0.8, 0.1, -0.9, 0.4, 0.0, 0.6]).unwrap();
        let w1 = Tensor::from_f64s(vec![2, 1, 3], &[0.4, -0.1, 0.3, -0.2, 0.5, 0.1]).unwrap();
        let w2 = Tensor::from_f64s(vec![1, 2, 3], &[0.2, 0.3, -0.4, 0.6, -0.5, 0.1]).unwrap();
        let err = finite_diff_check_multi(
            |tape, vars| {
                let (x, w1, w2) = (vars[0], vars[1], vars[2]);
                let h = tape.conv1d(x, w1, None, 1, 1, 1)?;
                let y = tape.conv1d(h, w2, None, 1, 1, 1)?;
                let target = tape.constant(Tensor::zeros(vec![1, 8]));
                tape.mse_loss(y, target)
            },
            &[x, w1, w2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {}", err);
    }
}
