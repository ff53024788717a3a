use super::{Result, Tape, Tensor, TensorError, Var};

/// Gradients smaller than this are compared on an absolute scale.
///
/// Without a floor, coordinates whose true gradient is zero turn central
/// difference round-off (≈ 1e-11 · |f|) into relative errors near 1.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `|analytic − numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+εe) − f(x−εe)) / 2ε` at every coordinate of `x` and
/// returns the largest [`relative_error`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(TensorError::Invalid(format!("eps must lie in (0, 1e-3], got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(TensorError::Invalid(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    if !value.item().is_finite() {
        return Err(TensorError::NonFinite("f(x)".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(probe);
        let out = f(&mut tape, v)?;
        let y = tape.value(out).item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(TensorError::NonFinite("f at perturbed point".into()))
        }
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, 0.25]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap().get(v).unwrap();
        assert!(g.data().iter().all(|&e| e == 1.0));
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sum_of_squares_is_tight() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let row = t.reshape(v, &[1, 2])?;
                let col = t.transpose(row)?;
                let sq = t.matmul(row, col)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 1e-2).is_err());
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::scalar(1.0);
        let err = grad_check(
            |t, v| {
                let s = t.sum(v);
                let nan = t.constant(Tensor::scalar(f64::NAN));
                t.add(s, nan)
            },
            &x,
            1e-5,
        );
        assert!(matches!(err, Err(TensorError::NonFinite(_))), "{err:?}");
    }
}
