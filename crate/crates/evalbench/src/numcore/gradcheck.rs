use super::{GradTape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Compares tape gradients of `f` at `point` with central differences.
///
/// `f` records a scalar-valued computation of its single input onto the
/// tape. Returns `max_i |g_i − fd_i| / max(1, |g_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(invalid("grad_check: eps must be positive"));
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = GradTape::new();
        let x = tape.leaf(p.clone());
        let y = f(&mut tape, x)?;
        let v = tape.scalar_value(y);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut tape = GradTape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.get(x);
    if !analytic.is_all_finite() {
        return Err(Error::NonFinite("grad_check gradient".into()));
    }

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = grad_check(|t, x| Ok(t.square(x)), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn abs_kink_is_flagged() {
        let err = grad_check(|t, x| Ok(t.abs(x)), &Tensor::scalar(0.0), 1e-5).unwrap();
        assert!(err > 1e-5, "{err}");
    }

    #[test]
    fn log_of_negative_is_an_error() {
        let r = grad_check(|t, x| Ok(t.log(x)), &Tensor::scalar(1e-7), 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_non_positive_eps() {
        assert!(grad_check(|t, x| Ok(t.square(x)), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
