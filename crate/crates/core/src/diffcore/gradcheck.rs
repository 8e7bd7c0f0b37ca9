use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare the tape gradient of scalar function `f` at `x` with central
/// differences. Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .take_grad(xv)
        .ok_or_else(|| Error::contract("grad_check: input received no gradient"))?;
    let eval = |p: &Tensor| -> Result<f32> {
        let mut t = Tape::new();
        let v = t.constant(p.clone());
        let out = f(&mut t, v)?;
        t.value(out)?.item()
    };
    compare_gradient(&analytic, eval, x, eps)
}

/// Central-difference comparison against an arbitrary claimed gradient.
pub fn compare_gradient(analytic: &Tensor, f: impl Fn(&Tensor) -> Result<f32>, x: &Tensor, eps: f32) -> Result<f32> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract(format!(
            "grad_check: eps must lie in (0, 1e-2], got {eps}"
        )));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::dim(format!(
            "grad_check: gradient {:?} vs input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f32;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)? as f64;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)? as f64;
        probe.data_mut()[i] = orig;
        // Use the perturbation actually representable in f32.
        let h = ((orig + eps) as f64) - ((orig - eps) as f64);
        let numeric = (plus - minus) / h;
        let a = analytic.data()[i] as f64;
        let err = ((a - numeric).abs() / a.abs().max(1.0)) as f32;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> Tensor {
        Tensor::new(&[6], vec![0.3, -0.7, 1.2, -1.5, 0.05, 0.9]).unwrap()
    }

    #[test]
    fn identity_sum_is_exact() {
        let err = grad_check(|t, x| t.sum(x), &probe(), 1e-3).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn tanh_passes() {
        let err = grad_check(
            |t, x| {
                let y = t.tanh(x)?;
                t.sum(y)
            },
            &probe(),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn doubled_gradient_is_detected() {
        let x = probe();
        let wrong = Tensor::new(x.shape(), x.data().iter().map(|v| 2.0 * 2.0 * v).collect()).unwrap();
        // f = Σ x², true gradient 2x; claimed 4x.
        let f = |p: &Tensor| Ok(p.data().iter().map(|v| v * v).sum::<f32>());
        let err = compare_gradient(&wrong, f, &x, 1e-3).unwrap();
        assert!(err > 0.5, "{err}");
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        assert!(grad_check(|t, x| t.sum(x), &probe(), 0.1).is_err());
        assert!(grad_check(|t, x| t.sum(x), &probe(), 0.0).is_err());
    }
}
