//! Central-difference oracle for gradient checking.

use crate::error::{Error, Result};


use super::eval::{evaluate, Bindings};
use super::expr::{Expr, Op};
use super::grad::gradient;

/// Compare the reverse-mode gradient of `scalar` with central finite
/// differences at the bound value of `var`, returning the worst error over
/// all components, relative to the gradient's scale:
///
/// `max_i |g_i − fd_i| / max(‖g‖∞, ‖fd‖∞, 1e-3)`.
///
/// Measuring against the ∞-norm keeps the check sharp for every component
/// an incorrect adjoint rule could corrupt, while staying immune to f32
/// round-off on components that are orders of magnitude below the
/// gradient's scale. Differences are accumulated in `f64` even though the
/// graph evaluates in `f32`.
///
/// The expression must be smooth at the evaluation point: no `relu`,
/// `sign`, or `clamp` boundary within `h` of any perturbed component.
pub fn finite_diff_check(
    scalar: &Expr,
    var: &Expr,
    bindings: &Bindings,
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Config(format!("step h must be positive, got {h}")));
    }
    let Op::Var { name } = &var.0.op else {
        return Err(Error::Config(
            "finite_diff_check differentiates with respect to a variable".into(),
        ));
    };
    let base = bindings
        .get(name)
        .ok_or_else(|| Error::UnboundVariable(name.clone()))?
        .clone();

    let grad_expr = gradient(scalar, &[var.clone()])?.pop().unwrap();
    let grad = evaluate(&grad_expr, bindings)?;

    let mut fd_values = Vec::with_capacity(base.numel());
    for i in 0..base.numel() {
        let probe = |shifted_value: f32| -> Result<f64> {
            let mut shifted = base.clone();
            shifted.data_mut()[i] = shifted_value;
            let mut b = bindings.clone();
            b.insert(name.clone(), shifted);
            Ok(evaluate(scalar, &b)?.scalar_value() as f64)
        };
        // The probe points are rounded to f32, so divide by the step the
        // evaluation actually saw rather than the nominal 2h.
        let x_plus = (base.data()[i] as f64 + h) as f32;
        let x_minus = (base.data()[i] as f64 - h) as f32;
        fd_values.push((probe(x_plus)? - probe(x_minus)?) / (x_plus as f64 - x_minus as f64));
    }

    let g_scale = grad.data().iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
    let fd_scale = fd_values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let denom = g_scale.max(fd_scale).max(1e-3);
    let worst = grad
        .data()
        .iter()
        .zip(&fd_values)
        .fold(0.0f64, |m, (&g, &fd)| m.max((g as f64 - fd).abs()));
    Ok(worst / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_in_five_variables() {
        // f(x) = sum(x ⊙ x ⊙ c) — smooth everywhere, and central differences
        // are exact for quadratics, so the check isolates round-off.
        let x = Expr::var("x", &[5]);
        let c = Expr::constant(Tensor::new(vec![5], vec![1.0, -1.0, 2.0, -2.0, 0.5]).unwrap());
        let f = x.mul(&x).unwrap().mul(&c).unwrap().sum();
        let b = Bindings::new().bind(
            "x",
            Tensor::new(vec![5], vec![1.0, 1.0, 0.7, 0.7, 0.2]).unwrap(),
        );
        let err = finite_diff_check(&f, &x, &b, 1e-3).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn linear_function_is_exact_for_central_differences() {
        let x = Expr::var("x", &[4]);
        let w = Expr::constant(Tensor::new(vec![4], vec![2.0, -3.0, 0.5, 1.0]).unwrap());
        let f = x.mul(&w).unwrap().sum();
        let b = Bindings::new().bind(
            "x",
            Tensor::new(vec![4], vec![0.1, 0.2, -0.4, 0.8]).unwrap(),
        );
        for h in [1e-1, 1e-2, 1e-3] {
            let err = finite_diff_check(&f, &x, &b, h).unwrap();
            assert!(err < 1e-3, "h={h}: relative error {err}");
        }
    }

    #[test]
    fn rejects_non_variable_target() {
        let x = Expr::var("x", &[]);
        let y = x.scale(2.0);
        let f = y.mul(&y).unwrap();
        let b = Bindings::new().bind("x", Tensor::scalar(1.0));
        assert!(finite_diff_check(&f, &y, &b, 1e-3).is_err());
    }
}
