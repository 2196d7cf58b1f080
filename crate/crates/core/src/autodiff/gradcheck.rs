use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

/// Evaluates `f` at `point` on a fresh tape; returns the scalar loss and,
/// when `with_grad`, its gradient with respect to `point`.
fn eval<F>(f: &F, point: &Tensor, with_grad: bool) -> Result<(f64, Option<Tensor>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), with_grad);
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(y)
        )));
    }
    let value = tape.value(y).item();
    let grad = if with_grad {
        Some(tape.backward(y)?.wrt(x))
    } else {
        None
    };
    Ok((value, grad))
}

/// Max over all coordinates of `|analytic - central difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, h, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("step must be positive, got {h}")));
    }
    let (_, grad) = eval(&f, point, true)?;
    let grad = grad.expect("requested");
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let (fp, _) = eval(&f, &plus, false)?;
        let (fm, _) = eval(&f, &minus, false)?;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad.data()[i];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
    }
    Ok(worst)
}
