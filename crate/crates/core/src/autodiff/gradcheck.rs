use super::{Tape, Tensor, Var};
use crate::Result;

/// Denominator floor of [`relative_error`]. Finite differences in f64 resolve
/// gradients to roughly 1e-11 absolute, so smaller magnitudes are compared on
/// this scale instead of relatively.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, GRADIENT_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADIENT_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against the
/// five-point central difference
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h` over every input coordinate.
///
/// `f` builds the loss on a fresh tape from the given input handles.
/// Returns the maximum relative error.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.param(x.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (t, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("input requires grad").data().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let x0 = inputs[t].data()[k];
            let mut at = |d: f64| -> Result<f64> {
                probe[t].data_mut()[k] = x0 + d;
                eval(&probe)
            };
            let (f1, f_1, f2, f_2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe[t].data_mut()[k] = x0;
            let numeric = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * h);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
