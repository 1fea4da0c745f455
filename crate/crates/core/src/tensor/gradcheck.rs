use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: for<'t> Fn(&mut Tape<'t, T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0].to_f64().unwrap_or(f64::NAN))
}

fn autodiff<T, F>(f: &F, inputs: &[Tensor<T>], fault: bool) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: for<'t> Fn(&mut Tape<'t, T>, &[Var]) -> Result<Var>,
{
    let mut tape = if fault {
        Tape::new().with_fault_injection()
    } else {
        Tape::new()
    };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.to_f64_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect())
}

fn central_differences<U, G>(g: &G, inputs: &[Tensor<U>], eps: f64) -> Result<Vec<Vec<f64>>>
where
    U: Scalar,
    G: for<'t> Fn(&mut Tape<'t, U>, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut numeric = Vec::with_capacity(inputs[k].numel());
        for e in 0..inputs[k].numel() {
            let orig = work[k].data()[e];
            let step = U::from_f64_lossy(eps);
            work[k].data_mut()[e] = orig + step;
            let plus = evaluate(g, &work)?;
            work[k].data_mut()[e] = orig - step;
            let minus = evaluate(g, &work)?;
            work[k].data_mut()[e] = orig;
            // divide by the step actually taken in U
            let taken = ((orig + step) - (orig - step)).to_f64().unwrap();
            numeric.push((plus - minus) / taken);
        }
        out.push(numeric);
    }
    Ok(out)
}

fn max_errors(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> Vec<f64> {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            a.iter()
                .zip(n)
                .map(|(&a, &n)| relative_error(a, n))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every
/// element of every input. Returns the max relative error per input.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<Vec<f64>>
where
    T: Scalar,
    F: for<'t> Fn(&mut Tape<'t, T>, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(f, inputs, eps, false)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: for<'t> Fn(&mut Tape<'t, T>, Var) -> Result<Var>,
{
    let errs = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// Tape gradient of `f` (in `T`, typically `f32`) against central
/// differences of `reference`, the same function evaluated in `f64`.
///
/// Finite differences taken in single precision are dominated by rounding,
/// so the numeric side always runs in double precision. `fault` skews the
/// analytic backward pass to prove the check can fail.
pub fn grad_check_reference<T, F, G>(
    f: F,
    reference: G,
    inputs: &[Tensor<T>],
    eps: f64,
    fault: bool,
) -> Result<Vec<f64>>
where
    T: Scalar,
    F: for<'t> Fn(&mut Tape<'t, T>, &[Var]) -> Result<Var>,
    G: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let analytic = autodiff(&f, inputs, fault)?;
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let numeric = central_differences(&reference, &wide, eps)?;
    Ok(max_errors(&analytic, &numeric))
}

/// Like [`grad_check_reference`], but scores the gradient of all inputs
/// together as one flattened vector:
/// `||a - n|| / max(||a||, ||n||, 1e-8)`.
///
/// Single-precision rounding puts an absolute error of roughly
/// `1e-7 * |activations|` on every gradient element, which swamps the
/// elementwise ratio for entries that happen to be nearly zero. The norm
/// is dominated by the entries that carry the gradient and still exposes
/// any systematic error in a backward rule.
pub fn grad_check_reference_norm<T, F, G>(
    f: F,
    reference: G,
    inputs: &[Tensor<T>],
    eps: f64,
    fault: bool,
) -> Result<f64>
where
    T: Scalar,
    F: for<'t> Fn(&mut Tape<'t, T>, &[Var]) -> Result<Var>,
    G: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let analytic = autodiff(&f, inputs, fault)?;
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let numeric = central_differences(&reference, &wide, eps)?;
    Ok(norm_relative_error(&analytic.concat(), &numeric.concat()))
}

/// `||a - n|| / max(||a||, ||n||, 1e-8)` in the Euclidean norm.
pub fn norm_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Tape gradient of a scalar function of several inputs, widened to f64.
pub(crate) fn analytic_gradients<T, F>(f: F, inputs: &[Tensor<T>]) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: for<'t> Fn(&mut Tape<'t, T>, &[Var]) -> Result<Var>,
{
    autodiff(&f, inputs, false)
}

/// [`grad_check_many`] with an optional skewed backward pass.
pub(crate) fn grad_check_with_fault<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    fault: bool,
) -> Result<Vec<f64>>
where
    T: Scalar,
    F: for<'t> Fn(&mut Tape<'t, T>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let analytic = autodiff(&f, inputs, fault)?;
    let numeric = central_differences(&f, inputs, eps)?;
    Ok(max_errors(&analytic, &numeric))
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("finite-difference step {eps} must be positive")))
    }
}
