use crate::{AutodiffError, ParamVector, Result, Tape, Tensor, Var};

/// Pins a closure to the higher-ranked signature the differentiation entry
/// points expect, so it can be bound to a variable and reused.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    f
}

/// Evaluates `f` at `params` without a reverse pass.
pub fn eval<F>(f: F, params: &ParamVector) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars);
    scalar_output(&tape, out)
}

fn scalar_output(tape: &Tape, out: Var<'_>) -> Result<f64> {
    if let Some(primitive) = tape.poisoned() {
        return Err(AutodiffError::Numeric { primitive });
    }
    let shape = out.shape();
    if shape.iter().product::<usize>() != 1 {
        return Err(AutodiffError::Contract(format!(
            "differentiated function must return a scalar, got shape {shape:?}"
        )));
    }
    Ok(out.item())
}

/// Value and exact reverse-mode gradient of a scalar function of `params`.
///
/// `f` receives one leaf per parameter tensor, in canonical order. The
/// returned gradient has the same names, shapes and order as `params`.
pub fn value_and_grad<F>(f: F, params: &ParamVector) -> Result<(f64, ParamVector)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let value = scalar_output(&tape, out)?;
    let mut grads = tape.backward(out);
    if let Some(primitive) = tape.check_grads(&grads) {
        return Err(AutodiffError::Numeric { primitive });
    }
    let mut result = params.zeros_like();
    for (i, v) in vars.iter().enumerate() {
        if let Some(g) = grads[v.id()].take() {
            result.tensor_mut(i).data_mut().copy_from_slice(&g);
        }
    }
    Ok((value, result))
}

/// Central-difference gradient `(f(p+h·eᵢ) − f(p−h·eᵢ)) / 2h` per coordinate.
/// Truncation error is O(h²).
pub fn finite_diff_grad<F>(f: F, params: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    stencil_grad(f, params, h, &[(1.0, 0.5)])
}

/// Five-point central difference
/// `(−f(p+2h) + 8f(p+h) − 8f(p−h) + f(p−2h)) / 12h` per coordinate.
/// Truncation error is O(h⁴), for checks tighter than the two-point stencil
/// resolves on strongly curved objectives.
pub fn finite_diff_grad5<F>(f: F, params: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    stencil_grad(f, params, h, &[(1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)])
}

/// `Σₖ wₖ (f(p+oₖh·eᵢ) − f(p−oₖh·eᵢ)) / h` for `(oₖ, wₖ)` in `taps`.
fn stencil_grad<F>(f: F, params: &ParamVector, h: f64, taps: &[(f64, f64)]) -> Result<ParamVector>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if !(h > 0.0) {
        return Err(AutodiffError::Argument(format!("step size must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut result = params.zeros_like();
    for i in 0..params.len() {
        for j in 0..params.tensor(i).len() {
            let orig = params.tensor(i).data()[j];
            let mut acc = 0.0;
            for &(offset, weight) in taps {
                probe.tensor_mut(i).data_mut()[j] = orig + offset * h;
                let up = eval(&f, &probe)?;
                probe.tensor_mut(i).data_mut()[j] = orig - offset * h;
                let down = eval(&f, &probe)?;
                acc += weight * (up - down);
            }
            probe.tensor_mut(i).data_mut()[j] = orig;
            result.tensor_mut(i).data_mut()[j] = acc / h;
        }
    }
    Ok(result)
}

/// Largest coordinate-wise relative error `|a−b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    assert!(a.same_layout(b), "gradient layouts differ");
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Convenience: single-tensor parameter vector named `p`.
pub fn single(t: Tensor) -> ParamVector {
    let mut p = ParamVector::new();
    p.register("p", t).expect("fresh vector");
    p
}
