//! Central finite-difference gradient checking.

use crate::{ParamStore, Real, Result, Tape, Tensor, Var};

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<T: Real, F>(f: &mut F, x: &Tensor<T>) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x);
    let out = f(&mut tape, v)?;
    Ok(tape.scalar(out).as_f64())
}

/// Central differences of a scalar tape function, one coordinate at a time.
pub fn numeric_gradient<T: Real, F>(mut f: F, x: &Tensor<T>, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + T::of(h);
        let plus = eval(&mut f, &probe)?;
        probe.values_mut()[i] = orig - T::of(h);
        let minus = eval(&mut f, &probe)?;
        probe.values_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Maximum relative error between the tape gradient of `f` at `x` and its
/// central-difference estimate with step `h`.
pub fn gradient_check<T: Real, F>(mut f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x);
    let loss = f(&mut tape, v)?;
    let grads = tape.backward(loss)?;
    let zeros = vec![T::zero(); x.numel()];
    let analytic = grads.get(v).unwrap_or(&zeros).to_vec();
    let numeric = numeric_gradient(f, x, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, &n)| relative_error(a.as_f64(), n))
        .fold(0.0, f64::max))
}

/// Like [`gradient_check`] but over every value of every tensor in a store.
/// `f` receives the bound parameter variables in store order.
pub fn gradient_check_params<T: Real, F>(mut f: F, params: &ParamStore<T>, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for id in 0..params.len() {
        let n = params.tensor(id).numel();
        let zeros = vec![T::zero(); n];
        let analytic = grads.get(vars[id]).unwrap_or(&zeros).to_vec();
        for (i, a) in analytic.into_iter().enumerate() {
            let orig = probe.tensor(id).values()[i];
            let mut side = |delta: f64, probe: &mut ParamStore<T>| -> Result<f64> {
                probe.tensor_mut(id).values_mut()[i] = orig + T::of(delta);
                let mut t = Tape::new();
                let vs = probe.bind(&mut t);
                let out = f(&mut t, &vs)?;
                Ok(t.scalar(out).as_f64())
            };
            let plus = side(h, &mut probe)?;
            let minus = side(-h, &mut probe)?;
            probe.tensor_mut(id).values_mut()[i] = orig;
            worst = worst.max(relative_error(a.as_f64(), (plus - minus) / (2.0 * h)));
        }
    }
    Ok(worst)
}
