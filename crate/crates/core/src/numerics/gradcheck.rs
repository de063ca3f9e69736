use super::{Matrix, ParameterStore, Tape, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of `f` with central differences.
///
/// `f` records a scalar loss on a fresh tape from the current parameter
/// values. Returns the largest `|analytic − numeric| / max(1, |analytic|,
/// |numeric|)` over every trainable coordinate. `f` must be deterministic:
/// two evaluations at the unperturbed point that disagree are a usage error.
pub fn gradient_check<F>(store: &mut ParameterStore, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&ParameterStore, &mut Tape) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::precondition(format!(
            "eps must be positive, got {eps}"
        )));
    }
    fn eval<F>(f: &mut F, store: &ParameterStore) -> Result<f64>
    where
        F: FnMut(&ParameterStore, &mut Tape) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        Ok(tape.scalar(loss))
    }

    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let base = tape.scalar(loss);
    tape.backward(loss, store)?;
    let analytic: Vec<Matrix> = store.ids().map(|id| store.grad(id).clone()).collect();

    let again = eval(&mut f, store)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::usage(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let ids: Vec<_> = store.trainable_ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).as_slice()[k];
            store.value_mut(id).as_mut_slice()[k] = orig + eps;
            let plus = eval(&mut f, store)?;
            store.value_mut(id).as_mut_slice()[k] = orig - eps;
            let minus = eval(&mut f, store)?;
            store.value_mut(id).as_mut_slice()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[id.index()].as_slice()[k];
            let err = (exact - numeric).abs() / 1f64.max(exact.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
