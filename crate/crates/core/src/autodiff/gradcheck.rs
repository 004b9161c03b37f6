use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate(store: &ParamStore, forward: &impl Fn(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new(store);
    let loss = forward(&mut tape)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::InvalidArgument(
            "grad_check forward must return a scalar".into(),
        ));
    }
    Ok(v.item())
}

/// Compares tape gradients with central differences `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// `per_param` caps how many elements of each parameter are probed (evenly
/// strided); `None` probes every element.
pub fn grad_check(
    store: &mut ParamStore,
    forward: impl Fn(&mut Tape) -> Result<Var>,
    epsilon: f64,
    per_param: Option<usize>,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let (loss, grads) = {
        let mut tape = Tape::new(store);
        let loss = forward(&mut tape)?;
        let value = tape.value(loss).item();
        (value, tape.backward(loss)?)
    };
    let again = evaluate(store, &forward)?;
    if again.to_bits() != loss.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations gave {loss:e} and {again:e}"
        )));
    }

    let mut params = Vec::with_capacity(store.len());
    for idx in 0..store.len() {
        let id = super::ParamId(idx);
        let analytic = grads.dense(store, id);
        let n = analytic.len();
        let stride = match per_param {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for e in (0..n).step_by(stride) {
            let original = store.value(id).data()[e];
            store.get_mut(id).value.data_mut()[e] = original + epsilon;
            let plus = evaluate(store, &forward);
            store.get_mut(id).value.data_mut()[e] = original - epsilon;
            let minus = evaluate(store, &forward);
            store.get_mut(id).value.data_mut()[e] = original;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let a = analytic.data()[e];
            check.checked += 1;
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        epsilon,
        loss,
        params,
    })
}
