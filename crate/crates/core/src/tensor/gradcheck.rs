//! Central-difference gradient checks in 64-bit precision.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares tape gradients of scalar `f` with respect to `inputs` against
/// `(f(x+eps·e_i) − f(x−eps·e_i)) / (2·eps)` and returns the largest relative
/// error, using `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    eval_scalar(&tape, out)?;
    let grads = tape.gradients(out)?;

    let mut eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        eval_scalar(&t, o)
    };

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let analytic = grads.get(*v).map_or(0.0, |g| g.data()[i]);
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let plus = eval(&xs)?;
            xs[k].data_mut()[i] = orig - eps;
            let minus = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic, (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Same check with respect to every trainable parameter in `store`.
///
/// Gradients already held in the store are left untouched.
pub fn grad_check_params<F>(store: &mut ParamStore<f64>, mut f: F, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    eval_scalar(&tape, out)?;
    let grads = tape.gradients(out)?;
    let mut scratch = store.clone();
    scratch.zero_grad();
    grads.accumulate_into(&mut scratch);

    let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        for i in 0..store.get(id).value.len() {
            let analytic = scratch.get(id).grad.data()[i];
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = {
                let mut t = Tape::new();
                let o = f(&mut t, store)?;
                eval_scalar(&t, o)?
            };
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = {
                let mut t = Tape::new();
                let o = f(&mut t, store)?;
                eval_scalar(&t, o)?
            };
            store.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic, (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
