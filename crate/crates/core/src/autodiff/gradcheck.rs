//! Central finite-difference gradient checking.

use super::param::{ParamId, ParamStore};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let out = f(&mut tape, v)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Usage("checked function must return a scalar".into()));
    }
    let y = tape.scalar(out);
    if !y.is_finite() {
        return Err(Error::Numeric(format!("function value {y} is not finite")));
    }
    Ok(y)
}

/// Largest relative error between the tape gradient of `f` at `x` and
/// central differences with step `eps`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_with_floor(f, x, eps, 1e-12)
}

pub fn finite_difference_check_with_floor<F>(f: F, x: &Tensor, eps: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(&x.clone().with_requires_grad());
        let out = f(&mut tape, v)?;
        tape.backward(out)?;
        tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()])
    };
    if let Some(bad) = analytic.iter().find(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("analytic gradient {bad} is not finite")));
    }
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric, floor));
    }
    Ok(worst)
}

/// One probed scalar of a parameter-level check.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Checks selected scalar parameters of a whole model.
///
/// `loss` builds a fresh tape from the store and returns the scalar loss
/// node; it is called once for the analytic gradient and twice per probe.
pub fn check_params<F>(
    store: &mut ParamStore,
    probes: &[(ParamId, usize)],
    eps: f64,
    floor: f64,
    loss: F,
) -> Result<Vec<ParamProbe>>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let (mut tape, out) = loss(store)?;
    tape.backward(out)?;
    let grads: Vec<(ParamId, Vec<f64>)> = tape.param_grads().map(|(id, g)| (id, g.to_vec())).collect();
    let mut report = Vec::with_capacity(probes.len());
    for &(id, index) in probes {
        let analytic = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map_or(0.0, |(_, g)| g[index]);
        let orig = store.get(id).tensor.data()[index];
        store.get_mut(id).tensor.data_mut()[index] = orig + eps;
        let (t_up, v_up) = loss(store)?;
        store.get_mut(id).tensor.data_mut()[index] = orig - eps;
        let (t_down, v_down) = loss(store)?;
        store.get_mut(id).tensor.data_mut()[index] = orig;
        let numeric = (t_up.scalar(v_up) - t_down.scalar(v_down)) / (2.0 * eps);
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {}[{index}]",
                store.get(id).name
            )));
        }
        report.push(ParamProbe {
            param: store.get(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, floor),
        });
    }
    Ok(report)
}
