//! Central finite-difference checks against tape gradients.

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Relative error with a small absolute floor on the denominator so that
/// near-zero gradient entries are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-2);
    (analytic - numeric).abs() / denom
}

/// Compare `d build / d inputs` from the tape with central differences.
///
/// `build` must produce a scalar. Returns the largest relative error over all
/// input coordinates.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[k] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Per-parameter result of [`check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

/// Finite-difference check of parameter gradients.
///
/// At most `coords_per_param` evenly spaced coordinates of each tensor are
/// perturbed.
pub fn check_params<F>(
    store: &ParamStore,
    step: f64,
    coords_per_param: usize,
    build: F,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    tape.backward(out)?;

    let mut probe = store.clone();
    let mut reports = Vec::new();
    for (id, p) in store.iter() {
        let analytic = tape
            .param_var(id)
            .and_then(|v| tape.grad(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let n = p.value.len();
        let stride = n.div_ceil(coords_per_param.max(1)).max(1);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for k in (0..n).step_by(stride) {
            let orig = p.value.data()[k];
            probe.value_mut(id).data_mut()[k] = orig + step;
            let plus = eval_store(&probe, &build)?;
            probe.value_mut(id).data_mut()[k] = orig - step;
            let minus = eval_store(&probe, &build)?;
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
            checked += 1;
        }
        reports.push(ParamCheck {
            id,
            name: p.name.clone(),
            coords_checked: checked,
            max_rel_err: worst,
        });
    }
    Ok(reports)
}

fn eval_store<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    Ok(tape.value(out).item())
}
