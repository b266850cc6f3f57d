//! Central finite-difference gradient checking.
//!
//! The numerical side evaluates the forward pass only, on fresh tapes with
//! perturbed constants, so it never touches the reverse-mode code it checks.

use rand::seq::index::sample;
use rand::Rng;

use super::{ParamStore, Tape, Tensor, TensorError, Var};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every entry of every input.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.scalar(l))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let x0 = work[k].data[i];
            work[k].data[i] = x0 + FD_STEP;
            let up = eval(&work)?;
            work[k].data[i] = x0 - FD_STEP;
            let down = eval(&work)?;
            work[k].data[i] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}

/// Per-parameter outcome of [`check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compares parameter gradients of the scalar built by `f` against central
/// differences on up to `per_param` randomly chosen entries of each
/// parameter (all entries when `None`).
pub fn check_params<F, R>(
    store: &mut ParamStore,
    per_param: Option<usize>,
    rng: &mut R,
    f: F,
) -> Result<Vec<ParamCheck>, TensorError>
where
    F: Fn(&mut Tape) -> Result<Var, TensorError>,
    R: Rng,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?;
        tape.into_param_grads()
    };

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).tensor.numel();
        let entries: Vec<usize> = match per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut worst = 0.0f64;
        for &i in &entries {
            let x0 = store.get(id).tensor.data[i];
            store.get_mut(id).tensor.data[i] = x0 + FD_STEP;
            let up = eval_scalar(store, &f)?;
            store.get_mut(id).tensor.data[i] = x0 - FD_STEP;
            let down = eval_scalar(store, &f)?;
            store.get_mut(id).tensor.data[i] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[i], numeric));
        }
        report.push(ParamCheck {
            name: store.get(id).name.clone(),
            checked: entries.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

fn eval_scalar<F>(store: &ParamStore, f: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape) -> Result<Var, TensorError>,
{
    let mut tape = Tape::with_params(store);
    let l = f(&mut tape)?;
    Ok(tape.scalar(l))
}
