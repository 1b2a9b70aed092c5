//! Central finite-difference checks against the reverse-mode gradients.

use super::params::{Graph, ParamStore};
use super::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape, loss: Var) -> Result<f64> {
    let t = tape.value(loss);
    if !t.is_scalar() {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Max relative error between `backward` and `(f(x+h) − f(x−h)) / 2h` over
/// every element of every input. `f` must build a scalar from its leaves.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    scalar_of(&tape, loss)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).unwrap())
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.var(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        scalar_of(&tape, loss)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i].data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Same check over every trainable parameter of `store`, with the forward
/// pass built by `f` on an inference graph (no dropout).
pub fn grad_check_params<F>(store: &ParamStore, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut g = Graph::eval(store);
    let loss = f(&mut g)?;
    scalar_of(&g.tape, loss)?;
    let mut grads = g.tape.backward(loss)?;
    let analytic = g.param_grads(&mut grads);
    drop(g);

    let mut work = store.clone();
    let mut worst = 0.0f64;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::eval(s);
        let loss = f(&mut g)?;
        scalar_of(&g.tape, loss)
    };
    for id in store.trainable() {
        let grad = analytic.iter().find(|(pid, _)| *pid == id).map(|(_, t)| t);
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            work.get_mut(id).value_mut().data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).value_mut().data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).value_mut().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.map_or(0.0, |t| t.data()[k]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
