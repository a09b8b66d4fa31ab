use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` builds the function on the supplied tape from one variable per entry
/// of `params`. Returns the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)` over every
/// parameter entry.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(TensorError::arg("grad_check", format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor], which: (usize, usize)| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = values.iter().map(|p| t.param(p.clone())).collect();
        let out = f(&mut t, &vs).map_err(|e| TensorError::Numeric {
            op: "grad_check",
            msg: format!("parameter {} entry {}: {e}", which.0, which.1),
        })?;
        let v = t.value(out).item();
        if !v.is_finite() {
            return Err(TensorError::Numeric {
                op: "grad_check",
                msg: format!("non-finite value perturbing parameter {} entry {}", which.0, which.1),
            });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params[p].shape()));
        for j in 0..params[p].numel() {
            let orig = params[p].data()[j];
            work[p].data_mut()[j] = orig + step;
            let up = eval(&work, (p, j))?;
            work[p].data_mut()[j] = orig - step;
            let down = eval(&work, (p, j))?;
            work[p].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
