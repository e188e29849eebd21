//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max over checked entries of `|autodiff - fd| / max(1, |fd|)`.
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Per-parameter maxima, `None` for frozen parameters.
    pub per_param: Vec<Option<f64>>,
}

/// Compares reverse-mode gradients with central differences.
///
/// `f` builds a scalar loss on a fresh tape from one [`Var`] per entry in
/// `params`; entries flagged `false` in `learnable` are registered as
/// constants and left out of the report.
pub fn grad_check<F>(f: F, params: &[Tensor], learnable: &[bool], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("step must be > 0, got {step}")));
    }
    if learnable.len() != params.len() {
        return Err(Error::dim(
            "grad_check",
            format!("{} flags for {} params", learnable.len(), params.len()),
        ));
    }
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .zip(learnable)
            .map(|(t, &l)| {
                if l {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let scalar = |tape: &Tape, loss: Var| -> Result<f64> {
        tape.value(loss)
            .item()
            .ok_or_else(|| Error::Contract("grad_check loss is not scalar".into()))
    };

    let (tape, vars, loss) = eval(params)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (p, &is_learnable) in learnable.iter().enumerate() {
        if !is_learnable {
            per_param.push(None);
            continue;
        }
        let analytic = grads
            .get(vars[p])
            .ok_or_else(|| Error::Contract(format!("no gradient for param {p}")))?
            .clone();
        let mut worst: f64 = 0.0;
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let (t, _, l) = eval(&work)?;
            let plus = scalar(&t, l)?;
            work[p].data_mut()[i] = orig - step;
            let (t, _, l) = eval(&work)?;
            let minus = scalar(&t, l)?;
            work[p].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.push(Some(worst));
    }
    Ok(GradCheck {
        max_rel_err,
        checked,
        per_param,
    })
}
