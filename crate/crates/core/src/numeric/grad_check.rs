use crate::error::{Error, Result};
use crate::numeric::tape::{Tape, Var};
use crate::numeric::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub value: f64,
    pub analytic: Vec<Tensor<f64>>,
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(Tape<f64>, Var, Vec<Var>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut tape, &vars)?;
    if tape.value(root).len() != 1 {
        return Err(Error::dim("grad_check", "function must return a scalar"));
    }
    Ok((tape, root, vars))
}

/// Checks reverse-mode gradients of a scalar function of `params` against
/// central finite differences with step `eps`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, root, vars) = evaluate(&f, params)?;
    let value = tape.value(root).item();
    let mut grads = tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let probe = |perturbed: &[Tensor<f64>], at: (usize, usize)| -> Result<f64> {
        let (tape, root, _) = evaluate(&f, perturbed).map_err(|e| {
            Error::Numeric(format!("oracle failed at param {} coordinate {}: {e}", at.0, at.1))
        })?;
        let v = tape.value(root).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "oracle produced {v} at param {} coordinate {}",
                at.0, at.1
            )));
        }
        Ok(v)
    };

    let mut work = params.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for pi in 0..params.len() {
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let up = probe(&work, (pi, ci))?;
            work[pi].data_mut()[ci] = orig - eps;
            let down = probe(&work, (pi, ci))?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[pi].data()[ci] - numeric).abs() / numeric.abs().max(1.0);
            if err > max_rel_error || worst.is_none() {
                max_rel_error = err.max(max_rel_error);
                worst = Some((pi, ci));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        value,
        analytic,
    })
}
