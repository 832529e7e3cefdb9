use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.value(root);
    if v.numel() != 1 {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Checks the gradient of the scalar function `f` at `inputs` against
/// central finite differences with step `eps`, everything in `f64`.
///
/// Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.value(root).item().is_finite() {
        return Err(Error::NonFinite { input: 0, index: 0 });
    }
    tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for input in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[input].shape());
        for index in 0..inputs[input].numel() {
            let x0 = inputs[input].data()[index];
            probe[input].data_mut()[index] = x0 + eps;
            let fp = evaluate(&f, &probe)?;
            probe[input].data_mut()[index] = x0 - eps;
            let fm = evaluate(&f, &probe)?;
            probe[input].data_mut()[index] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite { input, index });
            }
            let n = (fp - fm) / (2.0 * eps);
            num.data_mut()[index] = n;
            let err = relative_error(analytic[input].data()[index], n);
            if err > max_rel_error || worst.is_none() {
                max_rel_error = err.max(max_rel_error);
                worst = Some((input, index));
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
