use serde::Serialize;

use super::{assemble_batch, batch_features, regularizer_inputs};
use crate::diffmath::{finite_diff_check, Tape, Tensor, Var};
use crate::error::Result;
use crate::model::Model;
use crate::objectives::{correspondence_loss, disentanglement_loss, total_loss, LossConfig};
use crate::synthworld::Dataset;

/// Batch size of the gradient check.
pub const GRAD_CHECK_BATCH: usize = 2;
/// Central-difference step. Larger steps straddle the kinks of max and
/// abs more often; smaller ones drown small gradients in round-off.
pub const GRAD_CHECK_EPS: f64 = 1e-6;
/// Largest relative error accepted.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

/// Result of checking one loss.
#[derive(Clone, Debug, Serialize)]
pub struct LossGradCheck {
    pub loss: &'static str,
    pub value: f64,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Name of the input holding the worst coordinate and its flat index.
    pub worst: Option<(String, usize)>,
}

impl LossGradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_CHECK_TOLERANCE
    }
}

/// Compares analytic and finite-difference gradients of the correspondence,
/// disentanglement and total losses on a fixed two-sample batch drawn with
/// `seed`. Every aligner parameter and the temperature are perturbed; the
/// backbones enter as constants. The total loss has every term switched on,
/// with splicing forced so the splice term sees nonzero weights.
pub fn loss_grad_check(model: &Model, ds: &Dataset, loss: &LossConfig, seed: u64) -> Result<Vec<LossGradCheck>> {
    loss.validate()?;
    let inputs = assemble_batch(ds, seed, 0, GRAD_CHECK_BATCH, 1.0)?;
    let checked: Vec<usize> = (0..model.params().len()).filter(|&i| !model.params()[i].backbone).collect();
    let mut names: Vec<String> = checked.iter().map(|&i| model.params()[i].name.clone()).collect();
    names.push("tau".into());
    let mut values: Vec<Tensor<f64>> = checked.iter().map(|&i| model.params()[i].value.cast()).collect();
    values.push(Tensor::scalar(model.tau as f64));
    let coordinates = values.iter().map(Tensor::numel).sum();

    let full = LossConfig {
        cor_only: false,
        dis_only: false,
        ..loss.clone()
    };
    let weights = full.weights();
    let reg = {
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, false);
        let batch = batch_features(model, &mut tape, &bound, &inputs)?;
        regularizer_inputs(model, &full, seed, &inputs, &batch, 0)?
    };

    let mut out = Vec::new();
    for which in ["correspondence", "disentanglement", "total"] {
        let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
            let mut bound = model.bind::<f64>(tape, false);
            for (slot, &i) in checked.iter().enumerate() {
                bound.params[i] = vars[slot];
            }
            bound.tau = vars[checked.len()];
            let batch = batch_features(model, tape, &bound, &inputs)?;
            match which {
                "correspondence" => correspondence_loss(tape, &batch, bound.tau),
                "disentanglement" => disentanglement_loss(tape, &batch, bound.tau),
                _ => Ok(total_loss(tape, &batch, bound.tau, &weights, &reg)?.total),
            }
        };
        let value = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
            let root = f(&mut tape, &vars)?;
            tape.value(root).item()
        };
        let report = finite_diff_check(f, &values, GRAD_CHECK_EPS)?;
        out.push(LossGradCheck {
            loss: which,
            value,
            max_rel_error: report.max_rel_error,
            coordinates,
            worst: report.worst.map(|(i, k)| (names[i].clone(), k)),
        });
    }
    Ok(out)
}
