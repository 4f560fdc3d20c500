use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares tape gradients against central differences.
///
/// `build` records a computation on a fresh tape from leaf variables holding
/// `inputs`. Non-scalar outputs are reduced with a fixed, non-uniform
/// weighting so that errors cannot cancel across output entries. Returns the
/// maximum over every input entry of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let weights = Tensor::from_fn(&shape, |i| 1.0 + 0.5 * (i as f64 * 0.7).sin());
        let w = tape.constant(weights);
        let weighted = tape.mul(out, w)?;
        let loss = tape.sum(weighted);
        let value = tape.value(loss).data()[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(values)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        Ok((value, g))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut perturbed = inputs.to_vec();
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            perturbed[which].data_mut()[j] = orig + eps;
            let (plus, _) = eval(&perturbed, false)?;
            perturbed[which].data_mut()[j] = orig - eps;
            let (minus, _) = eval(&perturbed, false)?;
            perturbed[which].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[which].data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
