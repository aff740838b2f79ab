use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

/// Central-difference check of `op` (inputs → scalar) against the tape's
/// backward pass. Returns the worst relative error over every input element.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(op, inputs, eps, None, 0)
}

/// Like [`grad_check`], but probes at most `per_input` randomly chosen
/// elements of each input.
pub fn grad_check_sampled<F>(
    op: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check needs eps > 0".into()));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = op(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = match per_input {
            Some(limit) if limit < n => sample(&mut rng, n, limit).into_vec(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = input.data()[j];
            probe[k].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check closure must return a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so every
/// output element influences the checked gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(tape.shape(x), 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_f64(&[2, 3], &[0.1, -0.4, 0.9, 1.3, 0.0, -2.0]).unwrap();
        let w = Tensor::from_f64(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.25, 3.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, 3)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn wrong_backward_rule_is_detected() {
        // sum(x * stop_grad(x)): forward equals sum(x^2) but the traced
        // gradient is x instead of 2x.
        let x = Tensor::from_f64(&[3], &[0.7, -1.3, 0.5]).unwrap();
        let err = grad_check(
            |t, v| {
                let detached = t.constant(t.value(v[0]).clone());
                let sq = t.mul(v[0], detached)?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "harness failed to flag a wrong gradient: {err}");
    }
}
