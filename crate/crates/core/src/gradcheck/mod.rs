//! Central finite-difference verification of the tape's analytic gradients.
//!
//! The error measure is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`:
//! relative for ordinary gradients, absolute for entries close to zero where
//! finite-difference round-off dominates.

mod suite;

pub use suite::{run_suite, OpCheck, SuiteOptions, SuiteReport, REGISTERED_OPS, TOLERANCE};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-3;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape")
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Checks a scalar-valued function of several inputs. Returns the largest
/// error over every input element.
pub fn check_scalar<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(contract_err!("gradcheck function must return a scalar"));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Checks a tensor-valued op by projecting its output onto fixed random
/// weights, which exercises every output coordinate.
pub fn check_op<F>(inputs: &[Tensor], f: F, rng: &mut ChaCha8Rng) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let weights = random_tensor(rng, &shape);
    check_scalar(inputs, |tape, vars| {
        let out = f(tape, vars)?;
        let w = tape.constant(weights.clone());
        let p = tape.mul(out, w)?;
        tape.sum(p)
    })
}
