//! The full finite-difference suite: every differentiable op on the tape,
//! then a complete gated block with frozen Gumbel noise on both the relaxed
//! and the straight-through path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{check_op, check_scalar, random_tensor, rel_err, STEP};
use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, Result};
use crate::gating::{gumbel_noise, CostMode};
use crate::tensor::Tensor;

/// Every op with a backward pass, by the name it records on the tape.
pub const REGISTERED_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "relu",
    "exp",
    "log",
    "scale",
    "sum",
    "reshape",
    "matmul",
    "linear",
    "conv2d",
    "batch_norm",
    "batch_norm_eval",
    "global_avg_pool",
    "temporal_shift",
    "previous_frame",
    "concat_cols",
    "frame_mean",
    "cross_entropy",
    "gumbel_softmax",
    "gate_mix",
    "relaxed_block_cost",
];

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<OpCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed()).map(|c| c.op.as_str()).collect()
    }

    /// One `op  error  PASS|FAIL` line per check.
    pub fn render(&self) -> String {
        let width = self.checks.iter().map(|c| c.op.len()).max().unwrap_or(0);
        self.checks
            .iter()
            .map(|c| {
                let verdict = if c.passed() { "PASS" } else { "FAIL" };
                format!("{:<width$}  {:.3e}  {verdict}\n", c.op, c.max_rel_err)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Swap in a convolution with a deliberately wrong backward pass, to
    /// show that the suite catches it.
    pub corrupt_conv: bool,
}

type Conv = fn(&mut Tape, Var, Var, Var, usize, usize) -> Result<Var>;

fn conv_fn(corrupt: bool) -> Conv {
    if corrupt {
        |t, x, w, b, s, p| t.conv2d_corrupted(x, w, b, s, p)
    } else {
        |t, x, w, b, s, p| t.conv2d(x, w, b, s, p)
    }
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = 0.5 + v.abs());
    t
}

/// Soft gate rows: each row a probability vector.
fn simplex_rows(rng: &mut ChaCha8Rng, rows: usize) -> Tensor {
    let mut t = positive(rng, &[rows, 3]);
    for r in t.data_mut().chunks_mut(3) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    t
}

pub fn run_suite(opts: SuiteOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let conv = conv_fn(opts.corrupt_conv);
    let r = &mut rng;
    let mut checks: Vec<(&str, f64)> = Vec::new();

    let (a, b) = (random_tensor(r, &[3, 4]), random_tensor(r, &[3, 4]));
    checks.push(("add", check_op(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), r)?));
    checks.push(("sub", check_op(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), r)?));
    checks.push(("mul", check_op(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), r)?));
    // Keep inputs away from the kink, where central differences straddle it.
    let mut kinked = random_tensor(r, &[3, 4]);
    kinked.data_mut().iter_mut().for_each(|v| *v += v.signum() * 0.1);
    checks.push(("relu", check_op(&[kinked], |t, v| t.relu(v[0]), r)?));
    checks.push(("exp", check_op(std::slice::from_ref(&a), |t, v| t.exp(v[0]), r)?));
    checks.push(("log", check_op(&[positive(r, &[3, 4])], |t, v| t.log(v[0]), r)?));
    checks.push(("scale", check_op(std::slice::from_ref(&a), |t, v| t.scale(v[0], -1.7), r)?));
    checks.push(("sum", check_scalar(std::slice::from_ref(&a), |t, v| t.sum(v[0]))?));
    checks.push(("reshape", check_op(std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[2, 6]), r)?));
    let w = random_tensor(r, &[4, 5]);
    checks.push(("matmul", check_op(&[a.clone(), w], |t, v| t.matmul(v[0], v[1]), r)?));
    let (lw, lb) = (random_tensor(r, &[2, 4]), random_tensor(r, &[2]));
    checks.push(("linear", check_op(&[a.clone(), lw, lb], |t, v| t.linear(v[0], v[1], v[2]), r)?));

    let x = random_tensor(r, &[2, 3, 5, 5]);
    let (cw, cb) = (random_tensor(r, &[4, 3, 3, 3]), random_tensor(r, &[4]));
    let conv1 = check_op(&[x.clone(), cw.clone(), cb.clone()], |t, v| conv(t, v[0], v[1], v[2], 1, 1), r)?;
    let conv2 = check_op(&[x.clone(), cw, cb], |t, v| conv(t, v[0], v[1], v[2], 2, 1), r)?;
    checks.push(("conv2d", conv1.max(conv2)));

    let (g, be) = (random_tensor(r, &[3]), random_tensor(r, &[3]));
    let bn_in = [x.clone(), g, be];
    checks.push((
        "batch_norm",
        check_op(&bn_in, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0), r)?,
    ));
    checks.push((
        "batch_norm_eval",
        check_op(
            &bn_in,
            |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0], 1e-5),
            r,
        )?,
    ));
    checks.push(("global_avg_pool", check_op(std::slice::from_ref(&x), |t, v| t.global_avg_pool(v[0]), r)?));

    let clips = random_tensor(r, &[6, 8, 2, 2]);
    checks.push((
        "temporal_shift",
        check_op(std::slice::from_ref(&clips), |t, v| t.temporal_shift(v[0], 3, 0.25), r)?,
    ));
    checks.push(("previous_frame", check_op(&[clips], |t, v| t.previous_frame(v[0], 3), r)?));
    let c = random_tensor(r, &[3, 2]);
    checks.push(("concat_cols", check_op(&[a.clone(), c], |t, v| t.concat_cols(v[0], v[1]), r)?));
    let fl = random_tensor(r, &[6, 4]);
    checks.push(("frame_mean", check_op(&[fl], |t, v| t.frame_mean(v[0], 3), r)?));
    checks.push(("cross_entropy", check_scalar(std::slice::from_ref(&a), |t, v| t.cross_entropy(v[0], &[0, 3, 1]))?));

    let logits = random_tensor(r, &[5, 3]);
    let noise = gumbel_noise(r, 15);
    checks.push((
        "gumbel_softmax",
        check_op(&[logits], |t, v| Ok(t.gumbel_softmax(v[0], &noise, 0.67, false)?.0), r)?,
    ));
    let (y, yp) = (random_tensor(r, &[2, 3, 2, 2]), random_tensor(r, &[2, 3, 2, 2]));
    let gates = simplex_rows(r, 6);
    checks.push(("gate_mix", check_op(&[y, yp, gates], |t, v| t.gate_mix(v[0], v[1], v[2]), r)?));
    let gates = simplex_rows(r, 2 * 3 * 4);
    checks.push((
        "relaxed_block_cost",
        check_op(
            &[gates],
            |t, v| t.relaxed_block_cost(v[0], 3, 4, 30.0, 50.0, CostMode::Normalized),
            r,
        )?,
    ));

    let block = GatedBlockCase::new(r, conv);
    let relaxed = check_scalar(&block.inputs, |t, v| Ok(block.forward(t, v, GateInput::Sampled(false))?.0))?;
    let straight = block.check_straight_through()?;

    let mut report = SuiteReport {
        checks: checks
            .into_iter()
            .map(|(op, e)| OpCheck {
                op: op.to_string(),
                max_rel_err: e,
            })
            .collect(),
    };
    report.checks.push(OpCheck {
        op: "gated_block (relaxed)".into(),
        max_rel_err: relaxed,
    });
    report.checks.push(OpCheck {
        op: "gated_block (straight-through)".into(),
        max_rel_err: straight,
    });
    Ok(report)
}

enum GateInput<'a> {
    /// Gumbel-softmax on the policy logits; the flag selects straight-through.
    Sampled(bool),
    Fixed(&'a Tensor),
}

/// A gated residual-style block with frozen noise:
/// shift → conv → BN → ReLU, policy on pooled inputs, gate mix with the
/// previous frame, conv → pool → consensus, plus the relaxed cost term.
struct GatedBlockCase {
    inputs: Vec<Tensor>,
    noise: Vec<f64>,
    readout: Tensor,
    conv: Conv,
    frames: usize,
    out_channels: usize,
}

impl GatedBlockCase {
    fn new(rng: &mut ChaCha8Rng, conv: Conv) -> Self {
        let (n, frames, c, cp, hidden, c2, hw) = (2, 3, 2, 3, 4, 2, 4);
        let mut fc2 = random_tensor(rng, &[3 * cp, hidden]);
        fc2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let inputs = vec![
            random_tensor(rng, &[n * frames, c, hw, hw]),
            random_tensor(rng, &[cp, 3, 3, c]),
            random_tensor(rng, &[cp]),
            positive(rng, &[cp]),
            random_tensor(rng, &[cp]),
            random_tensor(rng, &[hidden, 2 * c]),
            random_tensor(rng, &[hidden]),
            fc2,
            random_tensor(rng, &[3 * cp]),
            random_tensor(rng, &[c2, 3, 3, cp]),
            random_tensor(rng, &[c2]),
        ];
        GatedBlockCase {
            inputs,
            noise: gumbel_noise(rng, n * frames * cp * 3),
            readout: random_tensor(rng, &[n, c2]),
            conv,
            frames,
            out_channels: cp,
        }
    }

    /// Returns the scalar loss and the gate rows used.
    fn forward(&self, t: &mut Tape, v: &[Var], gates: GateInput) -> Result<(Var, Var)> {
        let conv = self.conv;
        let xs = t.temporal_shift(v[0], self.frames, 0.25)?;
        let y = conv(t, xs, v[1], v[2], 1, 1)?;
        let (y, _) = t.batch_norm_train(y, v[3], v[4], 1e-5)?;
        let y = t.relu(y)?;
        let pooled = t.global_avg_pool(xs)?;
        let prev = t.previous_frame(pooled, self.frames)?;
        let z = t.concat_cols(prev, pooled)?;
        let h = t.linear(z, v[5], v[6])?;
        let h = t.relu(h)?;
        let q = t.linear(h, v[7], v[8])?;
        let rows = t.shape(q)[0] * self.out_channels;
        let logits = t.reshape(q, &[rows, 3])?;
        let g = match gates {
            GateInput::Sampled(st) => t.gumbel_softmax(logits, &self.noise, 0.67, st)?.0,
            GateInput::Fixed(g) => t.constant(g.clone()),
        };
        let y_prev = t.previous_frame(y, self.frames)?;
        let mixed = t.gate_mix(y, y_prev, g)?;
        let o = conv(t, mixed, v[9], v[10], 1, 1)?;
        let o = t.global_avg_pool(o)?;
        let o = t.frame_mean(o, self.frames)?;
        let r = t.constant(self.readout.clone());
        let o = t.mul(o, r)?;
        let task = t.sum(o)?;
        let cost = t.relaxed_block_cost(g, self.frames, self.out_channels, 40.0, 60.0, CostMode::Normalized)?;
        let cost = t.mean(cost)?;
        let cost = t.scale(cost, 0.3)?;
        Ok((t.add(task, cost)?, g))
    }

    fn eval(&self, vals: &[Tensor], gates: GateInput) -> Result<(f64, Tensor)> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|x| t.constant(x.clone())).collect();
        let (loss, g) = self.forward(&mut t, &vars, gates)?;
        Ok((t.value(loss).item(), t.value(g).clone()))
    }

    /// The straight-through gradient is `∂L/∂θ` with the one-hot gates held
    /// fixed, plus `∂L/∂G` at the one-hot gates chained through the relaxed
    /// sample's Jacobian. Each factor is estimated by central differences
    /// and compared against the tape.
    fn check_straight_through(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let (loss, g) = self.forward(&mut tape, &vars, GateInput::Sampled(true))?;
        let hard = tape.value(g).clone();
        if hard.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(contract_err!("straight-through forward is not one-hot"));
        }
        tape.backward(loss)?;

        let mut d_gates = vec![0.0; hard.numel()];
        let mut work = hard.clone();
        for (k, d) in d_gates.iter_mut().enumerate() {
            work.data_mut()[k] = hard.data()[k] + STEP;
            let plus = self.eval(&self.inputs, GateInput::Fixed(&work))?.0;
            work.data_mut()[k] = hard.data()[k] - STEP;
            let minus = self.eval(&self.inputs, GateInput::Fixed(&work))?.0;
            work.data_mut()[k] = hard.data()[k];
            *d = (plus - minus) / (2.0 * STEP);
        }

        let mut worst = 0.0f64;
        let mut vals = self.inputs.clone();
        for (i, var) in vars.iter().enumerate() {
            let analytic = tape.grad(*var).unwrap_or_else(|| Tensor::zeros(self.inputs[i].shape()));
            for j in 0..self.inputs[i].numel() {
                let orig = self.inputs[i].data()[j];
                vals[i].data_mut()[j] = orig + STEP;
                let direct_plus = self.eval(&vals, GateInput::Fixed(&hard))?.0;
                let soft_plus = self.eval(&vals, GateInput::Sampled(false))?.1;
                vals[i].data_mut()[j] = orig - STEP;
                let direct_minus = self.eval(&vals, GateInput::Fixed(&hard))?.0;
                let soft_minus = self.eval(&vals, GateInput::Sampled(false))?.1;
                vals[i].data_mut()[j] = orig;
                let chained: f64 = soft_plus
                    .data()
                    .iter()
                    .zip(soft_minus.data())
                    .zip(&d_gates)
                    .map(|((p, m), d)| d * (p - m) / (2.0 * STEP))
                    .sum();
                let numeric = (direct_plus - direct_minus) / (2.0 * STEP) + chained;
                worst = worst.max(rel_err(analytic.data()[j], numeric));
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_lists_each_op_once() {
        let report = run_suite(SuiteOptions::default()).unwrap();
        assert!(report.passed(), "{}", report.render());
        for op in REGISTERED_OPS {
            assert_eq!(report.checks.iter().filter(|c| c.op == *op).count(), 1, "{op}");
        }
        assert_eq!(report.checks.len(), REGISTERED_OPS.len() + 2);
    }

    #[test]
    fn corrupted_conv_is_named() {
        let report = run_suite(SuiteOptions {
            corrupt_conv: true,
            ..Default::default()
        })
        .unwrap();
        assert!(!report.passed());
        assert!(report.failures().contains(&"conv2d"));
        assert!(!report.failures().contains(&"linear"));
    }

    #[test]
    fn registry_covers_a_training_step() {
        use crate::layers::Mode;
        use crate::model::{ForwardCtx, PolicySource, ToyNet};
        let mut cfg = crate::model::tests::small_config(true);
        cfg.variant = crate::model::Variant::Shift;
        let net = ToyNet::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let binds = net.store.bind(&mut tape, true);
        let x = random_tensor(&mut rng, &[2 * net.config.frames, 1, 8, 8]);
        let x = tape.constant(x);
        let mut ctx = ForwardCtx::new(Mode::Train, PolicySource::Learned, &mut rng);
        let out = net.forward(&mut tape, &binds, x, &mut ctx).unwrap();
        crate::train::objective(&mut tape, out.logits, &[0, 1], &out.gate_costs, 0.1, CostMode::Normalized).unwrap();
        for name in tape.op_names() {
            assert!(REGISTERED_OPS.contains(&name), "{name} missing from the registry");
        }
    }
}
