//! Gumbel-max sampling of ternary per-channel policies and its
//! straight-through relaxation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;

use super::Decision;
use crate::autodiff::{Backward, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// One relaxed categorical sample per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    /// Exact one-hot rows; the forward value.
    pub hard: Vec<[f64; 3]>,
    /// Relaxed rows summing to one; the backward surrogate.
    pub soft: Vec<[f64; 3]>,
    pub decisions: Vec<Decision>,
}

impl GumbelSample {
    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }
}

/// Standard Gumbel noise `−ln(−ln U)`, `U ~ Unif(0, 1)` open at both ends.
pub fn gumbel_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax3(v: &[f64; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(index: usize) -> [f64; 3] {
    let mut h = [0.0; 3];
    h[index] = 1.0;
    h
}

fn log_softmax3(q: &[f64; 3]) -> [f64; 3] {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + q.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    [q[0] - lse, q[1] - lse, q[2] - lse]
}

fn softmax3(z: &[f64; 3]) -> [f64; 3] {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = [(z[0] - max).exp(), (z[1] - max).exp(), (z[2] - max).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

fn rows(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Deterministic sample for given logits and noise (both `[m, 3]` flat).
pub fn gumbel_softmax_with_noise(logits: &[f64], noise: &[f64], tau: f64) -> Result<GumbelSample> {
    if !logits.len().is_multiple_of(3) || noise.len() != logits.len() {
        return Err(dim_err!(
            "gumbel_softmax: {} logits and {} noise values do not form [m, 3] rows",
            logits.len(),
            noise.len()
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("gumbel_softmax: temperature {tau} must be positive")));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("gumbel_softmax: non-finite logit {bad}")));
    }
    let mut sample = GumbelSample {
        hard: Vec::new(),
        soft: Vec::new(),
        decisions: Vec::new(),
    };
    for (q, g) in rows(logits).iter().zip(rows(noise)) {
        let logr = log_softmax3(q);
        let z = [logr[0] + g[0], logr[1] + g[1], logr[2] + g[2]];
        let idx = argmax3(&z);
        sample.hard.push(one_hot(idx));
        sample.soft.push(softmax3(&[z[0] / tau, z[1] / tau, z[2] / tau]));
        sample.decisions.push(Decision::from_index(idx));
    }
    Ok(sample)
}

/// Draws one Gumbel-softmax sample per `[3]` row of `logits`.
pub fn gumbel_softmax(logits: &[f64], tau: f64, rng: &mut ChaCha8Rng) -> Result<GumbelSample> {
    let noise = gumbel_noise(rng, logits.len());
    gumbel_softmax_with_noise(logits, &noise, tau)
}

/// Deterministic policy: argmax of `softmax(q)` with ties toward keep.
pub fn argmax_policy(logits: &[f64]) -> GumbelSample {
    let mut sample = GumbelSample {
        hard: Vec::new(),
        soft: Vec::new(),
        decisions: Vec::new(),
    };
    for q in rows(logits) {
        let p = softmax3(&q);
        let idx = argmax3(&p);
        sample.hard.push(one_hot(idx));
        sample.soft.push(p);
        sample.decisions.push(Decision::from_index(idx));
    }
    sample
}

struct GumbelStraightThroughOp {
    soft: Vec<[f64; 3]>,
    tau: f64,
}

impl Backward for GumbelStraightThroughOp {
    fn name(&self) -> &'static str {
        "gumbel_softmax"
    }

    fn backward(&self, g: &[f64], _: &Tensor, _: &[&Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        // d soft_i / d q_j = s_i (δ_ij − s_j) / τ; the log-normaliser cancels.
        let mut dq = vec![0.0; g.len()];
        for (row, s) in self.soft.iter().enumerate() {
            let gr = &g[row * 3..row * 3 + 3];
            let dot = gr[0] * s[0] + gr[1] * s[1] + gr[2] * s[2];
            for j in 0..3 {
                dq[row * 3 + j] = s[j] * (gr[j] - dot) / self.tau;
            }
        }
        vec![Some(dq)]
    }
}

impl Tape {
    /// Gumbel-softmax on `logits [m, 3]` with fixed noise. With
    /// `straight_through` the output is the one-hot sample and gradients
    /// flow through the relaxed sample; otherwise the relaxed sample is
    /// also the forward value.
    pub fn gumbel_softmax(
        &mut self,
        logits: Var,
        noise: &[f64],
        tau: f64,
        straight_through: bool,
    ) -> Result<(Var, GumbelSample)> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[1] != 3 {
            return Err(dim_err!("gumbel_softmax: expected [m, 3] logits, got {:?}", t.shape()));
        }
        let sample = gumbel_softmax_with_noise(t.data(), noise, tau)?;
        let rows = if straight_through { &sample.hard } else { &sample.soft };
        let value = Tensor::new(t.shape(), rows.iter().flatten().copied().collect())?;
        let op = GumbelStraightThroughOp {
            soft: sample.soft.clone(),
            tau,
        };
        Ok((self.record(value, &[logits], op), sample))
    }
}
