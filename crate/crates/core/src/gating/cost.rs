//! Analytic FLOPS of a gated pair of convolutions.
//!
//! The upstream convolution is charged for channel `i` at frame `τ` when it
//! is kept at `τ` or reused at `τ + 1`; the downstream convolution is
//! charged for the fraction of its input channels not skipped at `τ`. The
//! frame after the last one is treated as all-skip.

use super::Decision;
use crate::autodiff::{Backward, Tape, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// `c'·h'·w'·(k·k·c + 1)`: one FLOP per multiply-accumulate plus the bias.
pub fn conv_flops(out_c: usize, out_h: usize, out_w: usize, k: usize, in_c: usize) -> f64 {
    (out_c * out_h * out_w * (k * k * in_c + 1)) as f64
}

/// How a gate's cost enters the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    /// `M / (T·(m_x + m_y))`, in `[0, 1]`.
    Normalized,
    /// Raw FLOPS.
    Raw,
}

/// Integer indicator sums behind the cost of one clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostTerms {
    /// `Σ_τ Σ_i 1[p_τ = keep or p_{τ+1} = reuse]`.
    pub upstream: u64,
    /// `Σ_τ Σ_i 1[p_τ ≠ skip]`.
    pub downstream: u64,
}

impl CostTerms {
    /// `(upstream·m_x + downstream·m_y) / c'`, with a single rounding step
    /// so that equal integer terms always give bitwise-equal costs.
    pub fn flops(&self, channels: usize, m_x: f64, m_y: f64) -> f64 {
        (self.upstream as f64 * m_x + self.downstream as f64 * m_y) / channels as f64
    }
}

/// Indicator sums for one clip's decisions laid out `[T, c']`.
pub fn cost_terms(decisions: &[u8], frames: usize, channels: usize) -> Result<CostTerms> {
    if frames == 0 || channels == 0 || decisions.len() != frames * channels {
        return Err(dim_err!(
            "block_cost: {} decisions do not form a [{frames}, {channels}] trace",
            decisions.len()
        ));
    }
    if let Some(bad) = decisions.iter().find(|&&d| d > 2) {
        return Err(contract_err!("block_cost: decision code {bad} outside {{0, 1, 2}}"));
    }
    let mut terms = CostTerms::default();
    for tau in 0..frames {
        for i in 0..channels {
            let p = decisions[tau * channels + i];
            let next = if tau + 1 < frames {
                decisions[(tau + 1) * channels + i]
            } else {
                Decision::Skip as u8
            };
            // 1[p_τ · (p_{τ+1} − 1) = 0]
            if p == Decision::Keep as u8 || next == Decision::Reuse as u8 {
                terms.upstream += 1;
            }
            if p != Decision::Skip as u8 {
                terms.downstream += 1;
            }
        }
    }
    Ok(terms)
}

/// Hard FLOPS of one clip through one gated block.
pub fn block_cost(decisions: &[u8], frames: usize, channels: usize, m_x: f64, m_y: f64) -> Result<f64> {
    Ok(cost_terms(decisions, frames, channels)?.flops(channels, m_x, m_y))
}

struct RelaxedCostOp {
    clips: usize,
    frames: usize,
    channels: usize,
    m_x: f64,
    m_y: f64,
    scale: f64,
}

impl Backward for RelaxedCostOp {
    fn name(&self) -> &'static str {
        "relaxed_block_cost"
    }

    fn backward(&self, g: &[f64], _: &Tensor, inputs: &[&Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (t_len, c) = (self.frames, self.channels);
        let gates = inputs[0].data();
        let at = |clip: usize, tau: usize, i: usize, j: usize| gates[((clip * t_len + tau) * c + i) * 3 + j];
        let mut d = vec![0.0; gates.len()];
        let unit = self.scale / c as f64;
        for clip in 0..self.clips {
            let gc = g[clip] * unit;
            for tau in 0..t_len {
                for i in 0..c {
                    let k = at(clip, tau, i, 0);
                    let r_next = if tau + 1 < t_len { at(clip, tau + 1, i, 1) } else { 0.0 };
                    let base = ((clip * t_len + tau) * c + i) * 3;
                    d[base] += gc * (1.0 - r_next) * self.m_x;
                    d[base + 2] -= gc * self.m_y;
                    if tau + 1 < t_len {
                        d[((clip * t_len + tau + 1) * c + i) * 3 + 1] += gc * (1.0 - k) * self.m_x;
                    }
                }
            }
        }
        vec![Some(d)]
    }
}

impl Tape {
    /// Differentiable cost per clip from gate rows `[(n·T·c'), 3]` ordered
    /// clip, frame, channel. The keep-or-reused-next indicator becomes
    /// `k_τ + r_{τ+1} − k_τ·r_{τ+1}` and the skip indicator `s_τ`. On one-hot
    /// rows the value equals [`block_cost`] exactly (before normalisation).
    #[allow(clippy::too_many_arguments)]
    pub fn relaxed_block_cost(
        &mut self,
        gates: Var,
        frames: usize,
        channels: usize,
        m_x: f64,
        m_y: f64,
        mode: CostMode,
    ) -> Result<Var> {
        let t = self.value(gates);
        let per_clip = frames * channels;
        if t.rank() != 2 || t.shape()[1] != 3 || per_clip == 0 || !t.shape()[0].is_multiple_of(per_clip) {
            return Err(dim_err!(
                "relaxed_block_cost: gates {:?} do not form [(n·{frames}·{channels}), 3]",
                t.shape()
            ));
        }
        let clips = t.shape()[0] / per_clip;
        let scale = match mode {
            CostMode::Raw => 1.0,
            CostMode::Normalized => 1.0 / (frames as f64 * (m_x + m_y)),
        };
        let gd = t.data();
        let at = |clip: usize, tau: usize, i: usize, j: usize| gd[((clip * frames + tau) * channels + i) * 3 + j];
        let mut out = Vec::with_capacity(clips);
        for clip in 0..clips {
            let (mut up, mut down) = (0.0, 0.0);
            for tau in 0..frames {
                for i in 0..channels {
                    let k = at(clip, tau, i, 0);
                    let r_next = if tau + 1 < frames { at(clip, tau + 1, i, 1) } else { 0.0 };
                    up += k + r_next - k * r_next;
                    down += 1.0 - at(clip, tau, i, 2);
                }
            }
            let raw = (up * m_x + down * m_y) / channels as f64;
            out.push(raw * scale);
        }
        let value = Tensor::new(&[clips], out)?;
        let op = RelaxedCostOp {
            clips,
            frames,
            channels,
            m_x,
            m_y,
            scale,
        };
        Ok(self.record(value, &[gates], op))
    }
}

/// Multiply-accumulate counter for the sparse execution path, in units of
/// `1/c'` FLOP so that every count is an integer. A computed output element
/// of the upstream convolution costs `(k·k·c + 1)` FLOPs; each
/// (output element, active input channel) pair of the downstream
/// convolution costs `k'·k'` MACs plus a `1/c'` share of the bias add.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    units: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// One output element computed over a full input: `k·k·c` MACs plus bias.
    pub fn charge_output(&mut self, k: usize, in_c: usize, share: usize) {
        self.units += ((k * k * in_c + 1) * share) as u64;
    }

    /// One active input channel contributing to one output element.
    pub fn charge_input_slice(&mut self, k: usize, share: usize) {
        self.units += (k * k * share + 1) as u64;
    }

    pub fn units(&self) -> u64 {
        self.units
    }

    /// Total FLOPs given the `1/c'` unit denominator.
    pub fn flops(&self, share: usize) -> f64 {
        self.units as f64 / share as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal evaluation of the indicator sum, frame by frame.
    fn brute_force(p: &[u8], t: usize, c: usize, mx: f64, my: f64) -> f64 {
        let mut total = 0.0;
        for tau in 0..t {
            let mut first = 0.0;
            let mut skipped = 0.0;
            for i in 0..c {
                let pt = p[tau * c + i] as i64;
                let pn = if tau + 1 < t { p[(tau + 1) * c + i] as i64 } else { 2 };
                if pt * (pn - 1) == 0 {
                    first += 1.0;
                }
                if pt == 2 {
                    skipped += 1.0;
                }
            }
            total += first / c as f64 * mx + (1.0 - skipped / c as f64) * my;
        }
        total
    }

    #[test]
    fn conv_flops_examples() {
        assert_eq!(conv_flops(4, 2, 2, 3, 2), 304.0);
        assert_eq!(conv_flops(1, 1, 1, 1, 1), 2.0);
    }

    #[test]
    fn hand_worked_trace() {
        // p_0 = [keep, skip], p_1 = [reuse, skip]
        let p = [0, 2, 1, 2];
        assert_eq!(block_cost(&p, 2, 2, 304.0, 100.0).unwrap(), 252.0);
        assert!((brute_force(&p, 2, 2, 304.0, 100.0) - 252.0).abs() < 1e-12);
    }

    #[test]
    fn bounds_of_all_keep_and_all_skip() {
        assert_eq!(block_cost(&[0; 12], 4, 3, 10.0, 7.0).unwrap(), 4.0 * 17.0);
        assert_eq!(block_cost(&[2; 12], 4, 3, 10.0, 7.0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_invalid_codes_and_shapes() {
        assert!(matches!(block_cost(&[0, 3], 1, 2, 1.0, 1.0), Err(crate::Error::Contract(_))));
        assert!(block_cost(&[0, 1, 2], 2, 2, 1.0, 1.0).is_err());
    }

    #[test]
    fn agrees_with_brute_force_on_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let t = rng.random_range(1..6);
            let c = rng.random_range(1..9);
            let p: Vec<u8> = (0..t * c).map(|_| rng.random_range(0..3)).collect();
            let (mx, my) = (rng.random_range(1.0..500.0), rng.random_range(1.0..500.0));
            let got = block_cost(&p, t, c, mx, my).unwrap();
            assert!((got - brute_force(&p, t, c, mx, my)).abs() <= 1e-9 * got.max(1.0));
            assert!(got >= 0.0 && got <= t as f64 * (mx + my) + 1e-9);
        }
    }

    #[test]
    fn keep_to_skip_never_increases_cost() {
        // Exhaustive over T = 3, c' = 2.
        for code in 0..3u32.pow(6) {
            let p: Vec<u8> = (0..6).map(|j| ((code / 3u32.pow(j)) % 3) as u8).collect();
            let base = block_cost(&p, 3, 2, 11.0, 5.0).unwrap();
            for j in 0..6 {
                if p[j] == 0 {
                    let mut q = p.clone();
                    q[j] = 2;
                    assert!(block_cost(&q, 3, 2, 11.0, 5.0).unwrap() <= base);
                }
            }
        }
    }

    fn one_hot_rows(p: &[u8]) -> Tensor {
        let data = p
            .iter()
            .flat_map(|&d| {
                let mut r = [0.0; 3];
                r[d as usize] = 1.0;
                r
            })
            .collect();
        Tensor::new(&[p.len(), 3], data).unwrap()
    }

    #[test]
    fn relaxed_forward_equals_hard_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let t = rng.random_range(1..5);
            let c = rng.random_range(1..9);
            let p: Vec<u8> = (0..t * c).map(|_| rng.random_range(0..3)).collect();
            let (mx, my) = (rng.random_range(1.0..1e4), rng.random_range(1.0..1e4));
            let mut tape = Tape::new();
            let g = tape.constant(one_hot_rows(&p));
            let m = tape.relaxed_block_cost(g, t, c, mx, my, CostMode::Raw).unwrap();
            let hard = block_cost(&p, t, c, mx, my).unwrap();
            assert!((tape.value(m).item() - hard).abs() <= 1e-12 * hard.max(1.0));
        }
    }

    #[test]
    fn relaxed_gradient_matches_finite_differences_on_soft_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, c) = (3, 4);
        let soft: Vec<f64> = (0..t * c)
            .flat_map(|_| {
                let a: [f64; 3] = [rng.random(), rng.random(), rng.random()];
                let s: f64 = a.iter().sum();
                a.map(|v| v / s)
            })
            .collect();
        let gates = Tensor::new(&[t * c, 3], soft).unwrap();
        let err = crate::gradcheck::check_scalar(&[gates], |tape, v| {
            let m = tape.relaxed_block_cost(v[0], t, c, 30.0, 20.0, CostMode::Normalized)?;
            tape.sum(m)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn all_keep_has_no_interaction_gradient_on_reuse() {
        // With every frame kept, the reuse slots see (1 − k) = 0.
        let (t, c) = (3, 2);
        let mut tape = Tape::new();
        let g = tape.leaf(one_hot_rows(&[0; 6]));
        let m = tape.relaxed_block_cost(g, t, c, 5.0, 3.0, CostMode::Raw).unwrap();
        assert_eq!(tape.value(m).item(), t as f64 * 8.0);
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        let grad = tape.grad(g).unwrap();
        for row in grad.data().chunks(3) {
            assert_eq!(row[1], 0.0);
        }
        assert_eq!(grad.data()[0], 2.5);
    }
}
