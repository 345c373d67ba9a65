//! Per-channel keep / reuse / skip fusion between adjacent frames.
//!
//! A policy network looks at the pooled current and previous inputs of a
//! convolution and picks, for every output channel, whether to compute it
//! (keep), copy the previous frame's raw output (reuse) or zero it (skip).
//! Training samples decisions with Gumbel noise and back-propagates through
//! the relaxed sample; inference takes the argmax.

mod cost;
mod gumbel;
mod trace;

pub use cost::{block_cost, conv_flops, cost_terms, CostMode, CostTerms, FlopCounter};
pub use gumbel::{argmax3, argmax_policy, gumbel_noise, gumbel_softmax, gumbel_softmax_with_noise, one_hot, GumbelSample};
pub use trace::{BlockFractions, BlockTrace, PolicyTrace, TraceSummary};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::layers::{BatchNormLayer, Conv2dLayer, LinearLayer, Mode};
use crate::params::{Bindings, ParamStore};
use crate::tensor::{same_shape, Tensor};

/// Ternary channel policy. The discriminants are the on-disk codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Decision {
    Keep = 0,
    Reuse = 1,
    Skip = 2,
}

impl Decision {
    pub const ALL: [Decision; 3] = [Decision::Keep, Decision::Reuse, Decision::Skip];

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Decision::Keep,
            1 => Decision::Reuse,
            2 => Decision::Skip,
            _ => panic!("decision index {i} outside 0..3"),
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0..=2 => Ok(Self::from_index(code as usize)),
            _ => Err(contract_err!("decision code {code} outside {{0, 1, 2}}")),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Decision::Keep => "keep",
            Decision::Reuse => "reuse",
            Decision::Skip => "skip",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Decision::ALL.into_iter().find(|d| d.name() == s)
    }
}

/// Two fully connected layers with a ReLU between them, mapping
/// `[v_prev; v]` (length `2c`) to `c'` rows of three logits.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub hidden_units: usize,
    pub out_channels: usize,
}

impl PolicyNet {
    /// `fc2` starts at zero so every initial policy is uniform.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        hidden_units: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        PolicyNet {
            fc1: LinearLayer::new(store, &format!("{name}.fc1"), 2 * in_channels, hidden_units, rng),
            fc2: LinearLayer::zeros(store, &format!("{name}.fc2"), hidden_units, 3 * out_channels),
            hidden_units,
            out_channels,
        }
    }

    /// Logits `[(n·c'), 3]` from pooled features `[n, c]`.
    pub fn forward(&self, tape: &mut Tape, binds: &Bindings, v_prev: Var, v: Var) -> Result<Var> {
        let z = tape.concat_cols(v_prev, v)?;
        let h = self.fc1.forward(tape, binds, z)?;
        let h = tape.relu(h)?;
        let q = self.fc2.forward(tape, binds, h)?;
        let n = tape.shape(q)[0];
        tape.reshape(q, &[n * self.out_channels, 3])
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// A policy network plus the cost constants of the convolutions around it.
#[derive(Clone, Debug)]
pub struct FusionGate {
    pub policy: PolicyNet,
    /// FLOPS of the upstream convolution, whose output channels are gated.
    pub m_x: f64,
    /// FLOPS of the downstream convolution reading the fused map.
    pub m_y: f64,
    pub tau: f64,
}

impl FusionGate {
    pub fn new(policy: PolicyNet, m_x: f64, m_y: f64, tau: f64) -> Result<Self> {
        let mut g = FusionGate {
            policy,
            m_x: 0.0,
            m_y: 0.0,
            tau,
        };
        g.set_costs(m_x, m_y)?;
        if !(tau > 0.0) {
            return Err(contract_err!("gate temperature {tau} must be positive"));
        }
        Ok(g)
    }

    pub fn set_costs(&mut self, m_x: f64, m_y: f64) -> Result<()> {
        if !(m_x > 0.0 && m_y > 0.0) {
            return Err(contract_err!("gate costs must be positive, got m_x={m_x}, m_y={m_y}"));
        }
        self.m_x = m_x;
        self.m_y = m_y;
        Ok(())
    }

    /// Recomputes `m_x`, `m_y` for an `h × w` input to `upstream`.
    pub fn update_costs(&mut self, upstream: &Conv2dLayer, downstream: &Conv2dLayer, h: usize, w: usize) -> Result<()> {
        let (oh, ow) = upstream.output_dims(h, w)?;
        self.set_costs(upstream.flops(h, w)?, downstream.flops(oh, ow)?)
    }

    /// All-keep cost `T·(m_x + m_y)`.
    pub fn upper_bound(&self, frames: usize) -> f64 {
        frames as f64 * (self.m_x + self.m_y)
    }
}

fn expand_decisions(decisions: &[Decision], n: usize, c: usize) -> Result<Vec<Decision>> {
    if decisions.len() == c {
        Ok((0..n).flat_map(|_| decisions.iter().copied()).collect())
    } else if decisions.len() == n * c {
        Ok(decisions.to_vec())
    } else {
        Err(dim_err!(
            "fuse: {} decisions for {n} maps of {c} channels",
            decisions.len()
        ))
    }
}

/// Case-by-case fusion of `[n, c', h, w]` maps: channel `i` is `y_t` if kept,
/// `y_prev` if reused, zero if skipped. `decisions` has `c'` entries shared
/// by every map, or `n·c'`.
pub fn fuse(y_t: &Tensor, y_prev: &Tensor, decisions: &[Decision]) -> Result<Tensor> {
    same_shape("fuse", y_t, y_prev)?;
    if y_t.rank() < 2 {
        return Err(dim_err!("fuse: expected [n, c', ...] maps, got {:?}", y_t.shape()));
    }
    let (n, c) = (y_t.shape()[0], y_t.shape()[1]);
    let plane = y_t.numel() / (n * c);
    let decisions = expand_decisions(decisions, n, c)?;
    let mut out = vec![0.0; y_t.numel()];
    for (idx, d) in decisions.iter().enumerate() {
        let range = idx * plane..(idx + 1) * plane;
        match d {
            Decision::Keep => out[range.clone()].copy_from_slice(&y_t.data()[range]),
            Decision::Reuse => out[range.clone()].copy_from_slice(&y_prev.data()[range]),
            Decision::Skip => {}
        }
    }
    Tensor::new(y_t.shape(), out)
}

struct GateMixOp {
    plane: usize,
}

impl Backward for GateMixOp {
    fn name(&self) -> &'static str {
        "gate_mix"
    }

    fn backward(&self, g: &[f64], _: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (y, prev, gates) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let p = self.plane;
        let scaled = |col: usize| -> Vec<f64> {
            g.iter()
                .enumerate()
                .map(|(i, gi)| gi * gates[(i / p) * 3 + col])
                .collect()
        };
        let dy = needs[0].then(|| scaled(0));
        let dprev = needs[1].then(|| scaled(1));
        let dgates = needs[2].then(|| {
            let mut d = vec![0.0; gates.len()];
            for (row, chunk) in g.chunks(p).enumerate() {
                let base = row * p;
                d[row * 3] = chunk.iter().zip(&y[base..base + p]).map(|(a, b)| a * b).sum();
                d[row * 3 + 1] = chunk.iter().zip(&prev[base..base + p]).map(|(a, b)| a * b).sum();
            }
            d
        });
        vec![dy, dprev, dgates]
    }
}

impl Tape {
    /// Straight-through fusion: channel `i` of map `s` becomes
    /// `gates[s·c'+i, 0]·y + gates[s·c'+i, 1]·y_prev`.
    pub fn gate_mix(&mut self, y: Var, y_prev: Var, gates: Var) -> Result<Var> {
        let (ty, tp, tg) = (self.value(y), self.value(y_prev), self.value(gates));
        same_shape("gate_mix", ty, tp)?;
        if ty.rank() < 2 {
            return Err(dim_err!("gate_mix: expected [n, c', ...] maps, got {:?}", ty.shape()));
        }
        let rows = ty.shape()[0] * ty.shape()[1];
        if tg.shape() != [rows, 3] {
            return Err(dim_err!(
                "gate_mix: gates {:?} do not match maps {:?}",
                tg.shape(),
                ty.shape()
            ));
        }
        let plane = ty.numel() / rows;
        let gd = tg.data();
        let data = ty
            .data()
            .iter()
            .zip(tp.data())
            .enumerate()
            .map(|(i, (a, b))| {
                let r = i / plane;
                gd[r * 3] * a + gd[r * 3 + 1] * b
            })
            .collect();
        let value = Tensor::new(ty.shape(), data)?;
        Ok(self.record(value, &[y, y_prev, gates], GateMixOp { plane }))
    }
}

/// Convolution plus batch norm and ReLU whose output channels are gated.
#[derive(Clone, Debug)]
pub struct GatedConv {
    pub conv: Conv2dLayer,
    pub bn: BatchNormLayer,
    pub gate: FusionGate,
}

/// Output of [`gate_forward`] for one time step.
#[derive(Clone, Debug)]
pub struct GateStep {
    /// Fused map `ỹ_t`.
    pub fused: Tensor,
    /// Raw `φ(conv(x_t))`, the history for the next step.
    pub raw: Tensor,
    pub sample: GumbelSample,
}

/// One online time step of a gated convolution on `[n, c, h, w]` inputs.
///
/// Batch norm uses running statistics; `mode` only selects between Gumbel
/// sampling (`Train`) and the deterministic argmax policy (`Eval`). Pass a
/// zero tensor as `y_raw_prev` (and `x_prev`) at `t = 0`.
#[allow(clippy::too_many_arguments)]
pub fn gate_forward(
    store: &ParamStore,
    unit: &GatedConv,
    x_prev: &Tensor,
    x_t: &Tensor,
    y_raw_prev: &Tensor,
    rng: &mut ChaCha8Rng,
    mode: Mode,
) -> Result<GateStep> {
    same_shape("gate_forward", x_prev, x_t)?;
    let mut tape = Tape::new();
    let binds = store.bind(&mut tape, false);
    let xp = tape.constant(x_prev.clone());
    let xt = tape.constant(x_t.clone());
    let vp = tape.global_avg_pool(xp)?;
    let vt = tape.global_avg_pool(xt)?;
    let logits = unit.gate.policy.forward(&mut tape, &binds, vp, vt)?;
    let q = tape.value(logits).data().to_vec();
    let sample = match mode {
        Mode::Train => gumbel_softmax(&q, unit.gate.tau, rng)?,
        Mode::Eval => argmax_policy(&q),
    };
    let y = unit.conv.forward(&mut tape, &binds, xt)?;
    let y = unit.bn.forward(&mut tape, store, &binds, y, Mode::Eval, &mut Vec::new())?;
    let y = tape.relu(y)?;
    let raw = tape.value(y).clone();
    let fused = fuse(&raw, y_raw_prev, &sample.decisions)?;
    Ok(GateStep { fused, raw, sample })
}
