//! ToyNet: a small residual 2D CNN applied to every frame of a clip, with
//! optional temporal channel shifts and a fusion gate between the two
//! convolutions of each block.
//!
//! Clips are folded into the batch axis: a batch of `n` clips of `T` frames
//! is one `[(n·T), c, h, w]` tensor, frame-major within each clip.

mod baseline;
mod checkpoint;
mod sparse;

pub use baseline::{
    apply_baseline_policy, baseline_decisions, channel_l1_norms, expected_random_util, flops_matched_dist,
    sample_decision, threshold_decisions, BaselineKind, BaselinePolicy,
};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sparse::{sparse_forward_clip, sparse_gated_block, SparseBlock, SparseClipOutput, SparseConv};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{self, fmt_f64, parse_bool, parse_value, KeyValue};
use crate::error::{contract_err, Error, Result};
use crate::gating::{
    argmax_policy, block_cost, gumbel_noise, one_hot, BlockTrace, CostMode, Decision, FusionGate, GumbelSample,
    PolicyNet, PolicyTrace,
};
use crate::layers::{BatchNormLayer, BnUpdate, Conv2dLayer, LinearLayer, Mode};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

/// Where temporal shifts go and which blocks may be gated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No temporal shift; blocks gated per `gated`.
    Plain,
    /// Temporal shift in every block; blocks gated per `gated`.
    Shift,
    /// Temporal shift in every block; only the last `⌈blocks/4⌉` are gated.
    ShiftLast,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::Shift => "shift",
            Variant::ShiftLast => "shift-last",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(Variant::Plain),
            "shift" => Ok(Variant::Shift),
            "shift-last" => Ok(Variant::ShiftLast),
            _ => Err(format!("unknown variant {s:?} (expected plain, shift or shift-last)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub const fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            in_channels,
            out_channels,
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyNetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub blocks: Vec<BlockSpec>,
    /// Per-block gate flags; ignored by [`Variant::ShiftLast`].
    pub gated: Vec<bool>,
    pub variant: Variant,
    pub num_classes: usize,
    pub shift_fraction: f64,
    pub hidden_units: usize,
    pub tau: f64,
    pub cost_mode: CostMode,
    pub init_seed: u64,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        let blocks = vec![
            BlockSpec::new(16, 16, 1),
            BlockSpec::new(16, 32, 2),
            BlockSpec::new(32, 32, 1),
            BlockSpec::new(32, 64, 2),
        ];
        ToyNetConfig {
            in_channels: 1,
            height: 32,
            width: 32,
            frames: 8,
            stem_channels: 16,
            stem_stride: 1,
            gated: vec![false; blocks.len()],
            blocks,
            variant: Variant::Plain,
            num_classes: 8,
            shift_fraction: 0.125,
            hidden_units: 64,
            tau: 0.67,
            cost_mode: CostMode::Normalized,
            init_seed: 0,
        }
    }
}

fn parse_blocks(key: &str, value: &str) -> Result<Vec<BlockSpec>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|b| {
            let parts: Vec<&str> = b.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!("{key}: block {b:?} is not in:out:stride")));
            }
            Ok(BlockSpec::new(
                parse_value(key, parts[0])?,
                parse_value(key, parts[1])?,
                parse_value(key, parts[2])?,
            ))
        })
        .collect()
}

/// `all`, `none`, a single boolean, or one boolean per block.
fn parse_gated(key: &str, value: &str, blocks: usize) -> Result<Vec<bool>> {
    match value.trim() {
        "all" => Ok(vec![true; blocks]),
        "none" => Ok(vec![false; blocks]),
        v if !v.contains(',') => Ok(vec![parse_bool(key, v)?; blocks]),
        v => v.split(',').map(|b| parse_bool(key, b)).collect(),
    }
}

impl ToyNetConfig {
    /// Gated flags after applying the variant's placement rule.
    pub fn gated_blocks(&self) -> Vec<bool> {
        match self.variant {
            Variant::ShiftLast => {
                let last = self.blocks.len().div_ceil(4);
                (0..self.blocks.len()).map(|i| i + last >= self.blocks.len()).collect()
            }
            _ => self.gated.clone(),
        }
    }

    pub fn is_gated(&self) -> bool {
        self.gated_blocks().iter().any(|&g| g)
    }

    pub fn set_all_gated(&mut self, on: bool) {
        self.gated = vec![on; self.blocks.len()];
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if [self.in_channels, self.height, self.width, self.frames, self.stem_channels, self.stem_stride]
            .contains(&0)
        {
            return bad("model dimensions, frames and stem settings must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("model.num_classes = {} (need at least 2)", self.num_classes));
        }
        if self.gated.len() != self.blocks.len() {
            return bad(format!(
                "model.gated has {} flags for {} blocks",
                self.gated.len(),
                self.blocks.len()
            ));
        }
        let mut c = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != c || b.out_channels == 0 || b.stride == 0 {
                return bad(format!(
                    "block {i} ({}:{}:{}) does not follow a {c}-channel input",
                    b.in_channels, b.out_channels, b.stride
                ));
            }
            c = b.out_channels;
        }
        if !(0.0..=0.5).contains(&self.shift_fraction) {
            return bad(format!("model.shift_fraction = {} outside [0, 0.5]", self.shift_fraction));
        }
        if !(self.tau > 0.0) || self.hidden_units == 0 {
            return bad("gate.tau and gate.hidden_units must be positive".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        config::render(&self.entries())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ToyNetConfig::default();
        config::apply(&mut [&mut cfg], &config::parse_text(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl KeyValue for ToyNetConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "model.in_channels" => self.in_channels = parse_value(key, value)?,
            "model.height" => self.height = parse_value(key, value)?,
            "model.width" => self.width = parse_value(key, value)?,
            "model.frames" => self.frames = parse_value(key, value)?,
            "model.stem_channels" => self.stem_channels = parse_value(key, value)?,
            "model.stem_stride" => self.stem_stride = parse_value(key, value)?,
            "model.blocks" => {
                self.blocks = parse_blocks(key, value)?;
                if self.gated.len() != self.blocks.len() {
                    let all = self.gated.iter().all(|&g| g) && !self.gated.is_empty();
                    self.gated = vec![all; self.blocks.len()];
                }
            }
            "model.gated" => self.gated = parse_gated(key, value, self.blocks.len())?,
            "model.variant" => self.variant = value.trim().parse().map_err(Error::Config)?,
            "model.num_classes" => self.num_classes = parse_value(key, value)?,
            "model.shift_fraction" => self.shift_fraction = parse_value(key, value)?,
            "model.init_seed" => self.init_seed = parse_value(key, value)?,
            "gate.hidden_units" => self.hidden_units = parse_value(key, value)?,
            "gate.tau" => self.tau = parse_value(key, value)?,
            "gate.cost_mode" => {
                self.cost_mode = match value.trim() {
                    "normalized" => CostMode::Normalized,
                    "raw" => CostMode::Raw,
                    v => return Err(Error::Config(format!("{key}: expected normalized or raw, got {v:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| format!("{}:{}:{}", b.in_channels, b.out_channels, b.stride))
            .collect::<Vec<_>>()
            .join(",");
        let cost_mode = match self.cost_mode {
            CostMode::Normalized => "normalized",
            CostMode::Raw => "raw",
        };
        [
            ("model.in_channels", self.in_channels.to_string()),
            ("model.height", self.height.to_string()),
            ("model.width", self.width.to_string()),
            ("model.frames", self.frames.to_string()),
            ("model.stem_channels", self.stem_channels.to_string()),
            ("model.stem_stride", self.stem_stride.to_string()),
            ("model.blocks", blocks),
            ("model.gated", config::join(&self.gated)),
            ("model.variant", self.variant.to_string()),
            ("model.num_classes", self.num_classes.to_string()),
            ("model.shift_fraction", fmt_f64(self.shift_fraction)),
            ("model.init_seed", self.init_seed.to_string()),
            ("gate.hidden_units", self.hidden_units.to_string()),
            ("gate.tau", fmt_f64(self.tau)),
            ("gate.cost_mode", cost_mode.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// One residual block: `conv → BN → ReLU → [gate] → conv → BN`, plus an
/// identity or projection shortcut, then ReLU.
#[derive(Clone, Debug)]
pub struct Block {
    pub conv1: Conv2dLayer,
    pub bn1: BatchNormLayer,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNormLayer,
    pub shortcut: Option<(Conv2dLayer, BatchNormLayer)>,
    pub gate: Option<FusionGate>,
    pub shift: bool,
    /// Spatial dims of the block input.
    pub in_dims: (usize, usize),
    /// Spatial dims after the first convolution.
    pub out_dims: (usize, usize),
}

/// Which policy decides the gates during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicySource {
    /// The policy networks: Gumbel samples in `Train`, argmax in `Eval`.
    Learned,
    /// The same decision for every channel.
    Forced(Decision),
    Baseline(BaselinePolicy),
}

/// Per-call forward settings.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    pub policy: PolicySource,
    pub rng: &'a mut ChaCha8Rng,
    /// Fixed Gumbel noise per gated block (`[(n·T·c'), 3]` flat); drawn
    /// from `rng` when absent.
    pub noise: Option<&'a [Vec<f64>]>,
    /// Use the one-hot sample as forward value. When false the relaxed
    /// sample is propagated instead (finite-difference checks).
    pub straight_through: bool,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(mode: Mode, policy: PolicySource, rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            mode,
            policy,
            rng,
            noise: None,
            straight_through: true,
        }
    }
}

/// Analytic cost of one gated or ungated block, summed over clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCost {
    pub block_id: usize,
    pub gated: bool,
    pub m_x: f64,
    pub m_y: f64,
    /// Σ over clips of the hard cost.
    pub hard_sum: f64,
    /// Σ over clips of the relaxed (straight-through) cost, gated blocks only.
    pub relaxed_sum: f64,
}

/// Analytic FLOPS of a batch, hard (decisions) and relaxed (training
/// surrogate). Layers outside the gated pairs are a fixed per-frame cost.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub clips: usize,
    pub frames: usize,
    /// Per-clip cost of the stem and the shortcut projections.
    pub fixed_flops: f64,
    pub blocks: Vec<BlockCost>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCostSummary {
    pub block_id: usize,
    pub gated: bool,
    pub m_x: f64,
    pub m_y: f64,
    pub mean_flops: f64,
    pub util: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub mean_flops: f64,
    pub mean_relaxed_flops: f64,
    pub upper_bound: f64,
    pub fixed_flops: f64,
    pub mean_util: f64,
    pub blocks: Vec<BlockCostSummary>,
}

impl CostReport {
    fn block_mean(&self, b: &BlockCost) -> f64 {
        b.hard_sum / self.clips.max(1) as f64
    }

    fn block_bound(&self, b: &BlockCost) -> f64 {
        self.frames as f64 * (b.m_x + b.m_y)
    }

    /// Mean hard FLOPS per clip, fixed layers included.
    pub fn mean_flops(&self) -> f64 {
        self.fixed_flops + self.blocks.iter().map(|b| self.block_mean(b)).sum::<f64>()
    }

    pub fn mean_relaxed_flops(&self) -> f64 {
        let clips = self.clips.max(1) as f64;
        self.fixed_flops
            + self
                .blocks
                .iter()
                .map(|b| if b.gated { b.relaxed_sum / clips } else { self.block_mean(b) })
                .sum::<f64>()
    }

    /// Cost with every channel computed: `fixed + T·Σ(m_x + m_y)`.
    pub fn upper_bound(&self) -> f64 {
        self.fixed_flops + self.blocks.iter().map(|b| self.block_bound(b)).sum::<f64>()
    }

    /// Mean over gated blocks of `M / (T·(m_x + m_y))`; 1 without gates.
    pub fn mean_util(&self) -> f64 {
        let gated: Vec<f64> = self
            .blocks
            .iter()
            .filter(|b| b.gated)
            .map(|b| self.block_mean(b) / self.block_bound(b))
            .collect();
        if gated.is_empty() {
            1.0
        } else {
            gated.iter().sum::<f64>() / gated.len() as f64
        }
    }

    /// Accumulates another batch over the same network.
    pub fn merge(&mut self, other: &CostReport) -> Result<()> {
        if self.clips == 0 {
            *self = other.clone();
            return Ok(());
        }
        if self.blocks.len() != other.blocks.len() || self.frames != other.frames {
            return Err(contract_err!("cost reports of different networks cannot be merged"));
        }
        self.clips += other.clips;
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.hard_sum += b.hard_sum;
            a.relaxed_sum += b.relaxed_sum;
        }
        Ok(())
    }

    pub fn summary(&self) -> CostSummary {
        CostSummary {
            mean_flops: self.mean_flops(),
            mean_relaxed_flops: self.mean_relaxed_flops(),
            upper_bound: self.upper_bound(),
            fixed_flops: self.fixed_flops,
            mean_util: self.mean_util(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockCostSummary {
                    block_id: b.block_id,
                    gated: b.gated,
                    m_x: b.m_x,
                    m_y: b.m_y,
                    mean_flops: self.block_mean(b),
                    util: self.block_mean(b) / self.block_bound(b),
                })
                .collect(),
        }
    }
}

/// Everything a forward pass over a batch of clips produces.
pub struct ForwardOutput {
    /// `[(n·T), K]`.
    pub frame_logits: Var,
    /// Consensus `[n, K]`.
    pub logits: Var,
    /// Relaxed cost of each gated block, `[n]`, in the configured cost mode.
    pub gate_costs: Vec<Var>,
    pub trace: PolicyTrace,
    pub cost: CostReport,
    pub bn_updates: Vec<BnUpdate>,
}

/// One row of the per-layer cost table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub flops: f64,
}

#[derive(Clone, Debug)]
pub struct ToyNet {
    pub config: ToyNetConfig,
    pub store: ParamStore,
    pub stem_conv: Conv2dLayer,
    pub stem_bn: BatchNormLayer,
    pub blocks: Vec<Block>,
    pub head: LinearLayer,
}

/// Seed offset of the policy-network stream, so that plain and gated
/// networks built from one seed share backbone weights.
const POLICY_STREAM: u64 = 0x5851_f42d_4c95_7f2d;

impl ToyNet {
    pub fn new(config: ToyNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut policy_rng = ChaCha8Rng::seed_from_u64(config.init_seed ^ POLICY_STREAM);
        let mut store = ParamStore::new();
        let stem_conv = Conv2dLayer::new(
            &mut store,
            "stem.conv",
            config.in_channels,
            config.stem_channels,
            3,
            config.stem_stride,
            1,
            &mut rng,
        );
        let stem_bn = BatchNormLayer::new(&mut store, "stem.bn", config.stem_channels);
        let gated = config.gated_blocks();
        let shift = config.variant != Variant::Plain;
        let mut dims = stem_conv.output_dims(config.height, config.width)?;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (i, spec) in config.blocks.iter().enumerate() {
            let name = format!("block{i}");
            let (cin, cout) = (spec.in_channels, spec.out_channels);
            let conv1 = Conv2dLayer::new(&mut store, &format!("{name}.conv1"), cin, cout, 3, spec.stride, 1, &mut rng);
            let bn1 = BatchNormLayer::new(&mut store, &format!("{name}.bn1"), cout);
            let out_dims = conv1.output_dims(dims.0, dims.1)?;
            let policy = gated[i].then(|| {
                PolicyNet::new(
                    &mut store,
                    &format!("{name}.policy"),
                    cin,
                    cout,
                    config.hidden_units,
                    &mut policy_rng,
                )
            });
            let conv2 = Conv2dLayer::new(&mut store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, &mut rng);
            let bn2 = BatchNormLayer::new(&mut store, &format!("{name}.bn2"), cout);
            let shortcut = (cin != cout || spec.stride != 1).then(|| {
                (
                    Conv2dLayer::new(&mut store, &format!("{name}.proj"), cin, cout, 1, spec.stride, 0, &mut rng),
                    BatchNormLayer::new(&mut store, &format!("{name}.proj_bn"), cout),
                )
            });
            let gate = match policy {
                Some(p) => {
                    let mut g = FusionGate::new(p, 1.0, 1.0, config.tau)?;
                    g.update_costs(&conv1, &conv2, dims.0, dims.1)?;
                    Some(g)
                }
                None => None,
            };
            blocks.push(Block {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
                gate,
                shift,
                in_dims: dims,
                out_dims,
            });
            dims = out_dims;
        }
        let last = config.blocks.last().map_or(config.stem_channels, |b| b.out_channels);
        let head = LinearLayer::new(&mut store, "head", last, config.num_classes, &mut rng);
        Ok(ToyNet {
            config,
            store,
            stem_conv,
            stem_bn,
            blocks,
            head,
        })
    }

    /// Trainable scalar parameters, policy networks included.
    pub fn count_params(&self) -> usize {
        self.store.count_trainable()
    }

    pub fn policy_params(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|b| b.gate.as_ref())
            .map(|g| g.policy.param_count())
            .sum()
    }

    pub fn gated_block_ids(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&i| self.blocks[i].gate.is_some()).collect()
    }

    /// Per-frame FLOPS of every convolution, in network order.
    pub fn flops_table(&self) -> Result<Vec<LayerFlops>> {
        let mut rows = Vec::new();
        let mut push = |name: String, conv: &Conv2dLayer, dims: (usize, usize)| -> Result<()> {
            let (oh, ow) = conv.output_dims(dims.0, dims.1)?;
            rows.push(LayerFlops {
                name,
                in_channels: conv.in_channels,
                out_channels: conv.out_channels,
                kernel: conv.kernel,
                out_h: oh,
                out_w: ow,
                flops: conv.flops(dims.0, dims.1)?,
            });
            Ok(())
        };
        push("stem.conv".into(), &self.stem_conv, (self.config.height, self.config.width))?;
        for (i, b) in self.blocks.iter().enumerate() {
            push(format!("block{i}.conv1"), &b.conv1, b.in_dims)?;
            push(format!("block{i}.conv2"), &b.conv2, b.out_dims)?;
            if let Some((proj, _)) = &b.shortcut {
                push(format!("block{i}.proj"), proj, b.in_dims)?;
            }
        }
        Ok(rows)
    }

    /// `(m_x, m_y)` of every block's convolution pair.
    pub fn block_costs(&self) -> Result<Vec<(f64, f64)>> {
        self.blocks
            .iter()
            .map(|b| Ok((b.conv1.flops(b.in_dims.0, b.in_dims.1)?, b.conv2.flops(b.out_dims.0, b.out_dims.1)?)))
            .collect()
    }

    /// A random baseline whose expected utilization equals `target_util`
    /// on this network's gated blocks, shaped after `fractions`.
    pub fn matched_random_policy(&self, fractions: [f64; 3], target_util: f64) -> Result<BaselinePolicy> {
        let costs = self.block_costs()?;
        let gated: Vec<(f64, f64)> = self.gated_block_ids().into_iter().map(|i| costs[i]).collect();
        BaselinePolicy::random(flops_matched_dist(fractions, target_util, self.config.frames, &gated)?)
    }

    /// Per-clip cost of the layers outside the gated pairs.
    pub fn fixed_flops(&self) -> Result<f64> {
        let mut per_frame = self.stem_conv.flops(self.config.height, self.config.width)?;
        for b in &self.blocks {
            if let Some((proj, _)) = &b.shortcut {
                per_frame += proj.flops(b.in_dims.0, b.in_dims.1)?;
            }
        }
        Ok(per_frame * self.config.frames as f64)
    }

    /// All-keep cost per clip, `fixed + T·Σ(m_x + m_y)`.
    pub fn upper_bound_flops(&self) -> Result<f64> {
        let t = self.config.frames as f64;
        Ok(self.fixed_flops()? + self.block_costs()?.iter().map(|(x, y)| t * (x + y)).sum::<f64>())
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.config;
        match shape {
            [nt, ch, h, w] if (*ch, *h, *w) == (c.in_channels, c.height, c.width) => {
                if nt % c.frames != 0 {
                    return Err(contract_err!(
                        "{nt} folded frames are not a whole number of {}-frame clips",
                        c.frames
                    ));
                }
                Ok(nt / c.frames)
            }
            _ => Err(contract_err!(
                "input {shape:?} does not match [(n·{}), {}, {}, {}]",
                c.frames,
                c.in_channels,
                c.height,
                c.width
            )),
        }
    }

    /// Forward pass over folded clips `x [(n·T), c, h, w]`.
    pub fn forward(&self, tape: &mut Tape, binds: &Bindings, x: Var, ctx: &mut ForwardCtx) -> Result<ForwardOutput> {
        let clips = self.check_input(tape.shape(x))?;
        let frames = self.config.frames;
        let mut updates = Vec::new();
        let mut trace = PolicyTrace::default();
        let mut gate_costs = Vec::new();
        let mut cost = CostReport {
            clips,
            frames,
            fixed_flops: self.fixed_flops()?,
            blocks: Vec::with_capacity(self.blocks.len()),
        };

        let h = self.stem_conv.forward(tape, binds, x)?;
        let h = self.stem_bn.forward(tape, &self.store, binds, h, ctx.mode, &mut updates)?;
        let mut h = tape.relu(h)?;
        let mut gate_index = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            let (m_x, m_y) = (
                block.conv1.flops(block.in_dims.0, block.in_dims.1)?,
                block.conv2.flops(block.out_dims.0, block.out_dims.1)?,
            );
            let xin = if block.shift {
                tape.temporal_shift(h, frames, self.config.shift_fraction)?
            } else {
                h
            };
            let y = block.conv1.forward(tape, binds, xin)?;
            let y = block.bn1.forward(tape, &self.store, binds, y, ctx.mode, &mut updates)?;
            let mut y = tape.relu(y)?;
            let mut entry = BlockCost {
                block_id: i,
                gated: block.gate.is_some(),
                m_x,
                m_y,
                hard_sum: clips as f64 * frames as f64 * (m_x + m_y),
                relaxed_sum: 0.0,
            };
            if let Some(gate) = &block.gate {
                let channels = block.conv1.out_channels;
                let (gates, sample) = self.gate_rows(tape, binds, gate, xin, y, ctx, gate_index, clips * frames)?;
                gate_index += 1;
                let prev = tape.previous_frame(y, frames)?;
                y = tape.gate_mix(y, prev, gates)?;

                let codes: Vec<u8> = sample.decisions.iter().map(|d| *d as u8).collect();
                entry.hard_sum = 0.0;
                for clip in codes.chunks(frames * channels) {
                    entry.hard_sum += block_cost(clip, frames, channels, m_x, m_y)?;
                }
                let raw = tape.relaxed_block_cost(gates, frames, channels, m_x, m_y, CostMode::Raw)?;
                entry.relaxed_sum = tape.value(raw).data().iter().sum();
                gate_costs.push(match self.config.cost_mode {
                    CostMode::Raw => raw,
                    CostMode::Normalized => tape.scale(raw, 1.0 / (frames as f64 * (m_x + m_y)))?,
                });
                let mut bt = BlockTrace::new(i, clips, frames, channels, codes)?;
                bt.soft = Some(sample.soft);
                trace.blocks.push(bt);
            }
            cost.blocks.push(entry);
            let y = block.conv2.forward(tape, binds, y)?;
            let y = block.bn2.forward(tape, &self.store, binds, y, ctx.mode, &mut updates)?;
            let skip = match &block.shortcut {
                Some((proj, bn)) => {
                    let s = proj.forward(tape, binds, h)?;
                    bn.forward(tape, &self.store, binds, s, ctx.mode, &mut updates)?
                }
                None => h,
            };
            let sum = tape.add(y, skip)?;
            h = tape.relu(sum)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let frame_logits = self.head.forward(tape, binds, pooled)?;
        let logits = tape.frame_mean(frame_logits, frames)?;
        Ok(ForwardOutput {
            frame_logits,
            logits,
            gate_costs,
            trace,
            cost,
            bn_updates: updates,
        })
    }

    /// Gate rows `[(n·T·c'), 3]` for one gated block and the sample behind them.
    #[allow(clippy::too_many_arguments)]
    fn gate_rows(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        gate: &FusionGate,
        xin: Var,
        y: Var,
        ctx: &mut ForwardCtx,
        gate_index: usize,
        maps: usize,
    ) -> Result<(Var, GumbelSample)> {
        let channels = gate.policy.out_channels;
        let rows = maps * channels;
        let constant = |tape: &mut Tape, decisions: Vec<Decision>| -> Result<(Var, GumbelSample)> {
            let hard: Vec<[f64; 3]> = decisions.iter().map(|d| one_hot(d.index())).collect();
            let value = Tensor::new(&[rows, 3], hard.iter().flatten().copied().collect())?;
            let sample = GumbelSample {
                soft: hard.clone(),
                hard,
                decisions,
            };
            Ok((tape.constant(value), sample))
        };
        match &ctx.policy {
            PolicySource::Learned => {
                let v = tape.global_avg_pool(xin)?;
                let v_prev = tape.previous_frame(v, self.config.frames)?;
                let logits = gate.policy.forward(tape, binds, v_prev, v)?;
                let logits = tape.reshape(logits, &[rows, 3])?;
                match ctx.mode {
                    Mode::Train => {
                        let drawn;
                        let noise = match ctx.noise {
                            Some(all) => all.get(gate_index).ok_or_else(|| {
                                contract_err!("no frozen Gumbel noise for gated block {gate_index}")
                            })?,
                            None => {
                                drawn = gumbel_noise(ctx.rng, rows * 3);
                                &drawn
                            }
                        };
                        tape.gumbel_softmax(logits, noise, gate.tau, ctx.straight_through)
                    }
                    Mode::Eval => {
                        let sample = argmax_policy(tape.value(logits).data());
                        let value = Tensor::new(&[rows, 3], sample.hard.iter().flatten().copied().collect())?;
                        Ok((tape.constant(value), sample))
                    }
                }
            }
            PolicySource::Forced(d) => constant(tape, vec![*d; rows]),
            PolicySource::Baseline(policy) => {
                let decisions = baseline_decisions(policy, tape.value(y), ctx.rng)?;
                constant(tape, decisions)
            }
        }
    }

    /// Sets the Gumbel-Softmax temperature of every gate.
    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        self.config.tau = tau;
        for gate in self.blocks.iter_mut().filter_map(|b| b.gate.as_mut()) {
            gate.tau = tau;
        }
        Ok(())
    }

    /// Applies the running-statistics updates of a training step.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            u.layer.apply_update(&mut self.store, &u.stats);
        }
    }

    /// Evaluates one clip `[T, c, h, w]` without recording gradients.
    pub fn forward_clip(
        &self,
        clip: &Tensor,
        rng: &mut ChaCha8Rng,
        mode: Mode,
        policy: PolicySource,
    ) -> Result<(Tensor, PolicyTrace, CostReport)> {
        if clip.rank() != 4 || clip.shape()[0] != self.config.frames {
            return Err(contract_err!(
                "clip {:?} does not have {} frames",
                clip.shape(),
                self.config.frames
            ));
        }
        let mut tape = Tape::new();
        let binds = self.store.bind(&mut tape, false);
        let x = tape.constant(clip.clone());
        let mut ctx = ForwardCtx::new(mode, policy, rng);
        let out = self.forward(&mut tape, &binds, x, &mut ctx)?;
        Ok((tape.value(out.frame_logits).clone(), out.trace, out.cost))
    }

    /// Config echo plus every parameter, in the checkpoint format.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        write_checkpoint(&mut w, &self.config.to_text(), &self.store).map_err(|e| Error::io(path, e))?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (text, params) = read_checkpoint(bytes)?;
        let mut net = ToyNet::new(ToyNetConfig::from_text(&text)?)?;
        if params.len() != net.store.len() {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "checkpoint holds {} parameters, the network has {}",
                    params.len(),
                    net.store.len()
                ),
            });
        }
        for (name, value) in params {
            let id = net.store.find(&name).ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("unexpected parameter {name:?}"),
            })?;
            if net.store.get(id).shape() != value.shape() {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!(
                        "parameter {name:?} has shape {:?}, expected {:?}",
                        value.shape(),
                        net.store.get(id).shape()
                    ),
                });
            }
            *net.store.get_mut(id) = value;
        }
        Ok(net)
    }
}

/// Mean of frame logits `[T, K] -> [K]`.
pub fn consensus(frame_logits: &Tensor) -> Result<Tensor> {
    if frame_logits.rank() != 2 {
        return Err(contract_err!("consensus expects [T, K] logits, got {:?}", frame_logits.shape()));
    }
    let (t, k) = (frame_logits.shape()[0], frame_logits.shape()[1]);
    let mut out = vec![0.0; k];
    for row in frame_logits.data().chunks(k) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= t as f64);
    Tensor::new(&[k], out)
}
