//! On-demand execution of gated blocks.
//!
//! The dense path computes every channel and masks afterwards. This path
//! computes an upstream channel only when it is kept, or reused by the next
//! frame, and feeds the downstream convolution only the channels that are
//! not skipped. A [`FlopCounter`] is charged inside the loops that do the
//! work, so its total is an independent measurement of the analytic cost.

use crate::autodiff::Tape;
use crate::error::{contract_err, dim_err, Result};
use crate::gating::{FlopCounter, PolicyTrace};
use crate::layers::{BatchNormLayer, Conv2dLayer, Mode};
use crate::model::ToyNet;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Inference batch norm folded to per-channel constants.
#[derive(Clone, Debug)]
struct BnEval {
    mean: Vec<f64>,
    scale: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl BnEval {
    fn from_layer(store: &ParamStore, bn: &BatchNormLayer) -> Self {
        BnEval {
            mean: store.get(bn.running_mean).data().to_vec(),
            scale: store
                .get(bn.running_var)
                .data()
                .iter()
                .map(|v| 1.0 / (v + bn.eps).sqrt())
                .collect(),
            gamma: store.get(bn.gamma).data().to_vec(),
            beta: store.get(bn.beta).data().to_vec(),
        }
    }

    fn apply(&self, ch: usize, v: f64) -> f64 {
        self.gamma[ch] * ((v - self.mean[ch]) * self.scale[ch]) + self.beta[ch]
    }
}

/// A convolution `[c', k, k, c]` with optional inference batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct SparseConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    bn: Option<BnEval>,
    pub relu: bool,
}

impl SparseConv {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        SparseConv {
            weight,
            bias,
            stride,
            padding,
            bn: None,
            relu: false,
        }
    }

    fn from_layer(store: &ParamStore, conv: &Conv2dLayer, bn: Option<&BatchNormLayer>, relu: bool) -> Self {
        SparseConv {
            weight: store.get(conv.weight).clone(),
            bias: store.get(conv.bias).clone(),
            stride: conv.stride,
            padding: conv.padding,
            bn: bn.map(|b| BnEval::from_layer(store, b)),
            relu,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[3])
    }

    fn out_dim(&self, size: usize) -> Result<usize> {
        let k = self.dims().1;
        if size + 2 * self.padding < k {
            return Err(dim_err!("sparse conv: input {size} smaller than kernel {k}"));
        }
        Ok((size + 2 * self.padding - k) / self.stride + 1)
    }

    /// Output channel `o` of one frame `x [c, h, w]`, reading only the
    /// input channels flagged in `active`.
    #[allow(clippy::too_many_arguments)]
    fn channel(
        &self,
        x: &[f64],
        h: usize,
        w: usize,
        o: usize,
        active: Option<&[bool]>,
        counter: &mut FlopCounter,
        share: usize,
        out: &mut [f64],
    ) {
        let (_, k, c) = self.dims();
        let (oh, ow) = (out.len() / self.out_w(w), self.out_w(w));
        let wd = self.weight.data();
        let pad = self.padding as isize;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = self.bias.data()[o];
                if active.is_none() {
                    counter.charge_output(k, c, share);
                }
                for ci in 0..c {
                    if let Some(a) = active {
                        if !a[ci] {
                            continue;
                        }
                        counter.charge_input_slice(k, share);
                    }
                    for ky in 0..k {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wd[((o * k + ky) * k + kx) * c + ci] * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                let mut v = acc;
                if let Some(bn) = &self.bn {
                    v = bn.apply(o, v);
                }
                if self.relu && v <= 0.0 {
                    v = 0.0;
                }
                out[oy * ow + ox] = v;
            }
        }
    }

    fn out_w(&self, w: usize) -> usize {
        self.out_dim(w).unwrap_or(1)
    }
}

/// Output of [`sparse_gated_block`] for one clip.
#[derive(Clone, Debug)]
pub struct SparseBlock {
    /// Fused upstream maps `[T, c', h', w']`.
    pub fused: Tensor,
    /// Downstream convolution output `[T, c'', h'', w'']`.
    pub out: Tensor,
}

/// Runs a gated convolution pair on one clip `x [T, c, h, w]` with decisions
/// `[T, c']`, computing upstream channels on demand and charging `counter`
/// in units of `1/c'` FLOP.
pub fn sparse_gated_block(
    x: &Tensor,
    up: &SparseConv,
    down: &SparseConv,
    decisions: &[u8],
    counter: &mut FlopCounter,
) -> Result<SparseBlock> {
    let &[frames, c, h, w] = x.shape() else {
        return Err(dim_err!("sparse block: expected [T, c, h, w], got {:?}", x.shape()));
    };
    let (cp, _, c_in) = up.dims();
    let (cpp, _, c_mid) = down.dims();
    if c_in != c || c_mid != cp {
        return Err(dim_err!(
            "sparse block: channels {c} -> [{c_in} -> {cp}] -> [{c_mid} -> {cpp}] do not chain"
        ));
    }
    if decisions.len() != frames * cp {
        return Err(dim_err!("sparse block: {} decisions for [{frames}, {cp}]", decisions.len()));
    }
    if let Some(bad) = decisions.iter().find(|&&d| d > 2) {
        return Err(contract_err!("sparse block: decision code {bad} outside {{0, 1, 2}}"));
    }
    let (oh, ow) = (up.out_dim(h)?, up.out_dim(w)?);
    let (ooh, oow) = (down.out_dim(oh)?, down.out_dim(ow)?);
    let plane = oh * ow;
    let frame_in = c * h * w;

    // Raw upstream channels, computed at most once each.
    let mut raw: Vec<Option<Vec<f64>>> = vec![None; frames * cp];
    let mut raw_channel = |t: usize, i: usize, counter: &mut FlopCounter| -> Vec<f64> {
        raw[t * cp + i]
            .get_or_insert_with(|| {
                let mut out = vec![0.0; plane];
                up.channel(&x.data()[t * frame_in..][..frame_in], h, w, i, None, counter, cp, &mut out);
                out
            })
            .clone()
    };

    let mut fused = vec![0.0; frames * cp * plane];
    let mut out = vec![0.0; frames * cpp * ooh * oow];
    for t in 0..frames {
        let row = &decisions[t * cp..][..cp];
        for (i, &d) in row.iter().enumerate() {
            let src = match d {
                0 => Some(raw_channel(t, i, counter)),
                1 if t > 0 => Some(raw_channel(t - 1, i, counter)),
                _ => None,
            };
            if let Some(src) = src {
                fused[(t * cp + i) * plane..][..plane].copy_from_slice(&src);
            }
        }
        let active: Vec<bool> = row.iter().map(|&d| d != 2).collect();
        let frame = &fused[t * cp * plane..][..cp * plane];
        let dst = &mut out[t * cpp * ooh * oow..][..cpp * ooh * oow];
        for (o, chunk) in dst.chunks_mut(ooh * oow).enumerate() {
            down.channel(frame, oh, ow, o, Some(&active), counter, cp, chunk);
        }
    }
    Ok(SparseBlock {
        fused: Tensor::new(&[frames, cp, oh, ow], fused)?,
        out: Tensor::new(&[frames, cpp, ooh, oow], out)?,
    })
}

/// Result of [`sparse_forward_clip`].
#[derive(Clone, Debug)]
pub struct SparseClipOutput {
    /// `[T, K]`.
    pub frame_logits: Tensor,
    /// One counter per gated block, in `1/c'` units of that block.
    pub counters: Vec<FlopCounter>,
    /// Measured FLOPS of the clip: fixed layers, ungated blocks and the
    /// counters.
    pub flops: f64,
}

/// Inference on one clip `[T, c, h, w]` replaying the decisions of clip
/// `clip_index` in `trace`, with gated blocks executed on demand.
pub fn sparse_forward_clip(net: &ToyNet, clip: &Tensor, trace: &PolicyTrace, clip_index: usize) -> Result<SparseClipOutput> {
    let cfg = &net.config;
    if clip.shape() != [cfg.frames, cfg.in_channels, cfg.height, cfg.width] {
        return Err(contract_err!("clip {:?} does not fit the network", clip.shape()));
    }
    let gated = net.gated_block_ids();
    if trace.blocks.len() != gated.len() {
        return Err(contract_err!(
            "trace has {} gated blocks, the network {}",
            trace.blocks.len(),
            gated.len()
        ));
    }
    let frames = cfg.frames;
    let store = &net.store;
    let mut tape = Tape::new();
    let binds = store.bind(&mut tape, false);
    let mut updates = Vec::new();
    let x = tape.constant(clip.clone());
    let hs = net.stem_conv.forward(&mut tape, &binds, x)?;
    let hs = net.stem_bn.forward(&mut tape, store, &binds, hs, Mode::Eval, &mut updates)?;
    let mut h = tape.relu(hs)?;
    let mut counters = Vec::new();
    let mut flops = net.fixed_flops()?;
    let mut traces = trace.blocks.iter();
    for block in &net.blocks {
        let xin = if block.shift {
            tape.temporal_shift(h, frames, cfg.shift_fraction)?
        } else {
            h
        };
        let y = if let Some(gate) = &block.gate {
            let bt = traces.next().expect("trace length checked");
            if clip_index >= bt.clips || bt.frames != frames || bt.channels != block.conv1.out_channels {
                return Err(contract_err!("trace block {} does not cover clip {clip_index}", bt.block_id));
            }
            let up = SparseConv::from_layer(store, &block.conv1, Some(&block.bn1), true);
            let down = SparseConv::from_layer(store, &block.conv2, None, false);
            let mut counter = FlopCounter::new();
            let res = sparse_gated_block(tape.value(xin), &up, &down, bt.clip(clip_index), &mut counter)?;
            flops += counter.flops(gate.policy.out_channels);
            counters.push(counter);
            tape.constant(res.out)
        } else {
            let (hh, ww) = block.in_dims;
            flops += frames as f64 * (block.conv1.flops(hh, ww)? + block.conv2.flops(block.out_dims.0, block.out_dims.1)?);
            let y = block.conv1.forward(&mut tape, &binds, xin)?;
            let y = block.bn1.forward(&mut tape, store, &binds, y, Mode::Eval, &mut updates)?;
            let y = tape.relu(y)?;
            block.conv2.forward(&mut tape, &binds, y)?
        };
        let y = block.bn2.forward(&mut tape, store, &binds, y, Mode::Eval, &mut updates)?;
        let skip = match &block.shortcut {
            Some((proj, bn)) => {
                let s = proj.forward(&mut tape, &binds, h)?;
                bn.forward(&mut tape, store, &binds, s, Mode::Eval, &mut updates)?
            }
            None => h,
        };
        let sum = tape.add(y, skip)?;
        h = tape.relu(sum)?;
    }
    let pooled = tape.global_avg_pool(h)?;
    let logits = net.head.forward(&mut tape, &binds, pooled)?;
    Ok(SparseClipOutput {
        frame_logits: tape.value(logits).clone(),
        counters,
        flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::{block_cost, conv_flops, fuse, Decision};
    use crate::gradcheck::random_tensor;
    use crate::layers::conv2d_forward;
    use crate::model::tests::small_config;
    use crate::model::{BaselinePolicy, PolicySource};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_conv(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize, stride: usize) -> SparseConv {
        SparseConv::new(
            random_tensor(rng, &[out_c, k, k, in_c]),
            random_tensor(rng, &[out_c]),
            stride,
            k / 2,
        )
    }

    #[test]
    fn dense_counter_matches_analytic_conv_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (c, cp, k) = (rng.random_range(1..4), rng.random_range(1..5), [1, 3][rng.random_range(0..2)]);
            let stride = rng.random_range(1..3);
            let (h, w) = (rng.random_range(k..8), rng.random_range(k..8));
            let conv = random_conv(&mut rng, cp, c, k, stride);
            let x = random_tensor(&mut rng, &[c, h, w]);
            let (oh, ow) = (conv.out_dim(h).unwrap(), conv.out_dim(w).unwrap());
            let mut counter = FlopCounter::new();
            let mut out = vec![0.0; cp * oh * ow];
            for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
                conv.channel(x.data(), h, w, o, None, &mut counter, 1, chunk);
            }
            assert_eq!(counter.flops(1), conv_flops(cp, oh, ow, k, c));
            let dense = conv2d_forward(
                &x.clone().reshape(&[1, c, h, w]).unwrap(),
                &conv.weight,
                &conv.bias,
                stride,
                k / 2,
            )
            .unwrap();
            let reference = Tensor::new(dense.shape(), out).unwrap();
            assert!(dense.max_abs_diff(&reference) < 1e-12);
        }
    }

    #[test]
    fn sparse_block_matches_masked_dense_and_counts_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let frames = rng.random_range(1..=4);
            let (c, cp, cpp) = (rng.random_range(1..4), rng.random_range(1..=8), rng.random_range(1..4));
            let stride = rng.random_range(1..3);
            let up = random_conv(&mut rng, cp, c, 3, stride);
            let down = random_conv(&mut rng, cpp, cp, 3, 1);
            let x = random_tensor(&mut rng, &[frames, c, 6, 5]);
            let decisions: Vec<u8> = (0..frames * cp).map(|_| rng.random_range(0..3)).collect();
            let mut counter = FlopCounter::new();
            let res = sparse_gated_block(&x, &up, &down, &decisions, &mut counter).unwrap();

            let raw = conv2d_forward(&x, &up.weight, &up.bias, up.stride, up.padding).unwrap();
            let (oh, ow) = (raw.shape()[2], raw.shape()[3]);
            let mut prev = vec![0.0; raw.numel()];
            let fp = cp * oh * ow;
            prev[fp..].copy_from_slice(&raw.data()[..raw.numel() - fp]);
            let prev = Tensor::new(raw.shape(), prev).unwrap();
            let d: Vec<Decision> = decisions.iter().map(|&v| Decision::from_index(v as usize)).collect();
            let fused = fuse(&raw, &prev, &d).unwrap();
            assert!(fused.max_abs_diff(&res.fused) < 1e-12);
            let out = conv2d_forward(&fused, &down.weight, &down.bias, 1, 1).unwrap();
            assert!(out.max_abs_diff(&res.out) < 1e-12);

            let m_x = conv_flops(cp, oh, ow, 3, c);
            let m_y = conv_flops(cpp, oh, ow, 3, cp);
            assert_eq!(counter.flops(cp), block_cost(&decisions, frames, cp, m_x, m_y).unwrap());
        }
    }

    #[test]
    fn duplicated_frames_with_reuse_repeat_the_first_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let up = random_conv(&mut rng, 3, 2, 3, 1);
        let down = random_conv(&mut rng, 2, 3, 3, 1);
        let frame = random_tensor(&mut rng, &[2, 4, 4]);
        let x = Tensor::new(&[3, 2, 4, 4], frame.data().repeat(3)).unwrap();
        let mut decisions = vec![0u8; 3];
        decisions.extend([1u8; 6]);
        let res = sparse_gated_block(&x, &up, &down, &decisions, &mut FlopCounter::new()).unwrap();
        let plane = 3 * 16;
        let f = res.fused.data();
        assert_eq!(f[plane..2 * plane], f[..plane]);
        assert_eq!(f[2 * plane..], f[..plane]);
    }

    #[test]
    fn network_sparse_path_matches_dense_path() {
        let mut cfg = small_config(true);
        cfg.variant = crate::model::Variant::Shift;
        let net = ToyNet::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy = PolicySource::Baseline(BaselinePolicy::random([0.4, 0.3, 0.3]).unwrap());
        for _ in 0..3 {
            let clip = random_tensor(&mut rng, &[3, 1, 8, 8]);
            let (dense, trace, cost) = net.forward_clip(&clip, &mut rng, Mode::Eval, policy.clone()).unwrap();
            let sparse = sparse_forward_clip(&net, &clip, &trace, 0).unwrap();
            assert!(dense.max_abs_diff(&sparse.frame_logits) < 1e-12);
            assert!((sparse.flops - cost.mean_flops()).abs() <= 1e-9 * cost.mean_flops());
        }
    }
}
