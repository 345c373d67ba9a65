//! Non-learned fusion policies used as baselines.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::gating::{fuse, Decision};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// The learned policy network decides.
    None,
    /// Decisions drawn i.i.d. from a fixed `[keep, reuse, skip]` distribution.
    Random,
    /// Keep the channels with the largest L1 norm, skip the rest.
    Threshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselinePolicy {
    pub kind: BaselineKind,
    pub dist: [f64; 3],
    pub keep_ratio: f64,
}

impl Default for BaselinePolicy {
    fn default() -> Self {
        BaselinePolicy {
            kind: BaselineKind::None,
            dist: [1.0, 0.0, 0.0],
            keep_ratio: 1.0,
        }
    }
}

impl BaselinePolicy {
    pub fn random(dist: [f64; 3]) -> Result<Self> {
        let p = BaselinePolicy {
            kind: BaselineKind::Random,
            dist,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn threshold(keep_ratio: f64) -> Result<Self> {
        let p = BaselinePolicy {
            kind: BaselineKind::Threshold,
            keep_ratio,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dist.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (self.dist.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(contract_err!(
                "random policy distribution {:?} must be non-negative and sum to 1",
                self.dist
            ));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(contract_err!("threshold keep ratio {} outside (0, 1]", self.keep_ratio));
        }
        Ok(())
    }
}

/// Draws one decision from `[keep, reuse, skip]` probabilities.
pub fn sample_decision(dist: &[f64; 3], rng: &mut ChaCha8Rng) -> Decision {
    let u: f64 = rng.random();
    if u < dist[0] {
        Decision::Keep
    } else if u < dist[0] + dist[1] {
        Decision::Reuse
    } else if dist[2] > 0.0 {
        Decision::Skip
    } else if dist[1] > 0.0 {
        Decision::Reuse
    } else {
        Decision::Keep
    }
}

/// Keeps the `⌈keep_ratio·c'⌉` channels with the largest L1 norm (ties to
/// the lower index) and skips the rest.
pub fn threshold_decisions(norms: &[f64], keep_ratio: f64) -> Vec<Decision> {
    let keep = ((keep_ratio * norms.len() as f64).ceil() as usize).clamp(1, norms.len());
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut out = vec![Decision::Skip; norms.len()];
    for &i in &order[..keep] {
        out[i] = Decision::Keep;
    }
    out
}

/// Per-channel L1 norms of `[n, c', ...]` maps, `n·c'` entries.
pub fn channel_l1_norms(y: &Tensor) -> Result<Vec<f64>> {
    if y.rank() < 2 {
        return Err(dim_err!("channel norms need [n, c', ...] maps, got {:?}", y.shape()));
    }
    let plane = y.numel() / (y.shape()[0] * y.shape()[1]);
    Ok(y.data().chunks(plane).map(|p| p.iter().map(|v| v.abs()).sum()).collect())
}

/// Decisions for `[n, c', ...]` maps under a baseline policy.
pub fn baseline_decisions(policy: &BaselinePolicy, y_t: &Tensor, rng: &mut ChaCha8Rng) -> Result<Vec<Decision>> {
    policy.validate()?;
    let (n, c) = (y_t.shape()[0], y_t.shape()[1]);
    match policy.kind {
        BaselineKind::Random => Ok((0..n * c).map(|_| sample_decision(&policy.dist, rng)).collect()),
        BaselineKind::Threshold => {
            let norms = channel_l1_norms(y_t)?;
            Ok(norms.chunks(c).flat_map(|row| threshold_decisions(row, policy.keep_ratio)).collect())
        }
        BaselineKind::None => Err(contract_err!("the learned policy is not a baseline")),
    }
}

/// Applies a baseline policy to one step: returns the decisions and the
/// fused map.
pub fn apply_baseline_policy(
    policy: &BaselinePolicy,
    y_t: &Tensor,
    y_prev: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Decision>, Tensor)> {
    let decisions = baseline_decisions(policy, y_t, rng)?;
    let fused = fuse(y_t, y_prev, &decisions)?;
    Ok((decisions, fused))
}

/// Expected normalized utilization of i.i.d. random decisions, averaged
/// over gated blocks given as `(m_x, m_y)`.
pub fn expected_random_util(dist: &[f64; 3], frames: usize, blocks: &[(f64, f64)]) -> f64 {
    let [k, r, s] = *dist;
    let t = frames as f64;
    // Upstream runs when kept now or reused next frame; nothing follows the last frame.
    let up = ((t - 1.0) * (k + (1.0 - k) * r) + k) / t;
    let down = 1.0 - s;
    if blocks.is_empty() {
        return 1.0;
    }
    blocks.iter().map(|&(mx, my)| (mx * up + my * down) / (mx + my)).sum::<f64>() / blocks.len() as f64
}

/// A random-policy distribution whose expected utilization equals
/// `target_util`: `fractions` is mixed with all-keep (to raise the cost) or
/// all-skip (to lower it), preserving its shape as far as possible.
pub fn flops_matched_dist(fractions: [f64; 3], target_util: f64, frames: usize, blocks: &[(f64, f64)]) -> Result<[f64; 3]> {
    if !(0.0..=1.0).contains(&target_util) || blocks.is_empty() {
        return Err(contract_err!(
            "cannot match utilization {target_util} over {} gated blocks",
            blocks.len()
        ));
    }
    BaselinePolicy::random(fractions)?;
    let util = |d: &[f64; 3]| expected_random_util(d, frames, blocks);
    let base = util(&fractions);
    let anchor = if base < target_util { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let mix = |a: f64| -> [f64; 3] { std::array::from_fn(|i| (1.0 - a) * fractions[i] + a * anchor[i]) };
    let below = |a: f64| (util(&mix(a)) < target_util) == (base < target_util);
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mix(hi))
}
