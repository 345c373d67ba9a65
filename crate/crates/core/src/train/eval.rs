use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{contract_err, Result};
use crate::gating::PolicyTrace;
use crate::layers::Mode;
use crate::model::{CostReport, CostSummary, PolicySource, ToyNet};

/// Result of one deterministic pass over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: usize,
    pub top1: f64,
    /// Only reported with at least five classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    pub loss: f64,
    /// Hard-path FLOPS per clip, fixed layers included.
    pub mean_flops: f64,
    pub mean_util: f64,
    /// `[keep, reuse, skip]` over every gated (clip, frame, channel).
    pub fractions: [f64; 3],
    pub params: usize,
    pub cost: CostSummary,
}

/// Number of rows of `logits` (`n × k` row-major) whose label ranks within
/// the top `top`. Ties rank the lower class index first.
pub fn topk_hits(logits: &[f64], classes: usize, labels: &[usize], top: usize) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let ly = row[y];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > ly || (v == ly && j < y))
                .count();
            rank < top
        })
        .count()
}

/// Evaluates `net` over `ds` in eval mode. Learned policies take the argmax
/// decision; baseline policies draw from a generator seeded with `seed`,
/// so repeated calls agree exactly. The trace is returned only when
/// `keep_trace` is set.
pub fn evaluate(
    net: &ToyNet,
    ds: &Dataset,
    policy: &PolicySource,
    batch_size: usize,
    seed: u64,
    keep_trace: bool,
) -> Result<(EvalReport, PolicyTrace)> {
    if ds.is_empty() {
        return Err(contract_err!("cannot evaluate on an empty dataset"));
    }
    if ds.num_classes != net.config.num_classes {
        return Err(contract_err!(
            "dataset has {} classes, the network {}",
            ds.num_classes,
            net.config.num_classes
        ));
    }
    let classes = ds.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cost = CostReport::default();
    let mut trace = PolicyTrace::default();
    let mut counts = [0u64; 3];
    let (mut hit1, mut hit5, mut loss) = (0usize, 0usize, 0.0);
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = ds.batch(chunk);
        let mut tape = Tape::new();
        let binds = net.store.bind(&mut tape, false);
        let x = tape.constant(batch.folded());
        let mut ctx = crate::model::ForwardCtx::new(Mode::Eval, policy.clone(), &mut rng);
        let out = net.forward(&mut tape, &binds, x, &mut ctx)?;
        let ce = tape.cross_entropy(out.logits, &batch.labels)?;
        loss += tape.value(ce).item() * batch.len() as f64;
        let logits = tape.value(out.logits).data();
        hit1 += topk_hits(logits, classes, &batch.labels, 1);
        hit5 += topk_hits(logits, classes, &batch.labels, 5);
        cost.merge(&out.cost)?;
        for b in &out.trace.blocks {
            for (c, v) in counts.iter_mut().zip(b.counts()) {
                *c += v;
            }
        }
        if keep_trace {
            trace.append(out.trace)?;
        }
    }
    let n = ds.len() as f64;
    let total: u64 = counts.iter().sum();
    let fractions = if total == 0 {
        [1.0, 0.0, 0.0]
    } else {
        counts.map(|c| c as f64 / total as f64)
    };
    let report = EvalReport {
        clips: ds.len(),
        top1: hit1 as f64 / n,
        top5: (classes >= 5).then(|| hit5 as f64 / n),
        loss: loss / n,
        mean_flops: cost.mean_flops(),
        mean_util: cost.mean_util(),
        fractions,
        params: net.count_params(),
        cost: cost.summary(),
    };
    Ok((report, trace))
}
