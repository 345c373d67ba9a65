//! Joint training of backbone and policy networks: objective, SGD with
//! momentum, step schedule, evaluation and the epoch loop.

mod eval;
mod trainer;

pub use eval::{evaluate, topk_hits, EvalReport};
pub use trainer::{train, MetricsRecord, TrainSummary, Trainer};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{self, fmt_f64, parse_list, parse_value, KeyValue};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::gating::{CostMode, Decision};
use crate::model::{BaselinePolicy, PolicySource};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_eff: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub tau: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Epochs trained without the efficiency term.
    pub warmup_epochs: usize,
    /// Stop once validation top-1 reaches this value; 0 disables.
    pub stop_at_top1: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_eff: 0.1,
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            lr_decay_epochs: vec![15, 25],
            lr_decay_factor: 0.1,
            batch_size: 32,
            seed: 0,
            tau: 0.67,
            clip_norm: 10.0,
            warmup_epochs: 0,
            stop_at_top1: 0.0,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda_eff >= 0.0 && self.lambda_eff.is_finite()) {
            return bad(format!("train.lambda_eff must be >= 0, got {}", self.lambda_eff));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "train.lr_decay_epochs must be strictly increasing, got {:?}",
                self.lr_decay_epochs
            ));
        }
        // A factor of 0 freezes the network once the decay epoch is reached.
        if !(self.lr_decay_factor >= 0.0 && self.lr_decay_factor.is_finite()) {
            return bad(format!("train.lr_decay_factor must be >= 0, got {}", self.lr_decay_factor));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("train.tau must be > 0, got {}", self.tau));
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("train.clip_norm must be >= 0, got {}", self.clip_norm));
        }
        Ok(())
    }
}

impl KeyValue for TrainConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train.lambda_eff" => self.lambda_eff = parse_value(key, value)?,
            "train.lr" => self.lr = parse_value(key, value)?,
            "train.momentum" => self.momentum = parse_value(key, value)?,
            "train.epochs" => self.epochs = parse_value(key, value)?,
            "train.lr_decay_epochs" => self.lr_decay_epochs = parse_list(key, value)?,
            "train.lr_decay_factor" => self.lr_decay_factor = parse_value(key, value)?,
            "train.batch_size" => self.batch_size = parse_value(key, value)?,
            "train.seed" => self.seed = parse_value(key, value)?,
            "train.tau" => self.tau = parse_value(key, value)?,
            "train.clip_norm" => self.clip_norm = parse_value(key, value)?,
            "train.warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "train.stop_at_top1" => self.stop_at_top1 = parse_value(key, value)?,
            "train.eval_batch_size" => self.eval_batch_size = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("train.lambda_eff", fmt_f64(self.lambda_eff)),
            ("train.lr", fmt_f64(self.lr)),
            ("train.momentum", fmt_f64(self.momentum)),
            ("train.epochs", self.epochs.to_string()),
            ("train.lr_decay_epochs", config::join(&self.lr_decay_epochs)),
            ("train.lr_decay_factor", fmt_f64(self.lr_decay_factor)),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.tau", fmt_f64(self.tau)),
            ("train.clip_norm", fmt_f64(self.clip_norm)),
            ("train.warmup_epochs", self.warmup_epochs.to_string()),
            ("train.stop_at_top1", fmt_f64(self.stop_at_top1)),
            ("train.eval_batch_size", self.eval_batch_size.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Which policy drives the gates, as configured by `policy.*` keys.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    /// `learned`, `random`, `threshold`, `keep`, `reuse` or `skip`.
    pub kind: String,
    /// `[keep, reuse, skip]` probabilities of the random policy.
    pub dist: [f64; 3],
    pub keep_ratio: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: "learned".into(),
            dist: [1.0, 0.0, 0.0],
            keep_ratio: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn source(&self) -> Result<PolicySource> {
        let config_err = |e: Error| Error::Config(e.to_string());
        Ok(match self.kind.as_str() {
            "learned" => PolicySource::Learned,
            "random" => PolicySource::Baseline(BaselinePolicy::random(self.dist).map_err(config_err)?),
            "threshold" => PolicySource::Baseline(BaselinePolicy::threshold(self.keep_ratio).map_err(config_err)?),
            other => match Decision::parse(other) {
                Some(d) => PolicySource::Forced(d),
                None => {
                    return Err(Error::Config(format!(
                        "policy.kind: {other:?} is not one of learned, random, threshold, keep, reuse, skip"
                    )))
                }
            },
        })
    }
}

impl KeyValue for PolicyConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "policy.kind" => self.kind = value.trim().to_string(),
            "policy.dist" => {
                let v: Vec<f64> = parse_list(key, value)?;
                self.dist = v
                    .try_into()
                    .map_err(|v: Vec<f64>| Error::Config(format!("{key}: expected 3 values, got {}", v.len())))?;
            }
            "policy.keep_ratio" => self.keep_ratio = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("policy.kind".into(), self.kind.clone()),
            ("policy.dist".into(), self.dist.map(fmt_f64).join(",")),
            ("policy.keep_ratio".into(), fmt_f64(self.keep_ratio)),
        ]
    }
}

/// Learning rate at `epoch`: `lr · factor^(decay epochs ≤ epoch)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let decays = config.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    config.lr * config.lr_decay_factor.powi(decays as i32)
}

/// `v ← μ·v + g; p ← p − lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(contract_err!(
            "sgd_step: {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        ));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a parameter store; velocities are created lazily.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(dim_err!("gradient {:?} does not match parameter {:?}", g.shape(), p.shape()));
            }
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![0.0; g.numel()]);
            sgd_step(p.data_mut(), g.data(), lr, self.momentum, v)?;
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// `CE(consensus logits) + λ·cost`. Each gate cost is a `[n]` relaxed
/// cost per clip; it is averaged over clips, then averaged over gates in
/// normalized mode (so the term lies in `[0, 1]`) or summed in raw mode.
pub fn objective(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    gate_costs: &[Var],
    lambda_eff: f64,
    mode: CostMode,
) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels)?;
    if lambda_eff == 0.0 || gate_costs.is_empty() {
        return Ok(ce);
    }
    let mut total: Option<Var> = None;
    for &c in gate_costs {
        let m = tape.mean(c)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let per_gate = match mode {
        CostMode::Normalized => 1.0 / gate_costs.len() as f64,
        CostMode::Raw => 1.0,
    };
    let term = tape.scale(total.expect("at least one gate"), lambda_eff * per_gate)?;
    tape.add(ce, term)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_at_milestones() {
        let c = TrainConfig {
            lr: 0.002,
            lr_decay_epochs: vec![20, 40],
            ..Default::default()
        };
        assert!((lr_at(0, &c) - 0.002).abs() < 1e-15);
        assert!((lr_at(19, &c) - 0.002).abs() < 1e-15);
        assert!((lr_at(20, &c) - 0.0002).abs() < 1e-15);
        assert!((lr_at(40, &c) - 0.00002).abs() < 1e-15);
        let flat = TrainConfig {
            lr_decay_epochs: vec![],
            ..Default::default()
        };
        assert_eq!(lr_at(1000, &flat), flat.lr);
    }

    #[test]
    fn sgd_examples() {
        let mut p = [0.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[1.0], 0.1, 0.0, &mut v).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);

        let mut p = [0.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[1.0], 1.0, 0.9, &mut v).unwrap();
        sgd_step(&mut p, &[1.0], 1.0, 0.9, &mut v).unwrap();
        assert!((p[0] + 2.9).abs() < 1e-12);

        let mut p = [0.3, -1.2];
        let mut v = [0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], 0.5, 0.9, &mut v).unwrap();
        assert_eq!(p, [0.3, -1.2]);

        assert!(matches!(
            sgd_step(&mut p, &[0.0], 0.5, 0.9, &mut v),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lambda_eff: -0.1,
                ..Default::default()
            },
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                lr_decay_epochs: vec![5, 5],
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = TrainConfig::default();
        let mut p = PolicyConfig::default();
        let text = "train.lambda_eff=0.2\ntrain.lr_decay_epochs=3,7\npolicy.kind=random\npolicy.dist=0.5,0.3,0.2\n";
        config::apply(&mut [&mut c, &mut p], &config::parse_text(text).unwrap()).unwrap();
        assert_eq!(c.lambda_eff, 0.2);
        assert_eq!(c.lr_decay_epochs, vec![3, 7]);
        assert_eq!(p.dist, [0.5, 0.3, 0.2]);
        assert!(matches!(p.source().unwrap(), PolicySource::Baseline(_)));

        let mut back = TrainConfig::default();
        config::apply(&mut [&mut back], &c.entries()).unwrap();
        assert_eq!(back, c);
        p.kind = "sometimes".into();
        assert!(p.source().is_err());
        p.kind = "skip".into();
        assert_eq!(p.source().unwrap(), PolicySource::Forced(Decision::Skip));
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2]), true);
        let b = store.add("b", Tensor::zeros(&[1]), true);
        let mut g = vec![
            (a, Tensor::new(&[2], vec![3.0, 0.0]).unwrap()),
            (b, Tensor::new(&[1], vec![4.0]).unwrap()),
        ];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let before = g.clone();
        clip_grad_norm(&mut g, 10.0);
        assert_eq!(g, before);
    }

    #[test]
    fn objective_terms() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(&[2, 2], vec![0.3, -0.2, 1.0, 0.5]).unwrap());
        let c1 = tape.leaf(Tensor::new(&[2], vec![0.5, 1.0]).unwrap());
        let c2 = tape.leaf(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let ce = tape.cross_entropy(logits, &[0, 1]).unwrap();
        let ce = tape.value(ce).item();
        let plain = objective(&mut tape, logits, &[0, 1], &[c1, c2], 0.0, CostMode::Normalized).unwrap();
        assert_eq!(tape.value(plain).item(), ce);
        let full = objective(&mut tape, logits, &[0, 1], &[c1, c2], 0.2, CostMode::Normalized).unwrap();
        // Gate means 0.75 and 0, averaged over the two gates.
        assert!((tape.value(full).item() - (ce + 0.2 * 0.375)).abs() < 1e-12);
        let raw = objective(&mut tape, logits, &[0, 1], &[c1, c2], 0.2, CostMode::Raw).unwrap();
        assert!((tape.value(raw).item() - (ce + 0.2 * 0.75)).abs() < 1e-12);
        // All-skip gates cost nothing.
        let skip = objective(&mut tape, logits, &[0, 1], &[c2], 1.0, CostMode::Normalized).unwrap();
        assert_eq!(tape.value(skip).item(), ce);
    }

    #[test]
    fn sgd_keeps_velocity_per_parameter() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[1]), true);
        let b = store.add("b", Tensor::zeros(&[1]), true);
        let mut opt = Sgd::new(0.9);
        let g = |id| (id, Tensor::new(&[1], vec![1.0]).unwrap());
        opt.step(&mut store, &[g(a), g(b)], 1.0).unwrap();
        opt.step(&mut store, &[g(a)], 1.0).unwrap();
        assert!((store.get(a).data()[0] + 2.9).abs() < 1e-12);
        assert!((store.get(b).data()[0] + 1.0).abs() < 1e-12);
        let wrong = (a, Tensor::zeros(&[2]));
        assert!(opt.step(&mut store, &[wrong], 1.0).is_err());
    }
}
