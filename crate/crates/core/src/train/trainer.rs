use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_grad_norm, evaluate, lr_at, objective, EvalReport, Sgd, TrainConfig};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{contract_err, Error, Result};
use crate::layers::Mode;
use crate::model::{ForwardCtx, PolicySource, ToyNet};
use crate::params::ParamStore;

/// One line of `metrics.jsonl`. Epoch 0 is the untrained network; epoch
/// `e` is measured after `e` passes over the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    pub top1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    pub val_loss: f64,
    pub mean_flops: f64,
    pub mean_util: f64,
    /// `[keep, reuse, skip]`.
    pub fractions: [f64; 3],
}

impl MetricsRecord {
    fn new(epoch: usize, lr: f64, train_loss: Option<f64>, eval: &EvalReport) -> Self {
        MetricsRecord {
            epoch,
            lr,
            train_loss,
            top1: eval.top1,
            top5: eval.top5,
            val_loss: eval.loss,
            mean_flops: eval.mean_flops,
            mean_util: eval.mean_util,
            fractions: eval.fractions,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<MetricsRecord>,
    /// First record with the highest validation top-1.
    pub best: MetricsRecord,
    /// Parameters at the best record.
    pub best_params: ParamStore,
}

impl TrainSummary {
    pub fn last(&self) -> &MetricsRecord {
        self.history.last().expect("history holds at least the initial record")
    }
}

/// Runs the epoch loop. With an output directory it writes
/// `metrics.jsonl` (one record per line, flushed each epoch) and keeps
/// `checkpoint.afck` at the best validation top-1.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    /// Policy used both for training steps and validation.
    pub policy: PolicySource,
    pub out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        Trainer {
            config,
            policy: PolicySource::Learned,
            out_dir: None,
        }
    }

    pub fn with_policy(mut self, policy: PolicySource) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn run(
        &self,
        net: &mut ToyNet,
        train_set: &Dataset,
        val_set: &Dataset,
        mut on_epoch: impl FnMut(&MetricsRecord),
    ) -> Result<TrainSummary> {
        let cfg = &self.config;
        cfg.validate()?;
        for (name, ds) in [("training", train_set), ("validation", val_set)] {
            if ds.is_empty() {
                return Err(contract_err!("{name} set is empty"));
            }
            if ds.num_classes != net.config.num_classes {
                return Err(contract_err!(
                    "{name} set has {} classes, the network {}",
                    ds.num_classes,
                    net.config.num_classes
                ));
            }
        }
        net.set_tau(cfg.tau)?;

        let mut log = match &self.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
                Some((path, BufWriter::new(file)))
            }
            None => None,
        };
        let checkpoint = self.out_dir.as_ref().map(|d| d.join("checkpoint.afck"));

        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(1);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        sample_rng.set_stream(2);
        let mut opt = Sgd::new(cfg.momentum);
        let mut order: Vec<usize> = (0..train_set.len()).collect();

        let (eval, _) = evaluate(net, val_set, &self.policy, cfg.eval_batch_size, cfg.seed, false)?;
        let first = MetricsRecord::new(0, lr_at(0, cfg), None, &eval);
        let mut best = (first.clone(), net.store.clone());
        let mut history = vec![first];
        record(&mut log, checkpoint.as_deref(), net, &history[0], true)?;
        on_epoch(&history[0]);

        for epoch in 0..cfg.epochs {
            let lr = lr_at(epoch, cfg);
            let lambda = if epoch < cfg.warmup_epochs { 0.0 } else { cfg.lambda_eff };
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0;
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let loss = self.step(net, train_set, chunk, lr, lambda, &mut opt, &mut sample_rng)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became {loss} at epoch {epoch}, batch {b}, learning rate {lr}"
                    )));
                }
                loss_sum += loss * chunk.len() as f64;
            }
            let (eval, _) = evaluate(net, val_set, &self.policy, cfg.eval_batch_size, cfg.seed, false)?;
            let rec = MetricsRecord::new(epoch + 1, lr, Some(loss_sum / train_set.len() as f64), &eval);
            let improved = rec.top1 > best.0.top1;
            if improved {
                best = (rec.clone(), net.store.clone());
            }
            record(&mut log, checkpoint.as_deref(), net, &rec, improved)?;
            on_epoch(&rec);
            let done = cfg.stop_at_top1 > 0.0 && rec.top1 >= cfg.stop_at_top1;
            history.push(rec);
            if done {
                break;
            }
        }
        Ok(TrainSummary {
            history,
            best: best.0,
            best_params: best.1,
        })
    }

    /// One minibatch update; returns the loss value. A zero learning rate
    /// leaves the network untouched, running statistics included.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        net: &mut ToyNet,
        ds: &Dataset,
        indices: &[usize],
        lr: f64,
        lambda: f64,
        opt: &mut Sgd,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let batch = ds.batch(indices);
        let mut tape = Tape::new();
        let binds = net.store.bind(&mut tape, true);
        let x = tape.constant(batch.folded());
        let mut ctx = ForwardCtx::new(Mode::Train, self.policy.clone(), rng);
        let out = net.forward(&mut tape, &binds, x, &mut ctx)?;
        let loss = objective(
            &mut tape,
            out.logits,
            &batch.labels,
            &out.gate_costs,
            lambda,
            net.config.cost_mode,
        )?;
        let value = tape.value(loss).item();
        if !value.is_finite() || lr == 0.0 {
            return Ok(value);
        }
        tape.backward(loss)?;
        let mut grads: Vec<_> = binds
            .iter()
            .filter(|(id, _)| net.store.param(*id).trainable)
            .filter_map(|(id, v)| tape.grad(v).map(|g| (id, g)))
            .collect();
        clip_grad_norm(&mut grads, self.config.clip_norm);
        opt.step(&mut net.store, &grads, lr)?;
        net.apply_bn_updates(&out.bn_updates);
        Ok(value)
    }
}

fn record(
    log: &mut Option<(PathBuf, BufWriter<File>)>,
    checkpoint: Option<&Path>,
    net: &ToyNet,
    rec: &MetricsRecord,
    save: bool,
) -> Result<()> {
    if let Some((path, w)) = log {
        let line = serde_json::to_string(rec).expect("serialisable record");
        writeln!(w, "{line}")
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path.as_path(), e))?;
    }
    if let (true, Some(path)) = (save, checkpoint) {
        net.save(path)?;
    }
    Ok(())
}

/// Trains with the learned policy and no output files.
pub fn train(net: &mut ToyNet, train_set: &Dataset, val_set: &Dataset, config: &TrainConfig) -> Result<TrainSummary> {
    Trainer::new(config.clone()).run(net, train_set, val_set, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::eval::tests::{tiny_config, tiny_data};

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            lr: 0.05,
            lr_decay_epochs: vec![],
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut net = ToyNet::new(tiny_config(true)).unwrap();
        let before = net.store.clone();
        let cfg = TrainConfig {
            lambda_eff: 0.0,
            lr_decay_epochs: vec![0],
            lr_decay_factor: 0.0,
            ..quick(1)
        };
        let s = train(&mut net, &tiny_data(8, 1), &tiny_data(6, 2), &cfg).unwrap();
        for (id, p) in before.iter() {
            assert_eq!(net.store.get(id).data(), p.value.data(), "{}", p.name);
        }
        let (a, b) = (&s.history[0], &s.history[1]);
        assert_eq!((a.top1, a.val_loss, a.mean_flops, a.fractions), (b.top1, b.val_loss, b.mean_flops, b.fractions));
    }

    #[test]
    fn runs_are_reproducible_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let mut net = ToyNet::new(tiny_config(true)).unwrap();
            let out = dir.path().join(sub);
            Trainer::new(quick(2))
                .with_out_dir(&out)
                .run(&mut net, &tiny_data(12, 1), &tiny_data(6, 2), |_| {})
                .unwrap();
            (
                std::fs::read_to_string(out.join("metrics.jsonl")).unwrap(),
                out.join("checkpoint.afck"),
            )
        };
        let (a, ckpt) = run("a");
        let (b, _) = run("b");
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 3);
        let first: MetricsRecord = serde_json::from_str(a.lines().nth(1).unwrap()).unwrap();
        assert_eq!(first.epoch, 1);
        assert!(first.train_loss.is_some());
        assert!((first.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(ToyNet::load(&ckpt).is_ok());
    }

    #[test]
    fn training_moves_weights_and_keeps_util_bounded() {
        let mut net = ToyNet::new(tiny_config(true)).unwrap();
        let before = net.store.clone();
        let s = train(&mut net, &tiny_data(12, 1), &tiny_data(6, 2), &quick(2)).unwrap();
        let moved = before
            .iter()
            .filter(|(_, p)| p.trainable)
            .any(|(id, p)| net.store.get(id).data() != p.value.data());
        assert!(moved);
        for r in &s.history {
            assert!((0.0..=1.0).contains(&r.mean_util), "{}", r.mean_util);
        }
        assert!(s.best.top1 >= s.history[0].top1);
    }

    #[test]
    fn exploding_loss_is_reported() {
        let mut net = ToyNet::new(tiny_config(false)).unwrap();
        let id = net.store.find("head.weight").unwrap();
        net.store.get_mut(id).data_mut()[0] = f64::NAN;
        let err = train(&mut net, &tiny_data(8, 1), &tiny_data(4, 2), &quick(1)).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(msg.contains("epoch 0") && msg.contains("batch 0") && msg.contains("learning rate"), "{msg}");
    }

    #[test]
    fn early_stop_ends_the_run() {
        let mut net = ToyNet::new(tiny_config(false)).unwrap();
        let cfg = TrainConfig {
            stop_at_top1: 1e-9,
            ..quick(5)
        };
        let s = train(&mut net, &tiny_data(8, 1), &tiny_data(4, 2), &cfg).unwrap();
        assert!(s.history.len() < 6 || s.history.iter().skip(1).all(|r| r.top1 == 0.0));
    }
}
