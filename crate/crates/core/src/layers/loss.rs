use crate::autodiff::{Backward, Tape, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

struct CrossEntropyOp {
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Backward for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, g: &[f64], _: &Tensor, _: &[&Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = self.labels.len() as f64;
        let mut d = self.probs.clone();
        for (row, &label) in self.labels.iter().enumerate() {
            d[row * self.classes + label] -= 1.0;
        }
        d.iter_mut().for_each(|v| *v *= g[0] / n);
        vec![Some(d)]
    }
}

impl Tape {
    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let &[n, k] = t.shape() else {
            return Err(dim_err!("cross_entropy: expected [n, K] logits, got {:?}", t.shape()));
        };
        if labels.len() != n {
            return Err(dim_err!("cross_entropy: {n} rows but {} labels", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(contract_err!("cross_entropy: label {bad} outside [0, {k})"));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (row, &label) in t.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            probs.extend(softmax(row));
        }
        let value = Tensor::scalar(total / n as f64);
        let op = CrossEntropyOp {
            probs,
            labels: labels.to_vec(),
            classes: k,
        };
        Ok(self.record(value, &[logits], op))
    }
}
