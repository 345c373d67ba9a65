//! Batch normalisation over `[n, c, h, w]`, statistics per channel across
//! the `n·h·w` axes.

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Batch statistics of one training-mode call, used to update running
/// estimates after the step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        [n, c] => Ok((*n, *c, 1)),
        s => Err(dim_err!("batch_norm: expected [n, c, h, w] or [n, c], got {s:?}")),
    }
}

fn check_affine(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        return Err(dim_err!(
            "batch_norm: {c} channels but gamma/beta have {}/{} entries",
            gamma.numel(),
            beta.numel()
        ));
    }
    Ok(())
}

struct BatchNormTrainOp {
    /// Normalised input, pre-affine.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    n: usize,
    c: usize,
    plane: usize,
}

impl Backward for BatchNormTrainOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, g: &[f64], _: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, c, plane) = (self.n, self.c, self.plane);
        let gamma = inputs[1].data();
        let m = (n * plane) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * self.xhat[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            for s in 0..n {
                for ch in 0..c {
                    let k = gamma[ch] * self.inv_std[ch] / m;
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        dx[i] = k * (m * g[i] - sum_g[ch] - self.xhat[i] * sum_gx[ch]);
                    }
                }
            }
            dx
        });
        vec![dx, needs[1].then(|| sum_gx.clone()), needs[2].then(|| sum_g.clone())]
    }
}

struct BatchNormEvalOp {
    xhat: Vec<f64>,
    scale: Vec<f64>,
    c: usize,
    plane: usize,
}

impl Backward for BatchNormEvalOp {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn backward(&self, g: &[f64], _: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (c, plane) = (self.c, self.plane);
        let gamma = inputs[1].data();
        let ch_of = |i: usize| (i / plane) % c;
        let dx = needs[0].then(|| {
            g.iter()
                .enumerate()
                .map(|(i, gi)| gi * gamma[ch_of(i)] * self.scale[ch_of(i)])
                .collect()
        });
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, gi) in g.iter().enumerate() {
            dgamma[ch_of(i)] += gi * self.xhat[i];
            dbeta[ch_of(i)] += gi;
        }
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

impl Tape {
    /// Training-mode batch norm. Returns the output and the batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let tx = self.value(x);
        let (n, c, plane) = dims(tx)?;
        check_affine(c, self.value(gamma), self.value(beta))?;
        let m = (n * plane) as f64;
        let xd = tx.data();
        let mut mean = vec![0.0; c];
        for s in 0..n {
            for (ch, mu) in mean.iter_mut().enumerate() {
                *mu += xd[(s * c + ch) * plane..][..plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                var[ch] += xd[(s * c + ch) * plane..][..plane]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let unbiased = var.iter().map(|v| v / (m - 1.0).max(1.0)).collect();
        let value = Tensor::new(tx.shape(), out)?;
        let op = BatchNormTrainOp {
            xhat,
            inv_std,
            n,
            c,
            plane,
        };
        let out = self.record(value, &[x, gamma, beta], op);
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch norm using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let tx = self.value(x);
        let (_, c, plane) = dims(tx)?;
        check_affine(c, self.value(gamma), self.value(beta))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(dim_err!("batch_norm_eval: running statistics do not have {c} channels"));
        }
        let scale: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        for (i, &xi) in tx.data().iter().enumerate() {
            let ch = (i / plane) % c;
            xhat[i] = (xi - running_mean[ch]) * scale[ch];
            out[i] = gd[ch] * xhat[i] + bd[ch];
        }
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.record(value, &[x, gamma, beta], BatchNormEvalOp { xhat, scale, c, plane }))
    }
}
