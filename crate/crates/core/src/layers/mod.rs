//! Layer primitives: convolution, batch norm, pooling, linear, loss and
//! temporal shifts. The tape operations live in the submodules; this module
//! holds the parameterised layer structs the networks are built from.

mod conv;
mod linear;
mod loss;
mod norm;
mod pool;
mod temporal;

pub use conv::{conv2d_backward, conv2d_forward, conv_out_dim, ConvGeometry};
pub use loss::softmax;
pub use norm::BatchStats;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::gating::conv_flops;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Kaiming-uniform with ReLU gain: `U(−√(6/fan_in), √(6/fan_in))`.
fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let w = kaiming_uniform(rng, &[out_channels, kernel, kernel, in_channels], fan_in);
        Conv2dLayer {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binds: &Bindings, x: Var) -> Result<Var> {
        tape.conv2d(x, binds.var(self.weight), binds.var(self.bias), self.stride, self.padding)
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out_dim(h, self.kernel, self.stride, self.padding)?,
            conv_out_dim(w, self.kernel, self.stride, self.padding)?,
        ))
    }

    /// Analytic cost `c'·h'·w'·(k·k·c + 1)` for an `h × w` input.
    pub fn flops(&self, h: usize, w: usize) -> Result<f64> {
        let (oh, ow) = self.output_dims(h, w)?;
        Ok(conv_flops(self.out_channels, oh, ow, self.kernel, self.in_channels))
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.kernel * self.kernel * self.in_channels + 1)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub layer: BatchNormLayer,
    pub stats: BatchStats,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNormLayer {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &Bindings,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let (g, b) = (binds.var(self.gamma), binds.var(self.beta));
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, self.eps)?;
                updates.push(BnUpdate {
                    layer: self.clone(),
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                g,
                b,
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
                self.eps,
            ),
        }
    }

    pub fn apply_update(&self, store: &mut ParamStore, stats: &BatchStats) {
        let m = self.momentum;
        for (r, s) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s;
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = kaiming_uniform(rng, &[out_features, in_features], in_features);
        Self::with_weight(store, name, w)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize) -> Self {
        Self::with_weight(store, name, Tensor::zeros(&[out_features, in_features]))
    }

    fn with_weight(store: &mut ParamStore, name: &str, w: Tensor) -> Self {
        let (out_features, in_features) = (w.shape()[0], w.shape()[1]);
        LinearLayer {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), true),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binds: &Bindings, x: Var) -> Result<Var> {
        tape.linear(x, binds.var(self.weight), binds.var(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }
}
