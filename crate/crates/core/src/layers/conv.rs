//! 2D cross-correlation via im2col + GEMM.
//!
//! Weights are laid out `[out_c, k, k, in_c]`; im2col rows follow the same
//! `(ky, kx, ci)` order so a weight row is a contiguous GEMM operand.

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{dim_err, Result};
use crate::linalg::gemm;
use crate::par;
use crate::tensor::Tensor;

/// Frames per partial sum when reducing weight gradients.
const GRAD_GROUP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((size + 2·padding − k) / stride) + 1`
pub fn conv_out_dim(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(dim_err!("conv: kernel and stride must be positive"));
    }
    let padded = size + 2 * padding;
    if padded < k {
        return Err(dim_err!(
            "conv: kernel {k} larger than padded input {padded}"
        ));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(dim_err!(
                "conv2d: expected 4-d input and weight, got {x_shape:?} and {w_shape:?}"
            ));
        }
        let [n, in_c, h, w] = [x_shape[0], x_shape[1], x_shape[2], x_shape[3]];
        let [out_c, k, k2, wc] = [w_shape[0], w_shape[1], w_shape[2], w_shape[3]];
        if k != k2 {
            return Err(dim_err!("conv2d: non-square kernel {w_shape:?}"));
        }
        if wc != in_c {
            return Err(dim_err!(
                "conv2d: input has {in_c} channels but weight {w_shape:?} expects {wc}"
            ));
        }
        Ok(ConvGeometry {
            n,
            in_c,
            h,
            w,
            out_c,
            k,
            stride,
            padding,
            out_h: conv_out_dim(h, k, stride, padding)?,
            out_w: conv_out_dim(w, k, stride, padding)?,
        })
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.in_c
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_frame(&self) -> usize {
        self.in_c * self.h * self.w
    }

    fn out_frame(&self) -> usize {
        self.out_c * self.out_plane()
    }

    /// Input row/column read by output position `o` through kernel tap `kk`,
    /// or `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, o: usize, kk: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let plane = self.out_plane();
        for ky in 0..self.k {
            for kx in 0..self.k {
                for ci in 0..self.in_c {
                    let row = &mut cols[((ky * self.k + kx) * self.in_c + ci) * plane..][..plane];
                    let src = &x[ci * self.h * self.w..][..self.h * self.w];
                    for oy in 0..self.out_h {
                        let dst = &mut row[oy * self.out_w..][..self.out_w];
                        match self.source(oy, ky, self.h) {
                            None => dst.fill(0.0),
                            Some(iy) => {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.source(ox, kx, self.w) {
                                        Some(ix) => src[iy * self.w + ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        for ky in 0..self.k {
            for kx in 0..self.k {
                for ci in 0..self.in_c {
                    let row = &cols[((ky * self.k + kx) * self.in_c + ci) * plane..][..plane];
                    let dst = &mut dx[ci * self.h * self.w..][..self.h * self.w];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dst[iy * self.w + ix] += row[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution on plain tensors: `x [n, c, h, w]`,
/// `weight [c', k, k, c]`, `bias [c']`.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, padding)?;
    if bias.numel() != g.out_c {
        return Err(dim_err!(
            "conv2d: bias has {} entries for {} filters",
            bias.numel(),
            g.out_c
        ));
    }
    let mut out = vec![0.0; g.n * g.out_frame()];
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    par::for_each_chunk_mut(&mut out, g.out_frame(), |i, dst| {
        let mut cols = vec![0.0; g.patch() * g.out_plane()];
        g.im2col(&xd[i * g.in_frame()..][..g.in_frame()], &mut cols);
        for (o, plane) in dst.chunks_mut(g.out_plane()).enumerate() {
            plane.fill(bd[o]);
        }
        gemm(g.out_c, g.patch(), g.out_plane(), wd, false, &cols, false, 1.0, dst);
    });
    Tensor::new(&[g.n, g.out_c, g.out_h, g.out_w], out)
}

/// Gradients `(dx, dweight, dbias)` of the convolution for upstream `grad`.
pub fn conv2d_backward(
    geo: &ConvGeometry,
    x: &[f64],
    weight: &[f64],
    grad: &[f64],
    needs: [bool; 3],
) -> [Option<Vec<f64>>; 3] {
    let g = *geo;
    let dx = needs[0].then(|| {
        let mut dx = vec![0.0; g.n * g.in_frame()];
        par::for_each_chunk_mut(&mut dx, g.in_frame(), |i, dst| {
            let mut dcols = vec![0.0; g.patch() * g.out_plane()];
            let gi = &grad[i * g.out_frame()..][..g.out_frame()];
            gemm(g.patch(), g.out_c, g.out_plane(), weight, true, gi, false, 0.0, &mut dcols);
            g.col2im(&dcols, dst);
        });
        dx
    });
    let dw = needs[1].then(|| {
        par::grouped_sum(g.n, GRAD_GROUP, g.out_c * g.patch(), |frames, acc| {
            let mut cols = vec![0.0; g.patch() * g.out_plane()];
            for i in frames {
                g.im2col(&x[i * g.in_frame()..][..g.in_frame()], &mut cols);
                let gi = &grad[i * g.out_frame()..][..g.out_frame()];
                gemm(g.out_c, g.out_plane(), g.patch(), gi, false, &cols, true, 1.0, acc);
            }
        })
    });
    let db = needs[2].then(|| {
        let mut db = vec![0.0; g.out_c];
        for frame in grad.chunks(g.out_frame()) {
            for (o, plane) in frame.chunks(g.out_plane()).enumerate() {
                db[o] += plane.iter().sum::<f64>();
            }
        }
        db
    });
    [dx, dw, db]
}

struct Conv2dOp {
    geo: ConvGeometry,
}

impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, g: &[f64], _: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let [dx, dw, db] = conv2d_backward(
            &self.geo,
            inputs[0].data(),
            inputs[1].data(),
            g,
            [needs[0], needs[1], needs[2]],
        );
        vec![dx, dw, db]
    }
}

/// Gradient-check fixture: conv2d whose weight gradient is deliberately off
/// by one percent.
struct CorruptConv2dOp {
    geo: ConvGeometry,
}

impl Backward for CorruptConv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, g: &[f64], out: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut grads = Conv2dOp { geo: self.geo }.backward(g, out, inputs, needs);
        if let Some(dw) = grads[1].as_mut() {
            dw.iter_mut().for_each(|v| *v *= 1.01);
        }
        grads
    }
}

impl Tape {
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(weight), self.value(bias), stride, padding)?;
        let geo = ConvGeometry::new(self.shape(x), self.shape(weight), stride, padding)?;
        Ok(self.record(value, &[x, weight, bias], Conv2dOp { geo }))
    }

    #[doc(hidden)]
    pub fn conv2d_corrupted(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(weight), self.value(bias), stride, padding)?;
        let geo = ConvGeometry::new(self.shape(x), self.shape(weight), stride, padding)?;
        Ok(self.record(value, &[x, weight, bias], CorruptConv2dOp { geo }))
    }
}
