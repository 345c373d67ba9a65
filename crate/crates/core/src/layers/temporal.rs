//! Operations across the frame axis of a folded `[(n·T), ...]` batch.

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

fn clip_layout(shape: &[usize], frames: usize, op: &str) -> Result<usize> {
    let lead = *shape.first().ok_or_else(|| dim_err!("{op}: scalar input"))?;
    if frames == 0 || lead % frames != 0 {
        return Err(contract_err!(
            "{op}: leading dimension {lead} is not divisible by T = {frames}"
        ));
    }
    Ok(lead / frames)
}

/// Per-channel frame offsets of a temporal shift.
#[derive(Clone, Debug)]
struct ShiftPlan {
    frames: usize,
    channels: usize,
    plane: usize,
    /// Channels `[0, fold)` read frame `t − 1`; `[fold, 2·fold)` read `t + 1`.
    fold: usize,
}

impl ShiftPlan {
    /// Source frame for channel `ch` at frame `t`, `None` for zero fill.
    fn source(&self, t: usize, ch: usize) -> Option<usize> {
        if ch < self.fold {
            t.checked_sub(1)
        } else if ch < 2 * self.fold {
            (t + 1 < self.frames).then_some(t + 1)
        } else {
            Some(t)
        }
    }

    fn apply(&self, src: &[f64], dst: &mut [f64], transpose: bool) {
        let frame_len = self.channels * self.plane;
        let clips = src.len() / (self.frames * frame_len);
        for clip in 0..clips {
            for t in 0..self.frames {
                for ch in 0..self.channels {
                    let Some(s) = self.source(t, ch) else { continue };
                    let to = ((clip * self.frames + t) * self.channels + ch) * self.plane;
                    let from = ((clip * self.frames + s) * self.channels + ch) * self.plane;
                    let (read, write) = if transpose { (to, from) } else { (from, to) };
                    for i in 0..self.plane {
                        dst[write + i] += src[read + i];
                    }
                }
            }
        }
    }
}

struct ShiftOp {
    plan: ShiftPlan,
    name: &'static str,
}

impl Backward for ShiftOp {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, g: &[f64], _: &Tensor, _: &[&Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; g.len()];
        self.plan.apply(g, &mut dx, true);
        vec![Some(dx)]
    }
}

struct ConcatColsOp {
    rows: usize,
    left: usize,
    right: usize,
}

impl Backward for ConcatColsOp {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn backward(&self, g: &[f64], _: &Tensor, _: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let width = self.left + self.right;
        let ga = needs[0].then(|| (0..self.rows).flat_map(|r| g[r * width..][..self.left].to_vec()).collect());
        let gb = needs[1].then(|| {
            (0..self.rows)
                .flat_map(|r| g[r * width + self.left..][..self.right].to_vec())
                .collect()
        });
        vec![ga, gb]
    }
}

struct FrameMeanOp {
    frames: usize,
    width: usize,
}

impl Backward for FrameMeanOp {
    fn name(&self) -> &'static str {
        "frame_mean"
    }

    fn backward(&self, g: &[f64], _: &Tensor, _: &[&Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.frames as f64;
        let dx = g
            .chunks(self.width)
            .flat_map(|row| {
                std::iter::repeat_n(row, self.frames).flat_map(|r| r.iter().map(|v| v * inv))
            })
            .collect();
        vec![Some(dx)]
    }
}

impl Tape {
    /// Temporal channel shift on `[(n·T), c, h, w]`. The first
    /// `⌊fraction·c⌋` channels move forward in time (frame `t` receives
    /// frame `t − 1`, zero at `t = 0`), the next `⌊fraction·c⌋` move backward
    /// (zero at `t = T − 1`), the rest are untouched.
    pub fn temporal_shift(&mut self, x: Var, frames: usize, fraction: f64) -> Result<Var> {
        let tx = self.value(x);
        clip_layout(tx.shape(), frames, "temporal_shift")?;
        let &[_, c, h, w] = tx.shape() else {
            return Err(dim_err!("temporal_shift: expected [(n·T), c, h, w], got {:?}", tx.shape()));
        };
        if !(0.0..=0.5).contains(&fraction) {
            return Err(contract_err!("temporal_shift: fraction {fraction} outside [0, 0.5]"));
        }
        let plan = ShiftPlan {
            frames,
            channels: c,
            plane: h * w,
            fold: (fraction * c as f64).floor() as usize,
        };
        let mut out = vec![0.0; tx.numel()];
        plan.apply(tx.data(), &mut out, false);
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.record(value, &[x], ShiftOp { plan, name: "temporal_shift" }))
    }

    /// The previous frame of every clip: `out[t] = x[t − 1]`, zeros at `t = 0`.
    pub fn previous_frame(&mut self, x: Var, frames: usize) -> Result<Var> {
        let tx = self.value(x);
        clip_layout(tx.shape(), frames, "previous_frame")?;
        let plan = ShiftPlan {
            frames,
            channels: 1,
            plane: tx.numel() / tx.shape()[0],
            fold: 1,
        };
        let mut out = vec![0.0; tx.numel()];
        plan.apply(tx.data(), &mut out, false);
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.record(value, &[x], ShiftOp { plan, name: "previous_frame" }))
    }

    /// `[n, p] ++ [n, q] -> [n, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[rows, left], &[rows_b, right]) = (ta.shape(), tb.shape()) else {
            return Err(dim_err!("concat_cols: expected 2-d inputs, got {:?} and {:?}", ta.shape(), tb.shape()));
        };
        if rows != rows_b {
            return Err(dim_err!("concat_cols: row counts {rows} and {rows_b} differ"));
        }
        let data = (0..rows)
            .flat_map(|r| {
                ta.data()[r * left..][..left]
                    .iter()
                    .chain(&tb.data()[r * right..][..right])
                    .copied()
            })
            .collect();
        let value = Tensor::new(&[rows, left + right], data)?;
        Ok(self.record(value, &[a, b], ConcatColsOp { rows, left, right }))
    }

    /// Mean over the frames of each clip: `[(n·T), k] -> [n, k]`.
    pub fn frame_mean(&mut self, x: Var, frames: usize) -> Result<Var> {
        let tx = self.value(x);
        let clips = clip_layout(tx.shape(), frames, "frame_mean")?;
        let width = tx.numel() / tx.shape()[0];
        let mut out = vec![0.0; clips * width];
        for (clip, dst) in out.chunks_mut(width).enumerate() {
            for t in 0..frames {
                let row = &tx.data()[(clip * frames + t) * width..][..width];
                dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d /= frames as f64);
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = clips;
        let value = Tensor::new(&shape, out)?;
        Ok(self.record(value, &[x], FrameMeanOp { frames, width }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_op, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shift(x: &Tensor, frames: usize, fraction: f64) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = tape.temporal_shift(v, frames, fraction).unwrap();
        tape.value(s).clone()
    }

    #[test]
    fn forward_shift_moves_channel_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // T = 2, c = 2, fraction 0.5 covers channel 0 forward, channel 1 backward.
        let x = random_tensor(&mut rng, &[2, 2, 2, 2]);
        let y = shift(&x, 2, 0.5);
        for i in 0..4 {
            assert_eq!(y.at(&[1, 0, i / 2, i % 2]), x.at(&[0, 0, i / 2, i % 2]));
            assert_eq!(y.at(&[0, 0, i / 2, i % 2]), 0.0);
            assert_eq!(y.at(&[0, 1, i / 2, i % 2]), x.at(&[1, 1, i / 2, i % 2]));
            assert_eq!(y.at(&[1, 1, i / 2, i % 2]), 0.0);
        }
    }

    #[test]
    fn zero_fraction_is_identity_and_double_shift_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[8, 8, 3, 3]);
        assert_eq!(shift(&x, 4, 0.0), x);
        let twice = shift(&shift(&x, 4, 0.125), 4, 0.125);
        assert!(twice.max_abs_diff(&x) > 0.0);
        assert_eq!(twice.numel(), x.numel());
    }

    #[test]
    fn shift_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, &[6, 8, 2, 2]);
        let b = random_tensor(&mut rng, &[6, 8, 2, 2]);
        let sum = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
        let lhs = shift(&sum, 3, 0.25);
        let (sa, sb) = (shift(&a, 3, 0.25), shift(&b, 3, 0.25));
        for i in 0..lhs.numel() {
            assert!((lhs.data()[i] - sa.data()[i] - sb.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn indivisible_batch_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 2, 2, 2]));
        assert!(matches!(tape.temporal_shift(x, 2, 0.25), Err(crate::Error::Contract(_))));
        assert!(matches!(tape.frame_mean(x, 2), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn frame_mean_averages_each_clip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap());
        let m = tape.frame_mean(x, 2).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 2.0]);
        let m = tape.frame_mean(x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 3.0, 3.0, 1.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, &[6, 8, 2, 3]);
        let err = check_op(std::slice::from_ref(&x), |t, v| t.temporal_shift(v[0], 3, 0.25), &mut rng).unwrap();
        assert!(err < 1e-6);
        let err = check_op(&[x], |t, v| t.previous_frame(v[0], 2), &mut rng).unwrap();
        assert!(err < 1e-6);
        let a = random_tensor(&mut rng, &[4, 3]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let err = check_op(&[a.clone(), b], |t, v| t.concat_cols(v[0], v[1]), &mut rng).unwrap();
        assert!(err < 1e-6);
        let err = check_op(&[a], |t, v| t.frame_mean(v[0], 2), &mut rng).unwrap();
        assert!(err < 1e-6);
    }
}
