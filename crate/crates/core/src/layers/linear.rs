use crate::autodiff::{Backward, Tape, Var};
use crate::error::{dim_err, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

struct LinearOp {
    n: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Backward for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, g: &[f64], _: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, i, o) = (self.n, self.fan_in, self.fan_out);
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n * i];
            gemm(n, o, i, g, false, w, false, 0.0, &mut dx);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; o * i];
            gemm(o, n, i, g, true, x, false, 0.0, &mut dw);
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0; o];
            for row in g.chunks(o) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            db
        });
        vec![dx, dw, db]
    }
}

impl Tape {
    /// `x · wᵀ + b` with `x [n, in]`, `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[n, fan_in], &[fan_out, w_in]) = (tx.shape(), tw.shape()) else {
            return Err(dim_err!(
                "linear: expected 2-d input and weight, got {:?} and {:?}",
                tx.shape(),
                tw.shape()
            ));
        };
        if w_in != fan_in || tb.numel() != fan_out {
            return Err(dim_err!(
                "linear: input {:?}, weight {:?}, bias {:?} do not agree",
                tx.shape(),
                tw.shape(),
                tb.shape()
            ));
        }
        let mut out: Vec<f64> = (0..n).flat_map(|_| tb.data().iter().copied()).collect();
        gemm(n, fan_in, fan_out, tx.data(), false, tw.data(), true, 1.0, &mut out);
        let value = Tensor::new(&[n, fan_out], out)?;
        Ok(self.record(value, &[x, w, b], LinearOp { n, fan_in, fan_out }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_op, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_constant_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor(&mut rng, &[3, 4]);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.linear(xv, w, b).unwrap();
        assert_eq!(tape.value(y), &x);

        let w = tape.constant(Tensor::zeros(&[2, 4]));
        let b = tape.constant(Tensor::from_vec(vec![1.5, -2.0]));
        let y = tape.linear(xv, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);
    }

    #[test]
    fn mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.linear(x, w, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let x = random_tensor(&mut rng, &[5, 4]);
            let w = random_tensor(&mut rng, &[3, 4]);
            let b = random_tensor(&mut rng, &[3]);
            let err = check_op(&[x, w, b], |t, v| t.linear(v[0], v[1], v[2]), &mut rng).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }
}
