use crate::autodiff::{Backward, Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

struct GlobalAvgPoolOp {
    plane: usize,
}

impl Backward for GlobalAvgPoolOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, g: &[f64], _: &Tensor, _: &[&Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.plane as f64;
        let dx = g
            .iter()
            .flat_map(|gi| std::iter::repeat_n(gi * inv, self.plane))
            .collect();
        vec![Some(dx)]
    }
}

impl Tape {
    /// Spatial mean per channel: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[n, c, h, w] = tx.shape() else {
            return Err(dim_err!("global_avg_pool: expected [n, c, h, w], got {:?}", tx.shape()));
        };
        let plane = h * w;
        let data = tx
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.record(value, &[x], GlobalAvgPoolOp { plane }))
    }
}
