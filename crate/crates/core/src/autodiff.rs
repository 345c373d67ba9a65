//! Define-by-run reverse-mode differentiation.
//!
//! Every operation is recorded on a [`Tape`] as it executes, in topological
//! order by construction. [`Tape::backward`] walks the record once, in
//! reverse, accumulating gradients into the leaves created with
//! [`Tape::leaf`]. Nodes whose inputs do not require gradients keep only
//! their value, so a tape used for inference never stores backward state.
//!
//! A tape is confined to the thread that builds it. The tensors it produces
//! are plain values and may be sent anywhere.

use crate::error::{contract_err, dim_err, Result};
use crate::linalg::gemm;
use crate::tensor::{same_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded primitive.
pub(crate) trait Backward {
    fn name(&self) -> &'static str;

    /// Gradients for each input, given the gradient of the output. An entry
    /// may be `None` when `needs[i]` is false.
    fn backward(
        &self,
        grad_out: &[f64],
        output: &Tensor,
        inputs: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    is_leaf: bool,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, true, Vec::new(), None)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, true, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Names of the recorded differentiable primitives, in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter_map(|n| n.op.as_ref().map(|op| op.name()))
            .collect()
    }

    pub(crate) fn record(&mut self, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if requires_grad {
            let ids = inputs.iter().map(|v| v.0).collect();
            self.push(value, true, false, ids, Some(Box::new(op)))
        } else {
            self.push(value, false, false, Vec::new(), None)
        }
    }

    fn push(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        is_leaf: bool,
        inputs: Vec<usize>,
        op: Option<Box<dyn Backward>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf,
            inputs,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Accumulates `d loss / d leaf` for every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(contract_err!(
                "backward already ran on this tape; call reset_grads first"
            ));
        }
        let node = &self.nodes[loss.0];
        if !node.value.is_scalar() {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            ));
        }
        if !node.requires_grad {
            return Err(contract_err!("loss is detached from every differentiable leaf"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let in_grads = op.backward(&g, &node.value, &inputs, &needs);
            debug_assert_eq!(in_grads.len(), node.inputs.len());
            for ((&input, need), ig) in node.inputs.iter().zip(&needs).zip(in_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                debug_assert_eq!(ig.len(), self.nodes[input].value.numel(), "{}", op.name());
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        // Only leaves keep their gradient.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.is_leaf {
                *g = None;
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Exp,
    Log,
}

struct BinaryOp {
    kind: BinaryKind,
    b_scalar: bool,
}

impl Backward for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, g: &[f64], _out: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let bval = |i: usize| if self.b_scalar { b[0] } else { b[i] };
        let ga = needs[0].then(|| match self.kind {
            BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
            BinaryKind::Mul => g.iter().enumerate().map(|(i, gi)| gi * bval(i)).collect(),
        });
        let gb = needs[1].then(|| {
            let full: Vec<f64> = match self.kind {
                BinaryKind::Add => g.to_vec(),
                BinaryKind::Sub => g.iter().map(|v| -v).collect(),
                BinaryKind::Mul => g.iter().zip(a).map(|(gi, ai)| gi * ai).collect(),
            };
            if self.b_scalar {
                vec![full.iter().sum()]
            } else {
                full
            }
        });
        vec![ga, gb]
    }
}

struct UnaryOp {
    kind: UnaryKind,
}

impl Backward for UnaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
        }
    }

    fn backward(&self, g: &[f64], out: &Tensor, inputs: &[&Tensor], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let gx = match self.kind {
            UnaryKind::Relu => g
                .iter()
                .zip(x)
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                .collect(),
            UnaryKind::Exp => g.iter().zip(out.data()).map(|(gi, yi)| gi * yi).collect(),
            UnaryKind::Log => g.iter().zip(x).map(|(gi, xi)| gi / xi).collect(),
        };
        vec![Some(gx)]
    }
}

struct ScaleOp {
    factor: f64,
}

impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, g: &[f64], _: &Tensor, _: &[&Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.factor).collect())]
    }
}

struct SumOp {
    scale: f64,
}

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, g: &[f64], _: &Tensor, inputs: &[&Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.scale; inputs[0].numel()])]
    }
}

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, g: &[f64], _: &Tensor, _: &[&Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct MatmulOp {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, g: &[f64], _: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        // dA = G · Bᵀ, dB = Aᵀ · G
        let ga = needs[0].then(|| {
            let mut out = vec![0.0; m * k];
            gemm(m, n, k, g, false, b, true, 0.0, &mut out);
            out
        });
        let gb = needs[1].then(|| {
            let mut out = vec![0.0; k * n];
            gemm(k, m, n, a, true, g, false, 0.0, &mut out);
            out
        });
        vec![ga, gb]
    }
}

impl Tape {
    /// `a (op) b` where `b` has the same shape as `a` or a single element.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let b_scalar = tb.numel() == 1 && ta.numel() != 1;
        if !b_scalar {
            same_shape(&format!("{kind:?}").to_lowercase(), ta, tb)?;
        }
        let bd = tb.data();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, if b_scalar { bd[0] } else { bd[i] }))
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.record(value, &[a, b], BinaryOp { kind, b_scalar }))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
            })
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.record(value, &[a], UnaryOp { kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape(), ta.data().iter().map(|x| x * factor).collect())?;
        Ok(self.record(value, &[a], ScaleOp { factor }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.record(Tensor::scalar(s), &[a], SumOp { scale: 1.0 }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.numel() as f64;
        let s = ta.data().iter().sum::<f64>() / n;
        Ok(self.record(Tensor::scalar(s), &[a], SumOp { scale: 1.0 / n }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.record(value, &[a], ReshapeOp))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err!(
                "matmul: cannot multiply {:?} by {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.record(value, &[a, b], MatmulOp { m, k, n }))
    }
}
