//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Each forward pass records onto a fresh [`Tape`]; operations evaluate
//! eagerly and push a node holding their value and operands. Since a node's
//! operands always exist before it, the node vector is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of one backward rule. Used to prove that the
/// self-check suites notice a broken derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the left-operand gradient of every matmul by 1.01.
    MatMul,
    /// Passes gradient through ReLU regardless of the input sign.
    Relu,
    /// Ignores the mask when propagating through `mask_mul`.
    MaskMul,
}

impl std::str::FromStr for BackwardFault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matmul" => Ok(BackwardFault::MatMul),
            "relu" => Ok(BackwardFault::Relu),
            "mask_mul" | "mask-mul" => Ok(BackwardFault::MaskMul),
            other => Err(Error::Domain(format!("unknown backward fault '{other}'"))),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    MaskMul(Var, Tensor),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    SoftThreshold(Var, Var),
    Mse(Var, Tensor),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
    fault: Option<BackwardFault>,
    branch_hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Tape {
            branch_hash: FNV_OFFSET,
            ..Default::default()
        }
    }

    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        let mut tape = Tape::new();
        tape.fault = fault;
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`. Leaves that
    /// require a gradient but received none hold zeros.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Hash of the branch taken by every non-smooth elementwise op recorded
    /// so far (ReLU sign, soft-threshold region). Two forward passes with the
    /// same signature evaluated the same smooth piece of the network.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.record(value, Op::MatMul(a, b), "matmul", &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.record(value, Op::Transpose(a), "transpose", &[a])
    }

    /// Elementwise product with a constant zero-one mask. Masked positions
    /// produce exactly `+0.0` and pass exactly `0.0` gradient back.
    pub fn mask_mul(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(mask, "mask_mul", |x, m| if m == 0.0 { 0.0 } else { x * m })?;
        self.record(value, Op::MaskMul(a, mask.clone()), "mask_mul", &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.record(value, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.record(value, Op::Sub(a, b), "sub", &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.record(value, Op::Scale(a, c), "scale", &[a])
    }

    /// `s * a` for a single-element variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "mul_scalar")?;
        let value = self.value(a).map(|x| sv * x);
        self.record(value, Op::MulScalar(a, s), "mul_scalar", &[a, s])
    }

    /// Adds a length-`m` bias to every column of an `m x n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(bias);
        let (m, n) = av.dims2("add_bias")?;
        if bv.numel() != m {
            return Err(Error::shape("add_bias", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            let b = bv.data()[i];
            row.iter_mut().for_each(|x| *x += b);
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.record(value, Op::AddBias(a, bias), "add_bias", &[a, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let input = self.value(a);
        let mut hash = self.branch_hash;
        for &x in input.data() {
            hash = (hash ^ u64::from(x > 0.0)).wrapping_mul(FNV_PRIME);
        }
        let value = input.map(|x| if x > 0.0 { x } else { 0.0 });
        self.branch_hash = hash;
        self.record(value, Op::Relu(a), "relu", &[a])
    }

    /// `sign(a) * max(|a| - theta, 0)` with a trainable scalar threshold.
    pub fn soft_threshold(&mut self, a: Var, theta: Var) -> Result<Var> {
        let t = self.scalar_of(theta, "soft_threshold")?;
        if t < 0.0 {
            return Err(Error::Domain(format!(
                "soft_threshold requires theta >= 0, got {t}"
            )));
        }
        let input = self.value(a);
        let mut hash = self.branch_hash;
        for &x in input.data() {
            let region = if x > t {
                2
            } else if x < -t {
                1
            } else {
                0
            };
            hash = (hash ^ region).wrapping_mul(FNV_PRIME);
        }
        let value = input.map(|x| soft(x, t));
        self.branch_hash = hash;
        self.record(value, Op::SoftThreshold(a, theta), "soft_threshold", &[a, theta])
    }

    /// Mean squared error over every element.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(target, "mse_loss")?;
        let n = p.numel() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.record(
            Tensor::scalar(total / n),
            Op::Mse(pred, target.clone()),
            "mse_loss",
            &[pred],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(value, Op::Sum(a), "sum", &[a])
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    /// The tape can only be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice on the same tape; record a new forward pass".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss variable is not on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.fill_leaf_grads();
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(idx, &g)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.grads[idx] = Some(g);
            }
            for (target, grad) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut self.grads[target.0] {
                    Some(existing) => existing.accumulate(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        self.fill_leaf_grads();
        Ok(())
    }

    fn fill_leaf_grads(&mut self) {
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
    }

    fn node_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut ga = g.matmul_nt(bv)?.reshape(av.shape())?;
                if self.fault == Some(BackwardFault::MatMul) {
                    ga = ga.map(|x| x * 1.01);
                }
                let gb = av.matmul_tn(g)?.reshape(bv.shape())?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?.reshape(self.value(*a).shape())?)],
            Op::MaskMul(a, mask) => {
                let ga = if self.fault == Some(BackwardFault::MaskMul) {
                    g.clone()
                } else {
                    g.zip_map(mask, "mask_mul", |gv, m| if m == 0.0 { 0.0 } else { gv * m })?
                };
                vec![(*a, ga)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                let av = self.value(*a);
                let gs: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                vec![
                    (*a, g.map(|x| x * sv)),
                    (*s, Tensor::new(self.value(*s).shape().to_vec(), vec![gs])?),
                ]
            }
            Op::AddBias(a, bias) => {
                let n = g.cols();
                let gb: Vec<f64> = g.data().chunks(n).map(|row| row.iter().sum()).collect();
                vec![
                    (*a, g.clone()),
                    (*bias, Tensor::new(self.value(*bias).shape().to_vec(), gb)?),
                ]
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let ga = if self.fault == Some(BackwardFault::Relu) {
                    g.clone()
                } else {
                    g.zip_map(av, "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?
                };
                vec![(*a, ga)]
            }
            Op::SoftThreshold(a, theta) => {
                let t = self.value(*theta).item();
                let av = self.value(*a);
                let ga = g.zip_map(av, "soft_threshold", |gv, x| if x.abs() > t { gv } else { 0.0 })?;
                let gt: f64 = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .filter(|(_, x)| x.abs() > t)
                    .map(|(gv, x)| -x.signum() * gv)
                    .sum();
                vec![
                    (*a, ga),
                    (*theta, Tensor::new(self.value(*theta).shape().to_vec(), vec![gt])?),
                ]
            }
            Op::Mse(pred, target) => {
                let pv = self.value(*pred);
                let scale = 2.0 * g.item() / pv.numel() as f64;
                vec![(*pred, pv.zip_map(target, "mse_loss", |p, t| scale * (p - t))?)]
            }
            Op::Sum(a) => {
                let gv = g.item();
                vec![(*a, Tensor::filled(self.value(*a).shape(), gv))]
            }
        };
        Ok(out)
    }

    fn scalar_of(&self, s: Var, op: &'static str) -> Result<f64> {
        let t = self.value(s);
        if !t.is_scalar() {
            return Err(Error::shape(op, t.shape(), &[1]));
        }
        Ok(t.item())
    }

    fn record(&mut self, value: Tensor, op: Op, name: &'static str, operands: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }
}

/// Scalar soft-thresholding (shrinkage) operator.
pub fn soft(x: f64, theta: f64) -> f64 {
    if x > theta {
        x - theta
    } else if x < -theta {
        x + theta
    } else {
        0.0
    }
}
