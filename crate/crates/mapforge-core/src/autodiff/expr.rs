//! Expression nodes and shape-checked constructors.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// One primitive operation. Operands are shared subgraphs.
///
/// Beyond the user-facing catalog, a few internal primitives exist so that
/// every adjoint can be expressed in terms of differentiable nodes:
/// `Transpose` (matmul adjoints), the convolution adjoint pair (all three
/// convolution ops are bilinear and close under differentiation), the
/// reduce/broadcast pairs (each is the adjoint of its partner), `StepPos`
/// (relu adjoint mask) and `InsideMask` (clamp adjoint mask).
#[derive(Debug)]
pub(crate) enum Op {
    Var { name: String },
    Const { value: Tensor },
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    /// Multiply every element by a compile-time constant.
    Scale(Expr, f32),
    Matmul(Expr, Expr),
    Transpose(Expr),
    /// Cross-correlation of `[n,h,w,ci]` with `[kh,kw,ci,co]`, stride 1,
    /// symmetric zero padding `pad`.
    Conv2d { image: Expr, kernel: Expr, pad: usize },
    /// Adjoint of `Conv2d` with respect to the image: `upstream` is
    /// output-shaped, the result is image-shaped.
    ConvInputGrad { upstream: Expr, kernel: Expr, pad: usize },
    /// Adjoint of `Conv2d` with respect to the kernel.
    ConvKernelGrad { image: Expr, upstream: Expr, pad: usize },
    Relu(Expr),
    /// 1 where x > 0, else 0. Derivative declared zero.
    StepPos(Expr),
    /// sign with sign(0) = 0. Derivative declared zero.
    Sign(Expr),
    Clamp(Expr, f32, f32),
    /// 1 where lo <= x <= hi, else 0. Derivative declared zero.
    InsideMask(Expr, f32, f32),
    /// Reinterpret the operand's data with this node's shape.
    Reshape(Expr),
    /// Sum over the first `k` axes.
    ReducePrefix(Expr, usize),
    /// Sum over the last `k` axes.
    ReduceSuffix(Expr, usize),
    /// Repeat the operand along new leading axes.
    BroadcastPrefix(Expr, Vec<usize>),
    /// Repeat each element along new trailing axes.
    BroadcastSuffix(Expr, Vec<usize>),
    /// Row-wise softmax of a `[n, k]` tensor.
    SoftmaxRows(Expr),
    /// Per-row `−log softmax(logits)[label]`; produces a `[n]` tensor.
    /// Labels are attached constants, not differentiable operands.
    SceLoss { logits: Expr, labels: Rc<Vec<usize>> },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub id: u64,
    pub shape: Vec<usize>,
    pub op: Op,
}

/// A node in an immutable computation DAG.
///
/// Cloning is cheap (reference-counted). Two `Expr`s compare as the same
/// node iff they share identity, not structure.
#[derive(Clone, Debug)]
pub struct Expr(pub(crate) Rc<Node>);

fn node(shape: Vec<usize>, op: Op) -> Expr {
    Expr(Rc::new(Node {
        id: fresh_id(),
        shape,
        op,
    }))
}

impl Expr {
    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// True when both refer to the same graph node.
    pub fn same_node(&self, other: &Expr) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Short description used in error messages.
    pub(crate) fn describe(&self) -> String {
        match &self.0.op {
            Op::Var { name } => format!("variable `{name}`"),
            _ => format!("expression #{}", self.0.id),
        }
    }

    /// A free variable with a declared shape, bound at evaluation time.
    pub fn var(name: impl Into<String>, shape: &[usize]) -> Expr {
        node(shape.to_vec(), Op::Var { name: name.into() })
    }

    pub fn constant(value: Tensor) -> Expr {
        node(value.shape().to_vec(), Op::Const { value })
    }

    pub fn scalar_const(value: f32) -> Expr {
        Expr::constant(Tensor::scalar(value))
    }

    fn require_same_shape(&self, other: &Expr, op: &str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{op} requires equal shapes, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn add(&self, other: &Expr) -> Result<Expr> {
        self.require_same_shape(other, "add")?;
        Ok(node(self.0.shape.clone(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Expr) -> Result<Expr> {
        self.require_same_shape(other, "subtract")?;
        Ok(node(self.0.shape.clone(), Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Expr) -> Result<Expr> {
        self.require_same_shape(other, "multiply")?;
        Ok(node(self.0.shape.clone(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, factor: f32) -> Expr {
        node(self.0.shape.clone(), Op::Scale(self.clone(), factor))
    }

    pub fn neg(&self) -> Expr {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Expr) -> Result<Expr> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape(format!(
                "matmul requires [m,k] x [k,n], got {a:?} x {b:?}"
            )));
        }
        Ok(node(
            vec![a[0], b[1]],
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Expr> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!(
                "transpose requires a rank-2 tensor, got {s:?}"
            )));
        }
        Ok(node(vec![s[1], s[0]], Op::Transpose(self.clone())))
    }

    /// 2-D cross-correlation, stride 1, symmetric zero padding.
    ///
    /// `self` is `[n, h, w, ci]`, `kernel` is `[kh, kw, ci, co]`; the result
    /// is `[n, h + 2·pad − kh + 1, w + 2·pad − kw + 1, co]`.
    pub fn conv2d(&self, kernel: &Expr, pad: usize) -> Result<Expr> {
        let (x, k) = (self.shape(), kernel.shape());
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d requires [n,h,w,ci] x [kh,kw,ci,co], got {x:?} x {k:?}"
            )));
        }
        if x[3] != k[2] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: image has {}, kernel expects {}",
                x[3], k[2]
            )));
        }
        let oh = (x[1] + 2 * pad).checked_sub(k[0] - 1);
        let ow = (x[2] + 2 * pad).checked_sub(k[1] - 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(node(
                vec![x[0], oh, ow, k[3]],
                Op::Conv2d {
                    image: self.clone(),
                    kernel: kernel.clone(),
                    pad,
                },
            )),
            _ => Err(Error::shape(format!(
                "conv2d kernel {k:?} does not fit image {x:?} with pad {pad}"
            ))),
        }
    }

    /// Adjoint of [`Expr::conv2d`] with respect to the image.
    pub(crate) fn conv2d_input_grad(upstream: &Expr, kernel: &Expr, pad: usize) -> Expr {
        let (u, k) = (upstream.shape(), kernel.shape());
        debug_assert_eq!(u.len(), 4);
        debug_assert_eq!(k.len(), 4);
        debug_assert_eq!(u[3], k[3]);
        let h = u[1] + k[0] - 1 - 2 * pad;
        let w = u[2] + k[1] - 1 - 2 * pad;
        node(
            vec![u[0], h, w, k[2]],
            Op::ConvInputGrad {
                upstream: upstream.clone(),
                kernel: kernel.clone(),
                pad,
            },
        )
    }

    /// Adjoint of [`Expr::conv2d`] with respect to the kernel.
    pub(crate) fn conv2d_kernel_grad(image: &Expr, upstream: &Expr, pad: usize) -> Expr {
        let (x, u) = (image.shape(), upstream.shape());
        debug_assert_eq!(x.len(), 4);
        debug_assert_eq!(u.len(), 4);
        debug_assert_eq!(x[0], u[0]);
        let kh = x[1] + 2 * pad + 1 - u[1];
        let kw = x[2] + 2 * pad + 1 - u[2];
        node(
            vec![kh, kw, x[3], u[3]],
            Op::ConvKernelGrad {
                image: image.clone(),
                upstream: upstream.clone(),
                pad,
            },
        )
    }

    pub fn relu(&self) -> Expr {
        node(self.0.shape.clone(), Op::Relu(self.clone()))
    }

    /// 1 where the operand is strictly positive, else 0 (zero derivative).
    pub(crate) fn step_pos(&self) -> Expr {
        node(self.0.shape.clone(), Op::StepPos(self.clone()))
    }

    /// Elementwise sign with sign(0) = 0 and zero derivative everywhere.
    pub fn sign(&self) -> Expr {
        node(self.0.shape.clone(), Op::Sign(self.clone()))
    }

    /// Clamp to `[lo, hi]`. The derivative is 1 on `[lo, hi]` and 0 outside.
    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Expr> {
        if !(lo <= hi) {
            return Err(Error::Config(format!(
                "clamp interval is empty: [{lo}, {hi}]"
            )));
        }
        Ok(node(self.0.shape.clone(), Op::Clamp(self.clone(), lo, hi)))
    }

    pub(crate) fn inside_mask(&self, lo: f32, hi: f32) -> Expr {
        node(self.0.shape.clone(), Op::InsideMask(self.clone(), lo, hi))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Expr> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape(),
                self.numel(),
                shape,
                numel
            )));
        }
        Ok(node(shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Sum over the first `k` axes.
    pub fn reduce_prefix(&self, k: usize) -> Result<Expr> {
        if k > self.rank() {
            return Err(Error::shape(format!(
                "cannot reduce {k} leading axes of rank-{} tensor",
                self.rank()
            )));
        }
        Ok(node(
            self.0.shape[k..].to_vec(),
            Op::ReducePrefix(self.clone(), k),
        ))
    }

    /// Sum over the last `k` axes.
    pub fn reduce_suffix(&self, k: usize) -> Result<Expr> {
        if k > self.rank() {
            return Err(Error::shape(format!(
                "cannot reduce {k} trailing axes of rank-{} tensor",
                self.rank()
            )));
        }
        Ok(node(
            self.0.shape[..self.rank() - k].to_vec(),
            Op::ReduceSuffix(self.clone(), k),
        ))
    }

    /// Repeat along new leading axes: shape becomes `prefix ++ shape`.
    pub fn broadcast_prefix(&self, prefix: &[usize]) -> Result<Expr> {
        if prefix.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in prefix {prefix:?}")));
        }
        let mut shape = prefix.to_vec();
        shape.extend_from_slice(self.shape());
        Ok(node(shape, Op::BroadcastPrefix(self.clone(), prefix.to_vec())))
    }

    /// Repeat each element along new trailing axes: shape becomes
    /// `shape ++ suffix`.
    pub fn broadcast_suffix(&self, suffix: &[usize]) -> Result<Expr> {
        if suffix.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in suffix {suffix:?}")));
        }
        let mut shape = self.0.shape.clone();
        shape.extend_from_slice(suffix);
        Ok(node(shape, Op::BroadcastSuffix(self.clone(), suffix.to_vec())))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&self) -> Expr {
        if self.rank() == 0 {
            return self.clone();
        }
        node(vec![], Op::ReduceSuffix(self.clone(), self.rank()))
    }

    /// Mean of all elements, producing a scalar.
    pub fn mean(&self) -> Expr {
        let n = self.numel();
        self.sum().scale(1.0 / n as f32)
    }

    /// Row-wise softmax of a `[n, k]` tensor.
    pub fn softmax_rows(&self) -> Result<Expr> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "softmax_rows requires a [n,k] tensor, got {:?}",
                self.shape()
            )));
        }
        Ok(node(self.0.shape.clone(), Op::SoftmaxRows(self.clone())))
    }

    /// Per-row cross-entropy between softmax of `self` (a `[n, k]` logit
    /// matrix) and integer labels; produces a `[n]` loss vector.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Expr> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!(
                "softmax_cross_entropy requires [n,k] logits, got {s:?}"
            )));
        }
        if labels.len() != s[0] {
            return Err(Error::shape(format!(
                "{} labels for {} logit rows",
                labels.len(),
                s[0]
            )));
        }
        for &label in labels {
            if label >= s[1] {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: s[1],
                });
            }
        }
        Ok(node(
            vec![s[0]],
            Op::SceLoss {
                logits: self.clone(),
                labels: Rc::new(labels.to_vec()),
            },
        ))
    }

    /// Operands of this node, in a fixed order.
    pub(crate) fn operands(&self) -> Vec<Expr> {
        match &self.0.op {
            Op::Var { .. } | Op::Const { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::StepPos(a)
            | Op::Sign(a)
            | Op::Clamp(a, _, _)
            | Op::InsideMask(a, _, _)
            | Op::Reshape(a)
            | Op::ReducePrefix(a, _)
            | Op::ReduceSuffix(a, _)
            | Op::BroadcastPrefix(a, _)
            | Op::BroadcastSuffix(a, _)
            | Op::SoftmaxRows(a) => vec![a.clone()],
            Op::Conv2d { image, kernel, .. } => vec![image.clone(), kernel.clone()],
            Op::ConvInputGrad { upstream, kernel, .. } => {
                vec![upstream.clone(), kernel.clone()]
            }
            Op::ConvKernelGrad { image, upstream, .. } => {
                vec![image.clone(), upstream.clone()]
            }
            Op::SceLoss { logits, .. } => vec![logits.clone()],
        }
    }
}

/// Topological order (operands before consumers) of all nodes reachable
/// from `roots`. Iterative so deep chains cannot overflow the stack.
pub(crate) fn topo_order(roots: &[Expr]) -> Vec<Expr> {
    use std::collections::HashSet;

    let mut order = Vec::new();
    let mut done: HashSet<u64> = HashSet::new();
    // (node, operands_pushed)
    let mut stack: Vec<(Expr, bool)> = roots.iter().rev().map(|e| (e.clone(), false)).collect();

    while let Some((expr, expanded)) = stack.pop() {
        if done.contains(&expr.id()) {
            continue;
        }
        if expanded {
            done.insert(expr.id());
            order.push(expr);
        } else {
            stack.push((expr.clone(), true));
            for operand in expr.operands() {
                if !done.contains(&operand.id()) {
                    stack.push((operand, false));
                }
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_static_and_checked() {
        let a = Expr::var("a", &[2, 3]);
        let b = Expr::var("b", &[3, 4]);
        assert_eq!(a.matmul(&b).unwrap().shape(), &[2, 4]);
        assert!(a.add(&b).is_err());
        assert!(b.matmul(&a).is_err());
        assert!(a.reshape(&[7]).is_err());
        assert_eq!(a.reshape(&[6]).unwrap().shape(), &[6]);
    }

    #[test]
    fn conv_output_shape() {
        let x = Expr::var("x", &[2, 28, 28, 1]);
        let k = Expr::var("k", &[5, 5, 1, 8]);
        assert_eq!(x.conv2d(&k, 0).unwrap().shape(), &[2, 24, 24, 8]);
        assert_eq!(x.conv2d(&k, 2).unwrap().shape(), &[2, 28, 28, 8]);
        let k_bad = Expr::var("k2", &[5, 5, 3, 8]);
        assert!(x.conv2d(&k_bad, 0).is_err());
    }

    #[test]
    fn topo_order_puts_operands_first() {
        let x = Expr::var("x", &[2]);
        let y = x.mul(&x).unwrap();
        let z = y.add(&x).unwrap();
        let order = topo_order(&[z.clone()]);
        let pos = |e: &Expr| order.iter().position(|o| o.same_node(e)).unwrap();
        assert!(pos(&x) < pos(&y));
        assert!(pos(&y) < pos(&z));
        assert_eq!(order.len(), 3);
    }
}
