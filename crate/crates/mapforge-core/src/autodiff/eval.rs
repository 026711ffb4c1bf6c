//! Forward evaluation of expression graphs.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::expr::{topo_order, Expr, Op};
use super::kernels;

/// Named tensors supplying values for the free variables of a graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    map: HashMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

/// Evaluate a single expression. See [`evaluate_all`].
pub fn evaluate(expr: &Expr, bindings: &Bindings) -> Result<Tensor> {
    Ok(evaluate_all(&[expr.clone()], bindings)?.pop().unwrap())
}

/// Evaluate several expressions sharing one value cache, so common
/// subgraphs are computed once. Deterministic for fixed bindings; the
/// requested outputs are checked for non-finite entries.
pub fn evaluate_all(exprs: &[Expr], bindings: &Bindings) -> Result<Vec<Tensor>> {
    let order = topo_order(exprs);
    let mut values: HashMap<u64, Tensor> = HashMap::with_capacity(order.len());

    for node in &order {
        let value = eval_node(node, bindings, &values)?;
        values.insert(node.id(), value);
    }

    let mut out = Vec::with_capacity(exprs.len());
    for expr in exprs {
        let value = values
            .get(&expr.id())
            .expect("every requested root is in the topological order")
            .clone();
        value.ensure_finite(&expr.describe())?;
        out.push(value);
    }
    Ok(out)
}

fn eval_node(expr: &Expr, bindings: &Bindings, values: &HashMap<u64, Tensor>) -> Result<Tensor> {
    let val = |e: &Expr| -> &Tensor {
        values
            .get(&e.id())
            .expect("operands are evaluated before consumers")
    };
    let shape = expr.shape().to_vec();

    let out = match &expr.0.op {
        Op::Var { name } => {
            let bound = bindings
                .get(name)
                .ok_or_else(|| Error::UnboundVariable(name.clone()))?;
            if bound.shape() != expr.shape() {
                return Err(Error::shape(format!(
                    "variable `{name}` declared {:?} but bound to {:?}",
                    expr.shape(),
                    bound.shape()
                )));
            }
            bound.clone()
        }
        Op::Const { value } => value.clone(),
        Op::Add(a, b) => {
            let (a, b) = (val(a), val(b));
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::from_parts(shape, data)
        }
        Op::Sub(a, b) => {
            let (a, b) = (val(a), val(b));
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            Tensor::from_parts(shape, data)
        }
        Op::Mul(a, b) => {
            let (a, b) = (val(a), val(b));
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::from_parts(shape, data)
        }
        Op::Scale(a, c) => {
            let data = val(a).data().iter().map(|x| x * c).collect();
            Tensor::from_parts(shape, data)
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            Tensor::from_parts(shape, kernels::matmul(val(a).data(), val(b).data(), m, k, n))
        }
        Op::Transpose(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Tensor::from_parts(shape, kernels::transpose(val(a).data(), r, c))
        }
        Op::Conv2d { image, kernel, pad } => {
            let x = image.shape();
            let k = kernel.shape();
            Tensor::from_parts(
                shape,
                kernels::conv2d(
                    val(image).data(),
                    val(kernel).data(),
                    x[0], x[1], x[2], x[3], k[0], k[1], k[3], *pad,
                ),
            )
        }
        Op::ConvInputGrad { upstream, kernel, pad } => {
            let u = upstream.shape();
            let k = kernel.shape();
            Tensor::from_parts(
                shape,
                kernels::conv2d_input_grad(
                    val(upstream).data(),
                    val(kernel).data(),
                    u[0], u[1], u[2], u[3], k[0], k[1], k[2], *pad,
                ),
            )
        }
        Op::ConvKernelGrad { image, upstream, pad } => {
            let x = image.shape();
            let u = upstream.shape();
            Tensor::from_parts(
                shape,
                kernels::conv2d_kernel_grad(
                    val(image).data(),
                    val(upstream).data(),
                    x[0], x[1], x[2], x[3], u[1], u[2], u[3], *pad,
                ),
            )
        }
        Op::Relu(a) => {
            let data = val(a).data().iter().map(|&x| x.max(0.0)).collect();
            Tensor::from_parts(shape, data)
        }
        Op::StepPos(a) => {
            let data = val(a)
                .data()
                .iter()
                .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                .collect();
            Tensor::from_parts(shape, data)
        }
        Op::Sign(a) => {
            let data = val(a).data().iter().map(|&x| kernels::sign(x)).collect();
            Tensor::from_parts(shape, data)
        }
        Op::Clamp(a, lo, hi) => {
            let data = val(a).data().iter().map(|&x| x.clamp(*lo, *hi)).collect();
            Tensor::from_parts(shape, data)
        }
        Op::InsideMask(a, lo, hi) => {
            let data = val(a)
                .data()
                .iter()
                .map(|&x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 })
                .collect();
            Tensor::from_parts(shape, data)
        }
        Op::Reshape(a) => Tensor::from_parts(shape, val(a).data().to_vec()),
        Op::ReducePrefix(a, k) => {
            let lead: usize = a.shape()[..*k].iter().product();
            let rest: usize = a.shape()[*k..].iter().product();
            Tensor::from_parts(shape, kernels::reduce_prefix(val(a).data(), lead, rest))
        }
        Op::ReduceSuffix(a, k) => {
            let chunk: usize = a.shape()[a.rank() - k..].iter().product();
            Tensor::from_parts(shape, kernels::reduce_suffix(val(a).data(), chunk))
        }
        Op::BroadcastPrefix(a, prefix) => {
            let lead: usize = prefix.iter().product();
            Tensor::from_parts(shape, kernels::broadcast_prefix(val(a).data(), lead))
        }
        Op::BroadcastSuffix(a, suffix) => {
            let chunk: usize = suffix.iter().product();
            Tensor::from_parts(shape, kernels::broadcast_suffix(val(a).data(), chunk))
        }
        Op::SoftmaxRows(a) => {
            let (n, k) = (a.shape()[0], a.shape()[1]);
            Tensor::from_parts(shape, kernels::softmax_rows(val(a).data(), n, k))
        }
        Op::SceLoss { logits, labels } => {
            let (n, k) = (logits.shape()[0], logits.shape()[1]);
            Tensor::from_parts(shape, kernels::sce_loss(val(logits).data(), labels, n, k))
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let x = Expr::var("x", &[3]);
        let b = Bindings::new().bind("x", Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = evaluate(&x.relu(), &b).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::new(vec![3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let i = Expr::constant(eye);
        let x = Expr::var("a", &[3, 3]);
        let y = evaluate(&i.matmul(&x).unwrap(), &Bindings::new().bind("a", a.clone())).unwrap();
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn cross_entropy_of_even_logits_is_ln2() {
        let z = Expr::var("z", &[1, 2]);
        let loss = z.softmax_cross_entropy(&[0]).unwrap().mean();
        let b = Bindings::new().bind("z", Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let v = evaluate(&loss, &b).unwrap().scalar_value();
        assert!((v - 0.693_147_2).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn unbound_variable_is_an_error() {
        let x = Expr::var("x", &[1]);
        assert!(matches!(
            evaluate(&x, &Bindings::new()),
            Err(Error::UnboundVariable(name)) if name == "x"
        ));
    }

    #[test]
    fn binding_shape_mismatch_is_an_error() {
        let x = Expr::var("x", &[2]);
        let b = Bindings::new().bind("x", Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        assert!(matches!(evaluate(&x, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn evaluation_is_pure() {
        let x = Expr::var("x", &[4]);
        let y = x.mul(&x).unwrap().relu().mean();
        let b = Bindings::new().bind(
            "x",
            Tensor::new(vec![4], vec![0.3, -1.7, 2.9, 0.0]).unwrap(),
        );
        let v1 = evaluate(&y, &b).unwrap();
        let v2 = evaluate(&y, &b).unwrap();
        assert_eq!(v1.data(), v2.data());
    }
}
