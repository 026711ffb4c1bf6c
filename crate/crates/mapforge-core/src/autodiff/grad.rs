//! Gradient construction: reverse-mode differentiation as a graph-to-graph
//! transformation.
//!
//! The adjoint of every node is built out of the same primitive set, so the
//! returned expressions are themselves differentiable. Nesting `gradient`
//! therefore yields exact higher-order derivatives: the second call simply
//! walks the extended graph produced by the first.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::expr::{topo_order, Expr, Op};

/// Differentiate a scalar expression with respect to each entry of `wrt`.
///
/// `wrt` entries are usually variables but may be any node of the graph
/// (the adjoint of an interior node treats that node as an independent
/// input, which is what iterated inner updates need). A target reachable
/// only through zero-derivative primitives (`sign`, `step`, masks) gets a
/// zero tensor of its shape.
pub fn gradient(scalar: &Expr, wrt: &[Expr]) -> Result<Vec<Expr>> {
    if !scalar.shape().is_empty() {
        return Err(Error::NonScalarTarget(scalar.shape().to_vec()));
    }

    let order = topo_order(&[scalar.clone()]);
    let in_graph: HashMap<u64, ()> = order.iter().map(|e| (e.id(), ())).collect();
    for target in wrt {
        if !in_graph.contains_key(&target.id()) {
            return Err(Error::NotInGraph(target.describe()));
        }
    }

    let mut adjoints: HashMap<u64, Expr> = HashMap::new();
    adjoints.insert(scalar.id(), Expr::constant(Tensor::scalar(1.0)));

    for node in order.iter().rev() {
        let Some(upstream) = adjoints.get(&node.id()).cloned() else {
            continue; // no path from this node to the scalar
        };
        accumulate_operand_adjoints(node, &upstream, &mut adjoints)?;
    }

    wrt.iter()
        .map(|target| {
            Ok(match adjoints.get(&target.id()) {
                Some(adj) => adj.clone(),
                None => Expr::constant(Tensor::zeros(target.shape())),
            })
        })
        .collect()
}

fn accumulate(adjoints: &mut HashMap<u64, Expr>, operand: &Expr, contribution: Expr) -> Result<()> {
    match adjoints.remove(&operand.id()) {
        Some(existing) => {
            adjoints.insert(operand.id(), existing.add(&contribution)?);
        }
        None => {
            adjoints.insert(operand.id(), contribution);
        }
    }
    Ok(())
}

/// Push `upstream` (the adjoint of `node`) down to the node's operands.
fn accumulate_operand_adjoints(
    node: &Expr,
    upstream: &Expr,
    adjoints: &mut HashMap<u64, Expr>,
) -> Result<()> {
    let acc = |adjoints: &mut HashMap<u64, Expr>, operand: &Expr, c: Expr| {
        accumulate(adjoints, operand, c)
    };

    match &node.0.op {
        Op::Var { .. } | Op::Const { .. } => {}
        Op::Add(a, b) => {
            acc(adjoints, a, upstream.clone())?;
            acc(adjoints, b, upstream.clone())?;
        }
        Op::Sub(a, b) => {
            acc(adjoints, a, upstream.clone())?;
            acc(adjoints, b, upstream.neg())?;
        }
        Op::Mul(a, b) => {
            acc(adjoints, a, upstream.mul(b)?)?;
            acc(adjoints, b, upstream.mul(a)?)?;
        }
        Op::Scale(a, c) => {
            acc(adjoints, a, upstream.scale(*c))?;
        }
        Op::Matmul(a, b) => {
            acc(adjoints, a, upstream.matmul(&b.transpose()?)?)?;
            acc(adjoints, b, a.transpose()?.matmul(upstream)?)?;
        }
        Op::Transpose(a) => {
            acc(adjoints, a, upstream.transpose()?)?;
        }
        Op::Conv2d { image, kernel, pad } => {
            acc(adjoints, image, Expr::conv2d_input_grad(upstream, kernel, *pad))?;
            acc(adjoints, kernel, Expr::conv2d_kernel_grad(image, upstream, *pad))?;
        }
        // The three convolution ops are pairwise bilinear; their adjoints
        // stay inside the trio, which is what closes the set under
        // repeated differentiation.
        Op::ConvInputGrad { upstream: d, kernel, pad } => {
            acc(adjoints, d, upstream.conv2d(kernel, *pad)?)?;
            acc(adjoints, kernel, Expr::conv2d_kernel_grad(upstream, d, *pad))?;
        }
        Op::ConvKernelGrad { image, upstream: d, pad } => {
            acc(adjoints, image, Expr::conv2d_input_grad(d, upstream, *pad))?;
            acc(adjoints, d, image.conv2d(upstream, *pad)?)?;
        }
        Op::Relu(a) => {
            acc(adjoints, a, upstream.mul(&a.step_pos())?)?;
        }
        Op::Clamp(a, lo, hi) => {
            acc(adjoints, a, upstream.mul(&a.inside_mask(*lo, *hi))?)?;
        }
        // Declared zero-derivative primitives: no contribution flows down.
        Op::StepPos(_) | Op::Sign(_) | Op::InsideMask(_, _, _) => {}
        Op::Reshape(a) => {
            acc(adjoints, a, upstream.reshape(a.shape())?)?;
        }
        Op::ReducePrefix(a, k) => {
            acc(adjoints, a, upstream.broadcast_prefix(&a.shape()[..*k])?)?;
        }
        Op::ReduceSuffix(a, k) => {
            let suffix = a.shape()[a.rank() - k..].to_vec();
            acc(adjoints, a, upstream.broadcast_suffix(&suffix)?)?;
        }
        Op::BroadcastPrefix(a, prefix) => {
            acc(adjoints, a, upstream.reduce_prefix(prefix.len())?)?;
        }
        Op::BroadcastSuffix(a, suffix) => {
            acc(adjoints, a, upstream.reduce_suffix(suffix.len())?)?;
        }
        Op::SoftmaxRows(z) => {
            // dz = s ⊙ (a − rowsum(a ⊙ s)), with s this node's own output.
            let s = node.clone();
            let weighted = upstream.mul(&s)?;
            let row_sums = weighted.reduce_suffix(1)?;
            let k = z.shape()[1];
            let centered = upstream.sub(&row_sums.broadcast_suffix(&[k])?)?;
            acc(adjoints, z, s.mul(&centered)?)?;
        }
        Op::SceLoss { logits, labels } => {
            // dz = a[row] ⊙ (softmax(z) − onehot(labels))
            let (n, k) = (logits.shape()[0], logits.shape()[1]);
            let mut onehot = vec![0.0f32; n * k];
            for (row, &label) in labels.iter().enumerate() {
                onehot[row * k + label] = 1.0;
            }
            let onehot = Expr::constant(Tensor::from_parts(vec![n, k], onehot));
            let diff = logits.softmax_rows()?.sub(&onehot)?;
            let spread = upstream.broadcast_suffix(&[k])?;
            acc(adjoints, logits, spread.mul(&diff)?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{evaluate, Bindings};

    fn scalar_bindings(name: &str, v: f32) -> Bindings {
        Bindings::new().bind(name, Tensor::scalar(v))
    }

    #[test]
    fn derivative_of_square_is_2x() {
        let x = Expr::var("x", &[]);
        let y = x.mul(&x).unwrap();
        let g = gradient(&y, &[x.clone()]).unwrap();
        let v = evaluate(&g[0], &scalar_bindings("x", 3.0)).unwrap();
        assert_eq!(v.scalar_value(), 6.0);
    }

    #[test]
    fn nested_gradient_of_cube_is_6x() {
        let x = Expr::var("x", &[]);
        let y = x.mul(&x).unwrap().mul(&x).unwrap();
        let first = gradient(&y, &[x.clone()]).unwrap().pop().unwrap();
        let second = gradient(&first, &[x.clone()]).unwrap().pop().unwrap();
        let v = evaluate(&second, &scalar_bindings("x", 2.0)).unwrap();
        assert_eq!(v.scalar_value(), 12.0);
    }

    #[test]
    fn sign_path_contributes_zero() {
        let v = Expr::var("v", &[3]);
        let loss = v.sign().sum();
        let g = gradient(&loss, &[v.clone()]).unwrap().pop().unwrap();
        let b = Bindings::new().bind("v", Tensor::new(vec![3], vec![-2.0, 0.0, 5.0]).unwrap());
        let gv = evaluate(&g, &b).unwrap();
        assert_eq!(gv.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_target_is_rejected() {
        let x = Expr::var("x", &[2]);
        assert!(matches!(
            gradient(&x.relu(), &[x.clone()]),
            Err(Error::NonScalarTarget(_))
        ));
    }

    #[test]
    fn variable_not_in_graph_is_rejected() {
        let x = Expr::var("x", &[]);
        let other = Expr::var("other", &[]);
        let y = x.mul(&x).unwrap();
        assert!(matches!(
            gradient(&y, &[other]),
            Err(Error::NotInGraph(_))
        ));
    }

    #[test]
    fn gradient_wrt_interior_node_treats_it_as_input() {
        // y = u * u with u = 3x: dy/du = 2u = 6x, independent of u's history.
        let x = Expr::var("x", &[]);
        let u = x.scale(3.0);
        let y = u.mul(&u).unwrap();
        let g = gradient(&y, &[u.clone()]).unwrap().pop().unwrap();
        let v = evaluate(&g, &scalar_bindings("x", 2.0)).unwrap();
        assert_eq!(v.scalar_value(), 12.0);
    }

    #[test]
    fn matmul_gradient_matches_hand_computation() {
        // f(A) = sum(A·B) with B fixed: df/dA[i,j] = sum of B row j.
        let a = Expr::var("a", &[2, 2]);
        let b = Expr::constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let f = a.matmul(&b).unwrap().sum();
        let g = gradient(&f, &[a.clone()]).unwrap().pop().unwrap();
        let bind = Bindings::new().bind("a", Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap());
        let gv = evaluate(&g, &bind).unwrap();
        assert_eq!(gv.data(), &[3.0, 7.0, 3.0, 7.0]);
    }
}
