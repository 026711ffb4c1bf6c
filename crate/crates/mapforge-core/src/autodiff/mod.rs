//! Reverse-mode automatic differentiation over expression graphs.
//!
//! Computations are built as immutable DAGs of [`Expr`] nodes and evaluated
//! against named variable bindings. [`gradient`] is a graph-to-graph
//! transformation: the adjoints it returns are ordinary expressions composed
//! of the same primitive set, so they can be differentiated again. That
//! closure under differentiation is what makes the second-order meta-gradient
//! (a gradient of an expression that itself contains a gradient) possible
//! with a single mechanism.
//!
//! Shapes are static: every node knows its shape at construction time, and
//! all shape checking happens when the graph is built. Evaluation only
//! validates that bindings match declared variable shapes.

mod eval;
mod expr;
mod fd;
mod grad;
pub(crate) mod kernels;

pub use eval::{evaluate, evaluate_all, Bindings};
pub use expr::Expr;
pub use fd::finite_diff_check;
pub use grad::gradient;
