//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! The tape is rebuilt for every evaluation: ops are recorded as they run
//! and [`Graph::backward`] replays them in reverse. Gradients are available
//! for parameters and for any intermediate node, which is what the
//! adversarial perturbation estimators need (`∇x` of an input embedding,
//! `∇z` of a bag representation).
//!
//! ```
//! use relext_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod check;
mod error;
mod graph;
mod tensor;

pub use check::{finite_diff_check, relative_error, FdReport};
pub use error::EngineError;
pub use graph::{kl_divergence, softmax, GradTap, Gradients, Graph, Var};
pub use tensor::Tensor;
