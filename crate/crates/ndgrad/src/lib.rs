//! Dense f64 tensors with a recording tape for reverse-mode differentiation.
//!
//! Every forward operation appends a node to a [`Graph`]; [`Graph::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products. The
//! kernels cover exactly what the forecaster stack needs: batched matmul,
//! strided 1D convolution, group/layer normalization, exact-erf GELU,
//! rotary position embeddings, row softmax and the pinball loss.
//!
//! ```
//! use ndgrad::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let y = g.sum(x);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
mod params;
pub mod schedule;
mod tensor;

pub use error::{GradError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tensor::Tensor;
