//! Dense 64-bit tensors, a recording tape for reverse-mode gradients, and
//! an Adam optimizer with linear warm-up.
//!
//! ```
//! use mvq_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;
