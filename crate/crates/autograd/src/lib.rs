//! Small dense-tensor engine with reverse-mode differentiation.
//!
//! Values are row-major `f64` [`Tensor`]s. A [`Graph`] records operations
//! as they run and [`Graph::backward`] walks the record in reverse.
//! Parameters live in a [`ParamStore`] and are updated by [`AdamW`].
//!
//! ```
//! use autograd::{Graph, Tensor};
//!
//! let mut g = Graph::standalone();
//! let x = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = g.mul(x, x);
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.leaf(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig, OptimizerState, StepStats};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
