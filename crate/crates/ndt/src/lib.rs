//! `ndt` is a desk-scale tensor library with a recorded tape.
//!
//! Every operation on a [`Graph`] is evaluated eagerly and recorded, so
//! the same graph can afterwards be differentiated in reverse mode
//! ([`Graph::backward`]), pushed forward with a tangent
//! ([`Graph::jvp`]), or replayed from its leaves ([`Graph::replay`]).
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root name the 64-bit instantiation used by the
//! rest of the workspace.
//!
//! ```
//! use ndt::{Graph64, Tensor64};
//!
//! let mut g = Graph64::new();
//! let x = g.input("x", Tensor64::scalar(3.0), true);
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt("x").unwrap().grad.data(), &[6.0]);
//! ```

mod autodiff;
mod check;
mod error;
mod graph;
mod kernels;
mod linear;
mod scalar;
mod tensor;

pub use autodiff::{GradEntry, Gradients};
pub use check::{dense_jacobian, gradient_check, GradCheckConfig, GradCheckReport};
pub use error::NdtError;
pub use graph::{Graph, Var};
pub use kernels::conv2d_output_dim;
pub use linear::LinearOp;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, NdtError>;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Gradients64 = Gradients<f64>;
