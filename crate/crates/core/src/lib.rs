//! Rotary position embeddings, discrete PE scaling and an ODE-learned
//! frequency basis, built on a small reverse-mode autodiff tape.
//!
//! The crate is `no_std` with `alloc`; the default `std` feature only switches
//! float math to the platform library and enables runtime SIMD detection in
//! the matrix kernels.

// `!(x >= y)` comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod ode;
pub mod optim;
pub mod positional;
pub mod real;
pub mod rope;
pub mod scaling;
pub mod tensor;

pub use graph::{Graph, Var};
pub use model::{forward, forward_embedded, log_scale_mult, Method, Model, ModelConfig, ModelError};
pub use ode::{BasisCache, CacheSession, OdeNet, PositionMode, PositionPlan, XiForm};
pub use real::{Precision, Real};
pub use rope::{FrequencyBasis, LogBasis};
pub use scaling::{AlphaProfile, Profile, ScaleFactor};
pub use tensor::{Tensor, TensorError};
