//! Dense row-major tensors, a reverse-mode tape, the training losses and an
//! AdamW optimiser. Everything is generic over [`Scalar`] (`f32` or `f64`).

pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{GradCheck, GradCheckReport};
pub use loss::{cosine_alignment_loss, mse, poisson_nll};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use params::ParamStore;
pub use scalar::{gemm_into, Layout, Scalar};
pub use schedule::{lr_at, wd_at, Schedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Params32 = ParamStore<f32>;
pub type Params64 = ParamStore<f64>;
