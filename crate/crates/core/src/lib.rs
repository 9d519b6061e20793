//! Spatiotemporal imputation with a low-rank factorized-attention Transformer.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense `f64` tensors and a define-by-run tape.
//! * [`spectral`]: DFT, the differentiable spectral ℓ1 norm, circulant
//!   matrices and Jacobi SVD.
//! * [`model`]: input embedding, temporal projected attention, spatial
//!   embedded attention and readout.
//! * [`losses`]: masked reconstruction loss and the Fourier imputation loss.
//! * [`data`]: synthetic data, missing-pattern simulation, windowing, CSV I/O.
//! * [`training`]: Adam training loop, imputation and evaluation.
//! * [`baselines`]: mean, linear interpolation and ALS matrix factorization.
//! * [`bench`]: attention timing against canonical full attention.
//! * [`cli`]: the `stimpute` command line.

pub mod autodiff;
pub mod baselines;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
