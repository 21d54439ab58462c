//! Deterministic numerical kernels shared by the rest of the crate.

mod eig;
mod expm;
mod fft;
mod fit;
mod mat;
mod svd;
mod tensor;

pub use eig::{eig, EigenSet};
pub use expm::{expm, expm_adjoint, expm_call_count, reset_expm_call_count, scaling_exponent, THETA_13};
pub use fft::{fft2, fft2_plane, Direction};
pub use fit::{linfit, r_squared, LinFit};
pub use mat::Mat;
pub use rustfft::num_complex::Complex64;
pub use svd::singvals;
pub use tensor::{Dtype, Storage, Tensor};
