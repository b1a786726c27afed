//! Dense tensors, FFTs, and the reverse-mode tape.

mod dense;
pub mod fft;
pub mod tape;

pub use dense::{ComplexTensor, Tensor};
pub use fft::{fft_c2c, fft_forward, fft_inverse, half_extent, irfft, rfft, truncate_modes};
pub use tape::{phi, phi_prime, Activation, Gradients, ModeMixLayout, NodeRef, ParamId, Tape, Value};
