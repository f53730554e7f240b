//! Numeric core: dense tensors, a reverse-mode autodiff tape, parameter
//! initializers, AdamW, and finite-difference gradient checking.
//!
//! Everything runs on the CPU in the build-profile real type ([`Real`],
//! 64-bit unless the `single-precision` feature is on). All randomness is
//! drawn from explicitly seeded ChaCha streams, so runs are reproducible
//! bit-for-bit on one build.

mod check;
mod optim;
mod tape;
mod tensor;

pub use check::grad_check;
pub use optim::{glorot_uniform, normal_init, stream_rng, AdamW, Parameter};
pub use tape::{linear, take_var, Tape, Var};
pub use tensor::{Real, Tensor};
