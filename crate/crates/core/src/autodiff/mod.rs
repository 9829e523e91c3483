//! Dense reverse-mode automatic differentiation in double precision.
//!
//! The engine is deliberately small: a [`Tape`] records primitive kernels as
//! they run, [`Tape::backward`] sweeps the record in reverse, and
//! [`finite_difference_check`] verifies the result numerically.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{BoundParams, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, MAX_RANK};
