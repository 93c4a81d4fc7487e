//! Dense array arithmetic with reverse-mode automatic differentiation
//! and finite-difference verification.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::{stable_sum, Array, Real};
pub use gradcheck::grad_check;
pub use params::ParamStore;
pub use tape::{Activation, Tape, Var};
