//! Small differentiable-numerics core: arrays, a gradient tape with the
//! handful of primitives the model needs, Adam, and a finite-difference
//! checker.

mod adam;
mod array;
mod gradcheck;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::{logsumexp, sigmoid, softplus, Array};
pub use gradcheck::finite_diff_check;
pub use params::{init_linear_weight, init_standard_normal, ParamEntry, ParamStore};
pub use tape::{Bound, GradMap, Reduce, Tape, Unary, Var};
