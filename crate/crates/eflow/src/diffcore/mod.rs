//! Reverse-mode differentiation engine over dense f64 matrices.
//!
//! A `Tape` records primitive operations during the forward pass of a
//! loss and replays them in reverse to accumulate gradients. Tapes are
//! rebuilt from scratch every training step; `Matrix` values without a
//! tape handle are immutable and freely shared.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{finite_difference_check, grad_check};
pub use matrix::{
    lu_decompose, lu_eval_count, lu_solve, mat_inverse, mat_solve, sym_eigen, sym_sqrt, LuFactors,
    Matrix, EPS_PIVOT,
};
pub use tape::{
    Activation, Gradients, Tape, Var, ATANH_CLAMP, EPS_NORM, EPS_SIG, EPS_SQRT, LEAKY_SLOPE,
};
