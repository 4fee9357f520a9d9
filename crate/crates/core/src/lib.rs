//! Numerical laboratory for the spiked matrix-tensor model.
//!
//! * [`model`]: parameters and the mixed 2+p kernel.
//! * [`rs_landscape`]: replica-symmetric free entropy, state evolution, phase diagram.
//! * [`replica_1rsb`]: one-step replica symmetry breaking, complexity, threshold states.
//! * [`lse_fixed`]: Langevin state evolution on a uniform time grid (with annealing).
//! * [`lse_dyngrid`]: Langevin state evolution on a doubling time grid.
//! * [`analysis`]: relaxation times, power-law extrapolation, FDT fits.
//! * [`instance_sim`]: finite-N instances, AMP and Langevin dynamics.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too; index loops mirror the quadratures.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod error;
pub mod instance_sim;
pub mod lse_dyngrid;
pub mod lse_fixed;
pub mod model;
pub mod replica_1rsb;
pub mod roots;
pub mod rs_landscape;

pub use error::{Error, Result};
pub use model::ModelParams;
