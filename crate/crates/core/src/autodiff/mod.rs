//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! plus the Adam optimizer and a central-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
pub mod ops;
mod params;

pub use adam::Adam;
pub use gradcheck::{
    finite_diff_check, relative_error, sample_active_coords, sample_coords, GradCheckReport, Mismatch, REL_ERR_FLOOR,
};
pub use graph::{bce_value, Graph, Var};
pub use params::{ParamId, ParamStore};



#[cfg(test)]
mod tests;
