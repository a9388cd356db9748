pub mod cli;
pub mod design;
pub mod error;
pub mod linalg;
pub mod predict;
pub mod simulate;
pub mod smoothing;
pub mod solver;
pub mod splines;

#[cfg(test)]
pub(crate) mod testutil;
