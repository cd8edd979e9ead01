//! Permutation-equivariant neural graph controlled differential equations.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autodiff`] provide the
//! numeric substrate, [`graphgen`] and [`dynamics`] build synthetic dynamic
//! graph datasets, [`pathinterp`] turns snapshots into spline control paths,
//! [`equivariant`] holds the 15-map fusion basis, [`neuralcde`] defines the
//! model variants and solvers, and [`trainer`] fits and evaluates them.

pub mod autodiff;
pub mod checks;
pub mod dynamics;
pub mod equivariant;
pub mod error;
pub mod experiment;
pub mod graphgen;
pub mod io;
pub mod neuralcde;
pub mod par;
pub mod pathinterp;
pub mod scaling;
pub mod solver;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
