//! Open-loop and closed-loop Nash equilibria for constrained discrete-time
//! linear-quadratic dynamic games, the finite-horizon game as an affine
//! variational inequality, and the receding-horizon loop built on top of it.

pub mod clne;
pub mod error;
pub mod game;
pub mod linalg;
pub mod matrix_eq;
pub mod olne;
pub mod qp;
pub mod rhc;
pub mod scenario;
pub mod terminal;
pub mod vi;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;
