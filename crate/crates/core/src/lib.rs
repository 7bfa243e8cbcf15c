//! Linear-quadratic mean field games under heterogeneous erroneous initial
//! information.

pub mod correction;
pub mod deviation;
pub mod equilibrium;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod nash;
pub mod ode;
pub mod params;
pub mod population;
pub mod realtime;
pub mod registry;
pub mod riccati;

pub use error::{Error, Result};
pub use grid::{MatrixPath, Stage, TimeGrid, VectorPath};
pub use params::SystemParams;
pub use riccati::RiccatiBundle;
