//! Positional uncertainty of level sets in 2D ensemble scalar fields.
//!
//! The pipeline runs in stages:
//!
//! 1. [`ensemble`] loads or synthesizes an ensemble of scalar grids and
//!    normalizes it to `[0, 1]`.
//! 2. [`cellstats`] fits a 4-vertex Gaussian (means plus the 4×4 sample
//!    covariance) to every grid cell.
//! 3. [`pmc`] estimates the level-crossing probability (LCP) of every cell by
//!    Monte Carlo sampling of that Gaussian, serially or in parallel, with
//!    bit-identical results.
//! 4. [`surrogate`] trains a branched sine-activated MLP that predicts LCP
//!    directly from the cell statistics.
//! 5. [`evalbench`] times both routes and reports pixel-wise errors, and
//!    [`render`] turns fields into PPM images.
//!
//! The `lcp` binary exposes every stage (see [`cli`]).

pub mod cellstats;
pub mod cli;
pub mod ensemble;
pub mod evalbench;
pub mod par;
pub mod pmc;
pub mod render;
pub mod rng;
pub mod surrogate;

mod sidecar;

pub use cellstats::{CellGaussian, CellStatsGrid, TrainingSample};
pub use ensemble::{EnsembleDataset, ScalarField2D, SyntheticSpec};
pub use pmc::{LcpField, McConfig};
pub use surrogate::{MlpConfig, MlpModel, TrainConfig};
