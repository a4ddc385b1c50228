//! Reconstruction of multi-layer (semi-transparent and occluded) surfaces from
//! per-pixel transmittance/depth data.
//!
//! The crate is organised as a pipeline:
//!
//! 1. [`scene`] — analytic scenes, pinhole cameras, and ray-cast fragment
//!    generation standing in for a converged splat model, plus ground-truth
//!    surface oracles.
//! 2. [`transmittance`] — front-to-back compositing, the depth/transmittance
//!    mapping, and depth-map stacks over uniform transmittance thresholds.
//! 3. [`depthdist`] — kernel density estimation, per-view aggregation, peak
//!    detection, and Hartigan's dip test.
//! 4. [`fusion`] — TSDF volumes, progressive two-stage fusion with voxel
//!    freezing, and isosurface mesh extraction.
//! 5. [`eval`] — Chamfer distance, precision, mesh sampling, and the
//!    peak/median/expected strategy comparison.

pub mod depthdist;
pub mod eval;
pub mod fusion;
pub mod geom;
pub mod scene;
pub mod transmittance;
