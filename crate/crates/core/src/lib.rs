//! Statistical downscaling of daily solar radiation (GHI) to hourly,
//! spatially correlated fields, and from coarse to fine spatial grids.
//!
//! The model writes hourly GHI at site `s` on day `d` as a shifted and
//! stretched diurnal template scaled by the daily total, plus a small number
//! of residual modes whose coefficients are spatially correlated Gaussian
//! fields with variance depending on the daily total:
//!
//! ```text
//! y(h, d, s) = GHI(d, s) · T(h; β_s, τ_s) + Σ_j u_j(d, s) · φ_j(h)
//! ```
//!
//! Module map:
//!
//! - [`datamodel`]: gridded containers and file formats
//! - [`fpca`]: centered SVD of profile matrices
//! - [`template`]: clearsky template, per-site warp fits, geographic models
//! - [`residuals`]: residual basis and GHI-conditional coefficient variances
//! - [`spatialfield`]: Gaussian-process fit and simulation of coefficients
//! - [`assemble`]: hourly simulation, clamping, daily-total rebalancing
//! - [`tps`]: thin-plate-spline spatial downscaling
//! - [`tiling`]: tile / super-tile layout, month windows, orchestration
//! - [`validate`]: comparison metrics between observed and simulated fields
//! - [`synth`]: synthetic ground-truth generator
//! - [`pipeline`]: per tile-month fitting, ensemble members, model files, run manifests
//! - [`cli`]: end-to-end commands behind the `solar-downscale` binary

pub mod assemble;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod fpca;
pub mod geo;
pub mod pipeline;
pub mod residuals;
pub mod seeds;
pub mod spatialfield;
pub mod spline;
pub mod stats;
pub mod synth;
pub mod template;
pub mod tiling;
pub mod tps;
pub mod validate;

pub use error::{Error, Result};
