//! Ray-traced radio planning over polygonal urban scenes, with automatic
//! deployment of reconfigurable intelligent surfaces (RIS) and a
//! measurement-driven material calibration loop.
//!
//! The crate is organized around the planning pipeline:
//!
//! - [`scene`]: extruded-polygon urban scenes, spatial index, geometric queries
//! - [`raytrace`]: shoot-and-bounce specular tracing and diffuse scattering
//! - [`arrays`]: sector antennas, DFT beamforming codebooks, channel vectors
//! - [`coverage`]: per-tile RSRP maps, outage detection, CDF extraction
//! - [`rismodel`]: physically consistent RIS aperture model and reradiation
//! - [`clustering`]: BIRCH clustering of outage tiles
//! - [`placement`]: candidate generation, evaluation, and the full pipeline
//! - [`calibration`]: fitting material parameters to measured RSRP
//! - [`cli`]: configuration files, subcommands, and report emission
//!
//! See the `examples/` directory for one runnable walkthrough per capability,
//! and the `risplan` binary for the batch interface.

pub mod arrays;
pub mod calibration;
pub mod cli;
pub mod clustering;
pub mod coverage;
pub mod geometry;
pub mod placement;
pub mod raytrace;
pub mod rismodel;
pub mod scene;
pub mod synthetic;

pub use geometry::{Vec2, Vec3};
