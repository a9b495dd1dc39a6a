//! Atlas-guided brain tissue segmentation for CT and MR volumes, together with
//! the validation harness used to compare segmentation pipelines: overlap and
//! surface-distance metrics, normalisation consistency, volumetry, agreement
//! statistics and kernel classification of normalised tissue maps.
//!
//! Every stage operates on [`volgrid::Volume`]s on explicit voxel grids and is
//! deterministic given its inputs. Synthetic paired MR/CT head phantoms with
//! exact ground truth are generated by [`phantom`].

pub mod atlasgmm;
pub mod error;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod predict;
pub mod register;
pub mod stats;
pub mod volgrid;
pub mod volumetry;

pub use error::{Error, Result};
