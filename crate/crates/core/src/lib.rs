//! Two-stage object pose classification over mid-level feature maps.
//!
//! Stage 1 classifies azimuth and elevation bins from fused surface-normal and
//! re-shading feature maps. Stage 2 verifies the top azimuth candidates by
//! comparing the masked features against silhouettes rendered from a retrieved
//! CAD model. Supporting modules cover the geometry used to label poses from
//! RGB-D scans, overlapping angular bins, silhouette rendering and retrieval,
//! and the on-disk dataset formats.

pub mod binning;
pub mod datasets;
pub mod geometry;
pub mod labeler;
pub mod posenet;
pub mod silhouette;
pub mod tensorkit;
