//! Cross-modal visual localization: matches learned descriptors of 2D image
//! keypoints against descriptors of 3D point-cloud keypoints and recovers a
//! 6-DoF camera pose with EPnP inside RANSAC. Includes a synthetic scene
//! generator that produces point-cloud maps, rendered views, ground-truth
//! poses and correspondence labels for training and evaluation.

pub mod detect2d;
pub mod detect3d;
pub mod geometry;
pub mod image;
pub mod index;
pub mod kdtree;
pub mod net;
pub mod ply;
pub mod pipeline;
pub mod pnp;
pub mod synth;
