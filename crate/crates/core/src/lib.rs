//! Spherical stereo: depth maps and point clouds from equirectangular pairs.
//!
//! Two capture setups are supported. A binocular rig places one spherical
//! camera above the other; a monocular sequence uses two frames of one moving
//! camera, which after rotation removal and motion-axis alignment reduce to
//! the same vertical-baseline problem.

pub mod cloud;
pub mod colormap;
pub mod error;
pub mod features;
pub mod flow;
pub mod geom;
pub mod image;
pub mod motion;
pub mod pfm;
pub mod ply;
pub mod pose;
pub mod stabilize;
pub mod stereo;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{Dims, Direction3, EulerAngles, Rotation3};
pub use image::EquirectImage;
pub use stereo::{DepthMap, DisparityMap, StereoConfig};
