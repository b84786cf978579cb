//! Body-aware deformation of template meshes.

pub mod body_loss;
pub mod config;
pub mod fixtures;
pub mod gradcheck;
pub mod guidance;
pub mod jacobian;
pub mod mesh;
pub mod optimize;
pub mod recipes;
pub mod sdf;
