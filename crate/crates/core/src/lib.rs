//! Tunnel radio propagation toolkit: a parabolic-equation marching solver
//! that produces field slices, and an Inception-enhanced conditional GAN that
//! reconstructs those slices from one or a few measured lines.

pub mod dataset;
pub mod export;
pub mod field;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pwe;
pub mod tensor;
pub mod trainer;
