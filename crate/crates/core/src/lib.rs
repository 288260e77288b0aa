//! Normal integration on decimated screen-space triangle meshes.
//!
//! A per-pixel normal map is turned into a surface by first building a
//! coarse triangle mesh over the image plane whose vertex density follows the
//! geometric detail, then integrating depth on that mesh.

pub mod camera;
pub mod eval;
pub mod integrate;
pub mod mesh;
pub mod normal_io;
pub mod pipeline;
pub mod quadrics;
pub mod remesh;
