//! On-disk formats: triangle meshes (binary STL, ASCII PLY, OBJ), depth
//! frames, and camera pose lists.

pub mod frames;
pub mod mesh;
