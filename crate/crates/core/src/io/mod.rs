//! Wire formats: binary cube files and splat PLY point clouds.

pub mod cube;
pub mod ply;

pub use cube::{parse_cube, read_cube, write_cube, CubeIoError};
pub use ply::{export_splat_ply, import_splat_ply, PlyError};
