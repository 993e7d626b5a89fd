//! Point clouds, rotations, neighborhood search and grid subsampling.

mod cloud;
mod neighbors;
mod rotation;
mod subsample;

pub use cloud::{centroid, Point3, PointCloud};
pub use neighbors::{knn, nearest, radius_neighbors, radius_neighbors_capped, NeighborIndex, NEAREST_TIE_TOL};
pub use rotation::{
    apply_rotation, sample_uniform_rotation, sample_z_rotation, Rotation3, ROTATION_TOL,
};
pub use subsample::{grid_subsample_equivariant, Subsampled};
