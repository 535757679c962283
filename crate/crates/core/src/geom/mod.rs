//! Point-cloud and box geometry.

pub mod boxes;
pub mod pe;
pub mod sa;
pub mod sampling;

pub use boxes::{box_giou_3d, box_iou_3d, giou_rows, nms_3d, Box3D};
pub use pe::{fourier_pe, sinusoid_pe};
pub use sa::{SaOutput, SetAbstraction};
pub use sampling::{ball_query, farthest_point_sampling, knn, BallGroups};
