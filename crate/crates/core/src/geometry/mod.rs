//! Pose algebra, pinhole and spherical projections, and evaluation metrics.

mod camera;
mod metrics;
mod pose;
mod spherical;

pub use camera::{normalized_plane_project, CameraIntrinsics, DEFAULT_Z_MIN};
pub use metrics::{
    euler_angles, msee_mrr, rot_transl_error, rre_rte, se3_distance, se3_log, EulerOrder,
    RRE_EULER_ORDER,
};
pub use pose::{PoseQT, Quaternion, RigidTransform};
pub use spherical::{camera_to_lidar_axes, lidar_to_camera_axes, spherical_project, SphericalConfig};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
