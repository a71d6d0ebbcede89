//! Procedural robotic-view point-cloud video generation: a 15-joint
//! humanoid animated per composite action class, skinned with capsules and
//! scanned by a simulated spinning LiDAR with platform disturbance, then
//! packaged into clip files with cross-subject train/test manifests.

mod dataset;
mod lidar;
mod skeleton;

pub use dataset::{
    default_classes, make_dataset, read_clip, resample_frame, write_clip, ActionClass, ClipFile,
    DatasetConfig, Manifest, ManifestEntry, Split, CLIP_MAGIC,
};
pub use lidar::{lidar_sample, LidarConfig, PlatformSpec};
pub use skeleton::{
    animate, BaseMotion, Gesture, Joint, Pose, SceneSpec, SubjectParams, IDLE_SWAY_BOUND,
    JOINT_COUNT,
};
