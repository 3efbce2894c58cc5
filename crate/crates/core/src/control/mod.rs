//! Pose conditioning: skeleton rendering and a zero-initialised control branch
//! whose residuals are added at the backbone's skip connections and mid block.

mod net;
mod pose;
mod pretrain;

pub use crate::backbone::ControlResiduals;
pub use net::{repeat_pose, ControlNet};
pub use pose::{
    bresenham, edge_color, pose_batch, render_pose, PoseInput, PoseSpec, COCO_KEYPOINTS, COCO_SKELETON, JOINT_COLOR,
    NUM_KEYPOINTS,
};
pub use pretrain::{pretrain_control, ControlPair, ControlPretrainConfig};
