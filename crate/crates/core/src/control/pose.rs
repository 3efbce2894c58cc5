use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_KEYPOINTS: usize = 17;

/// COCO-17 joint names, in keypoint order.
pub const COCO_KEYPOINTS: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// The standard COCO skeleton (0-based joint indices).
pub const COCO_SKELETON: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

pub const JOINT_COLOR: [f64; 3] = [1.0, 1.0, 1.0];

/// One fixed colour per skeleton edge: evenly spaced hues at full saturation.
pub fn edge_color(edge: usize) -> [f64; 3] {
    let h = edge as f64 / COCO_SKELETON.len() as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// 17 keypoints `(x, y, visibility)` in normalized image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub keypoints: Vec<[f64; 3]>,
}

impl PoseSpec {
    pub fn new(keypoints: Vec<[f64; 3]>) -> Result<Self> {
        let p = Self { keypoints };
        p.validate()?;
        Ok(p)
    }

    /// Every joint invisible.
    pub fn empty() -> Self {
        Self {
            keypoints: vec![[0.0, 0.0, 0.0]; NUM_KEYPOINTS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints.len() != NUM_KEYPOINTS {
            return Err(Error::config(format!(
                "pose needs {NUM_KEYPOINTS} keypoints, got {}",
                self.keypoints.len()
            )));
        }
        for (i, [x, y, v]) in self.keypoints.iter().enumerate() {
            if *v != 0.0 && *v != 1.0 {
                return Err(Error::config(format!("keypoint {i}: visibility {v} not in {{0, 1}}")));
            }
            if *v == 1.0 && !((0.0..=1.0).contains(x) && (0.0..=1.0).contains(y)) {
                return Err(Error::config(format!("keypoint {i}: ({x}, {y}) outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn visible(&self, joint: usize) -> bool {
        self.keypoints[joint][2] == 1.0
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("pose JSON: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Configuration(reason) => Error::format(path, reason),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("pose serializes")
    }
}

/// Integer line rasterization covering both endpoints.
pub fn bresenham(x0: i64, y0: i64, x1: i64, y1: i64) -> Vec<(i64, i64)> {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push((x, y));
        if x == x1 && y == y1 {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn to_pixel(c: f64, size: usize) -> i64 {
    (c * (size - 1) as f64).round() as i64
}

/// Skeleton image `[3, size, size]` on black: edges between visible joints as
/// Bresenham lines in their edge colour, then every visible joint as a 3×3
/// white square.
pub fn render_pose(p: &PoseSpec, size: usize) -> Result<Array3<f64>> {
    p.validate()?;
    if size == 0 {
        return Err(Error::dim("pose canvas must be non-empty"));
    }
    let mut img = Array3::zeros((3, size, size));
    let put = |img: &mut Array3<f64>, x: i64, y: i64, color: [f64; 3]| {
        if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
            for (c, v) in color.iter().enumerate() {
                img[[c, y as usize, x as usize]] = *v;
            }
        }
    };
    let px = |j: usize| (to_pixel(p.keypoints[j][0], size), to_pixel(p.keypoints[j][1], size));
    for (e, &(a, b)) in COCO_SKELETON.iter().enumerate() {
        if p.visible(a) && p.visible(b) {
            let ((x0, y0), (x1, y1)) = (px(a), px(b));
            for (x, y) in bresenham(x0, y0, x1, y1) {
                put(&mut img, x, y, edge_color(e));
            }
        }
    }
    for j in 0..NUM_KEYPOINTS {
        if p.visible(j) {
            let (x, y) = px(j);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(&mut img, x + dx, y + dy, JOINT_COLOR);
                }
            }
        }
    }
    Ok(img)
}

/// Pose conditioning as keypoints or as an already rendered skeleton image.
#[derive(Debug, Clone, PartialEq)]
pub enum PoseInput {
    Keypoints(PoseSpec),
    /// `[3, H, W]` in `[0, 1]`.
    Image(Array3<f64>),
}

impl PoseInput {
    pub fn render(&self, size: usize) -> Result<Array3<f64>> {
        match self {
            Self::Keypoints(p) => render_pose(p, size),
            Self::Image(img) => {
                if img.dim() != (3, size, size) {
                    return Err(Error::dim(format!("pose image {:?} is not [3, {size}, {size}]", img.shape())));
                }
                Ok(img.clone())
            }
        }
    }
}

impl From<PoseSpec> for PoseInput {
    fn from(p: PoseSpec) -> Self {
        Self::Keypoints(p)
    }
}

/// Stacks rendered poses into a `[B, 3, H, W]` batch.
pub fn pose_batch(images: &[Array3<f64>]) -> Result<ArrayD<f64>> {
    let first = images.first().ok_or_else(|| Error::dim("empty pose batch"))?;
    let (c, h, w) = first.dim();
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), c, h, w]));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::dim("pose images differ in shape"));
        }
        out.index_axis_mut(ndarray::Axis(0), i).assign(&img.view().into_dyn());
    }
    Ok(out)
}
