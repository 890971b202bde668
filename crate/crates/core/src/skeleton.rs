//! Skeleton sequences and joint topology.

use crate::error::{Error, Result};

/// Raw 3-D joint positions over time, row-major `[frames × joints × 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    frames: usize,
    joints: usize,
    coords: Vec<f64>,
}

impl SkeletonSequence {
    pub fn new(frames: usize, joints: usize, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != frames * joints * 3 {
            return Err(Error::Invalid(format!(
                "sequence of {frames} frames × {joints} joints needs {} coordinates, got {}",
                frames * joints * 3,
                coords.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "skeleton_sequence" });
        }
        Ok(SkeletonSequence { frames, joints, coords })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn joint(&self, frame: usize, joint: usize) -> [f64; 3] {
        let o = (frame * self.joints + joint) * 3;
        [self.coords[o], self.coords[o + 1], self.coords[o + 2]]
    }

    /// New sequence holding `joints` (in that order) of every frame.
    pub fn select_joints(&self, joints: &[usize]) -> SkeletonSequence {
        let mut coords = Vec::with_capacity(self.frames * joints.len() * 3);
        for f in 0..self.frames {
            for &j in joints {
                coords.extend_from_slice(&self.joint(f, j));
            }
        }
        SkeletonSequence {
            frames: self.frames,
            joints: joints.len(),
            coords,
        }
    }
}

/// Parent links of a rooted joint tree plus the torso subset removed
/// during spatial pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub parents: Vec<Option<usize>>,
    pub torso: Vec<usize>,
}

/// 25-joint body layout (Kinect v2 ordering).
pub const BODY25_PARENTS: [Option<usize>; 25] = [
    None,      // 0 spine base
    Some(0),   // 1 spine mid
    Some(20),  // 2 neck
    Some(2),   // 3 head
    Some(20),  // 4 left shoulder
    Some(4),   // 5 left elbow
    Some(5),   // 6 left wrist
    Some(6),   // 7 left hand
    Some(20),  // 8 right shoulder
    Some(8),   // 9 right elbow
    Some(9),   // 10 right wrist
    Some(10),  // 11 right hand
    Some(0),   // 12 left hip
    Some(12),  // 13 left knee
    Some(13),  // 14 left ankle
    Some(14),  // 15 left foot
    Some(0),   // 16 right hip
    Some(16),  // 17 right knee
    Some(17),  // 18 right ankle
    Some(18),  // 19 right foot
    Some(1),   // 20 spine shoulder
    Some(7),   // 21 left hand tip
    Some(6),   // 22 left thumb
    Some(11),  // 23 right hand tip
    Some(10),  // 24 right thumb
];

/// Default trunk joints removed by pruning: spine base, spine mid, neck,
/// head, both hips and spine shoulder. Leaves 18 limb joints.
pub const BODY25_TORSO: [usize; 7] = [0, 1, 2, 3, 12, 16, 20];

impl Topology {
    pub fn body25() -> Self {
        Topology {
            parents: BODY25_PARENTS.to_vec(),
            torso: BODY25_TORSO.to_vec(),
        }
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    /// Checks the parent links form a single rooted tree and the torso set
    /// indexes valid joints.
    pub fn validate(&self) -> Result<()> {
        let n = self.parents.len();
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::Invalid(format!("joint tree needs exactly one root, found {roots}")));
        }
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = self.parents[cur] {
                if p >= n {
                    return Err(Error::Invalid(format!("joint {cur} has parent {p} out of range")));
                }
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(Error::Invalid("joint tree contains a cycle".into()));
                }
            }
        }
        if let Some(&bad) = self.torso.iter().find(|&&j| j >= n) {
            return Err(Error::Invalid(format!("torso joint {bad} out of range for {n} joints")));
        }
        Ok(())
    }

    /// Joints not in the torso set, ascending.
    pub fn limb_joints(&self) -> Vec<usize> {
        (0..self.joints()).filter(|j| !self.torso.contains(j)).collect()
    }
}
