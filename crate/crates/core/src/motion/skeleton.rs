use nalgebra::{Rotation3, Vector3};

pub const NUM_JOINTS: usize = 52;

pub const PELVIS: usize = 0;
pub const L_HIP: usize = 1;
pub const R_HIP: usize = 2;
pub const L_ANKLE: usize = 7;
pub const R_ANKLE: usize = 8;
pub const L_FOOT: usize = 10;
pub const R_FOOT: usize = 11;
pub const NECK: usize = 12;
pub const L_COLLAR: usize = 13;
pub const R_COLLAR: usize = 14;
pub const HEAD: usize = 15;
pub const L_SHOULDER: usize = 16;
pub const R_SHOULDER: usize = 17;
pub const L_ELBOW: usize = 18;
pub const R_ELBOW: usize = 19;
pub const L_WRIST: usize = 20;
pub const R_WRIST: usize = 21;
/// First joint of each hand's 15 finger joints (index, middle, pinky, ring, thumb; 3 each).
pub const L_FINGERS: usize = 22;
pub const R_FINGERS: usize = 37;

const BODY_PARENTS: [i8; 22] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19,
];

const BODY_OFFSETS: [[f64; 3]; 22] = [
    [0.0, 0.93, 0.0],
    [0.06, -0.09, 0.0],
    [-0.06, -0.09, 0.0],
    [0.0, 0.11, -0.01],
    [0.04, -0.38, 0.0],
    [-0.04, -0.38, 0.0],
    [0.0, 0.13, 0.0],
    [0.0, -0.40, -0.04],
    [0.0, -0.40, -0.04],
    [0.0, 0.05, 0.03],
    [0.0, -0.05, 0.12],
    [0.0, -0.05, 0.12],
    [0.0, 0.21, -0.03],
    [0.08, 0.12, 0.0],
    [-0.08, 0.12, 0.0],
    [0.0, 0.09, 0.05],
    [0.12, 0.03, 0.0],
    [-0.12, 0.03, 0.0],
    [0.26, 0.0, 0.0],
    [-0.26, 0.0, 0.0],
    [0.25, 0.0, 0.0],
    [-0.25, 0.0, 0.0],
];

/// Base offset of each finger from the wrist and the per-segment offset,
/// for the left hand (+x side). Order: index, middle, pinky, ring, thumb.
const FINGERS: [([f64; 3], [f64; 3]); 5] = [
    ([0.09, 0.0, 0.03], [0.03, 0.0, 0.0]),
    ([0.095, 0.0, 0.01], [0.032, 0.0, 0.0]),
    ([0.08, 0.0, -0.035], [0.022, 0.0, 0.0]),
    ([0.09, 0.0, -0.012], [0.028, 0.0, 0.0]),
    ([0.03, -0.01, 0.035], [0.025, 0.0, 0.02]),
];

/// 52-joint kinematic tree: 22 body joints followed by 15 finger joints per hand.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    parents: Vec<Option<usize>>,
    offsets: Vec<Vector3<f64>>,
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::standard()
    }
}

impl Skeleton {
    pub fn standard() -> Self {
        let mut parents: Vec<Option<usize>> = BODY_PARENTS
            .iter()
            .map(|&p| (p >= 0).then_some(p as usize))
            .collect();
        let mut offsets: Vec<Vector3<f64>> =
            BODY_OFFSETS.iter().map(|o| Vector3::from(*o)).collect();
        for (wrist, mirror) in [(L_WRIST, 1.0), (R_WRIST, -1.0)] {
            for (base, seg) in FINGERS {
                let flip = |v: [f64; 3]| Vector3::new(v[0] * mirror, v[1], v[2]);
                let first = parents.len();
                parents.push(Some(wrist));
                offsets.push(flip(base));
                parents.push(Some(first));
                offsets.push(flip(seg));
                parents.push(Some(first + 1));
                offsets.push(flip(seg));
            }
        }
        debug_assert_eq!(parents.len(), NUM_JOINTS);
        Skeleton { parents, offsets }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    /// Offset from the parent in the parent's rest frame. For the root this is
    /// the rest position of the pelvis above the ground origin.
    pub fn offset(&self, j: usize) -> Vector3<f64> {
        self.offsets[j]
    }

    /// Forward kinematics from a root position and per-joint local rotations.
    pub fn forward_kinematics(
        &self,
        root: Vector3<f64>,
        local: &[Rotation3<f64>],
    ) -> Vec<Vector3<f64>> {
        assert_eq!(local.len(), self.joint_count());
        let mut global = Vec::with_capacity(local.len());
        let mut pos = Vec::with_capacity(local.len());
        for j in 0..self.joint_count() {
            match self.parents[j] {
                None => {
                    global.push(local[j]);
                    pos.push(root);
                }
                Some(p) => {
                    let gp: Rotation3<f64> = global[p];
                    pos.push(pos[p] + gp * self.offsets[j]);
                    global.push(gp * local[j]);
                }
            }
        }
        pos
    }

    /// Rest pose with the root at the origin.
    pub fn rest_relative(&self) -> Vec<Vector3<f64>> {
        let ident = vec![Rotation3::identity(); self.joint_count()];
        self.forward_kinematics(Vector3::zeros(), &ident)
    }

    pub fn rest_pose(&self) -> Vec<Vector3<f64>> {
        let ident = vec![Rotation3::identity(); self.joint_count()];
        self.forward_kinematics(self.offsets[PELVIS], &ident)
    }
}
