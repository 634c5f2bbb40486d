use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use super::skeleton::{L_ANKLE, L_FOOT, L_HIP, L_SHOULDER, R_ANKLE, R_FOOT, R_HIP, R_SHOULDER};
use super::{FeatureStats, JointClip, MotionSequence, Skeleton, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 623;
/// Per-frame displacement below which a foot joint counts as planted, in meters.
pub const CONTACT_THRESHOLD: f64 = 0.02;

/// Channel ranges of a feature row.
pub mod layout {
    use std::ops::Range;

    pub const ROOT_ANGULAR_VEL: usize = 0;
    pub const ROOT_LINEAR_VEL: Range<usize> = 1..3;
    pub const ROOT_HEIGHT: usize = 3;
    pub const LOCAL_POS: Range<usize> = 4..157;
    pub const ROTATION_6D: Range<usize> = 157..463;
    pub const LOCAL_VEL: Range<usize> = 463..619;
    pub const FOOT_CONTACT: Range<usize> = 619..623;
}

const CONTACT_JOINTS: [usize; 4] = [L_ANKLE, L_FOOT, R_ANKLE, R_FOOT];

/// Rotation about +y by `a`; `a = 0` faces +z.
fn yaw(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), a)
}

fn wrap(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Facing angle about the vertical axis, from the hip and shoulder lines.
pub fn heading(frame: &[Vector3<f64>]) -> f64 {
    let across = (frame[L_HIP] - frame[R_HIP]) + (frame[L_SHOULDER] - frame[R_SHOULDER]);
    (-across.z).atan2(across.x)
}

/// Smallest rotation taking direction `from` onto direction `to`.
fn swing(from: Vector3<f64>, to: Vector3<f64>) -> Rotation3<f64> {
    let (a, b) = (from.normalize(), to.normalize());
    let cos = a.dot(&b).clamp(-1.0, 1.0);
    let axis = a.cross(&b);
    let s = axis.norm();
    if s < 1e-12 {
        if cos > 0.0 {
            return Rotation3::identity();
        }
        let helper = if a.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        return Rotation3::from_axis_angle(&Unit::new_normalize(a.cross(&helper)), PI);
    }
    Rotation3::from_axis_angle(&Unit::new_unchecked(axis / s), s.atan2(cos))
}

fn six_d(r: &Matrix3<f64>) -> [f64; 6] {
    // first two columns, offset so the identity maps to zero
    [
        r[(0, 0)] - 1.0,
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)] - 1.0,
        r[(2, 1)],
    ]
}

/// Converts an `M`-frame clip into `M - 1` feature rows. Row `t` describes
/// frame `t` and the motion from `t` to `t + 1`.
pub fn extract_features(skel: &Skeleton, clip: &JointClip) -> Result<MotionSequence> {
    let m = clip.frames();
    if m < 2 {
        return Err(Error::invalid(format!(
            "clip needs at least 2 frames, got {m}"
        )));
    }
    if !clip.is_finite() {
        return Err(Error::Numeric(
            "clip contains non-finite joint positions".into(),
        ));
    }
    let rest = skel.rest_relative();
    let headings: Vec<f64> = (0..m).map(|t| heading(clip.frame(t))).collect();
    let mut data = Vec::with_capacity((m - 1) * FEATURE_DIM);
    for t in 0..m - 1 {
        let (cur, next) = (clip.frame(t), clip.frame(t + 1));
        let inv = yaw(-headings[t]);
        let root = cur[0];
        let mut row = [0.0f64; FEATURE_DIM];
        row[layout::ROOT_ANGULAR_VEL] = wrap(headings[t + 1] - headings[t]);
        let dv = inv * (next[0] - root);
        row[layout::ROOT_LINEAR_VEL.start] = dv.x;
        row[layout::ROOT_LINEAR_VEL.start + 1] = dv.z;
        row[layout::ROOT_HEIGHT] = root.y;
        for j in 1..NUM_JOINTS {
            let local = inv * (cur[j] - root) - rest[j];
            let o = layout::LOCAL_POS.start + (j - 1) * 3;
            row[o..o + 3].copy_from_slice(local.as_slice());

            let parent = skel.parent(j).expect("non-root joint has a parent");
            let bone = inv * (cur[j] - cur[parent]);
            let r = swing(skel.offset(j), bone);
            let o = layout::ROTATION_6D.start + (j - 1) * 6;
            row[o..o + 6].copy_from_slice(&six_d(r.matrix()));
        }
        for j in 0..NUM_JOINTS {
            let v = inv * (next[j] - cur[j]);
            let o = layout::LOCAL_VEL.start + j * 3;
            row[o..o + 3].copy_from_slice(v.as_slice());
        }
        for (k, &j) in CONTACT_JOINTS.iter().enumerate() {
            let planted = (next[j] - cur[j]).norm() < CONTACT_THRESHOLD;
            row[layout::FOOT_CONTACT.start + k] = if planted { 1.0 } else { 0.0 };
        }
        data.extend(row.iter().map(|&v| v as f32));
    }
    MotionSequence::new(Tensor::new([m - 1, FEATURE_DIM], data)?, clip.fps)
}

/// Recovers joint positions from the local-position channels and the
/// integrated root trajectory. Frame 0's root sits above the ground origin
/// facing +z. Normalized input is first denormalized with `stats`.
pub fn features_to_joints(
    skel: &Skeleton,
    seq: &MotionSequence,
    stats: Option<&FeatureStats>,
) -> Result<JointClip> {
    let raw;
    let seq = if seq.is_normalized() {
        let stats =
            stats.ok_or_else(|| Error::invalid("normalized sequence needs its statistics"))?;
        raw = stats.denormalize(seq)?;
        &raw
    } else {
        seq
    };
    let rest = skel.rest_relative();
    let mut theta = 0.0f64;
    let (mut x, mut z) = (0.0f64, 0.0f64);
    let mut positions = Vec::with_capacity(seq.rows() * NUM_JOINTS);
    for t in 0..seq.rows() {
        let row = seq.features.row(t);
        let f = |c: usize| row[c] as f64;
        let rot = yaw(theta);
        let root = Vector3::new(x, f(layout::ROOT_HEIGHT), z);
        positions.push(root);
        for (j, rest_j) in rest.iter().enumerate().skip(1) {
            let o = layout::LOCAL_POS.start + (j - 1) * 3;
            let local = Vector3::new(f(o), f(o + 1), f(o + 2)) + rest_j;
            positions.push(root + rot * local);
        }
        let step = rot
            * Vector3::new(
                f(layout::ROOT_LINEAR_VEL.start),
                0.0,
                f(layout::ROOT_LINEAR_VEL.start + 1),
            );
        x += step.x;
        z += step.z;
        theta += f(layout::ROOT_ANGULAR_VEL);
    }
    JointClip::new(positions, seq.fps)
}
