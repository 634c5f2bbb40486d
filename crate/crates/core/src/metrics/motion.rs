use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::JointClip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionEvalReport {
    /// Meters.
    pub mpjpe: f64,
    /// Meters.
    pub pampjpe: f64,
    pub fid: f64,
    pub clips: usize,
    pub fid_rank_deficient: bool,
}

fn check_shapes(pred: &JointClip, gt: &JointClip) -> Result<()> {
    if pred.frames() != gt.frames() || pred.positions().len() != gt.positions().len() {
        return Err(Error::invalid(format!(
            "clip shapes differ: {} vs {} frames, {} vs {} points",
            pred.frames(),
            gt.frames(),
            pred.positions().len(),
            gt.positions().len()
        )));
    }
    if gt.frames() == 0 {
        return Err(Error::invalid("empty clip"));
    }
    Ok(())
}

fn mean_error(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

pub fn mpjpe(pred: &JointClip, gt: &JointClip) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(mean_error(pred.positions(), gt.positions()))
}

/// Similarity transform `(s, R, t)` minimizing `Σ‖s R x + t − y‖²`.
pub fn umeyama(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let var_x = x.iter().map(|p| (p - mx).norm_squared()).sum::<f64>() / n;
    let mut cov = Matrix3::zeros();
    for (p, q) in x.iter().zip(y) {
        cov += (q - my) * (p - mx).transpose();
    }
    cov /= n;
    if var_x < 1e-18 {
        return (1.0, Matrix3::identity(), my - mx);
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_x;
    (scale, r, my - scale * r * mx)
}

/// MPJPE after a per-frame similarity alignment of the prediction onto the
/// ground truth.
pub fn pampjpe(pred: &JointClip, gt: &JointClip) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut total = 0.0;
    for f in 0..gt.frames() {
        let (x, y) = (pred.frame(f), gt.frame(f));
        let (s, r, t) = umeyama(x, y);
        let aligned: Vec<Vector3<f64>> = x.iter().map(|p| s * r * p + t).collect();
        // a degenerate fit can never beat the unaligned error
        total += mean_error(&aligned, y).min(mean_error(x, y));
    }
    Ok(total / gt.frames() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidResult {
    pub value: f64,
    /// Set when a sample count does not exceed the feature dimension.
    pub rank_deficient: bool,
}

fn gaussian(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (set.len(), set[0].len());
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FidResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("FID needs non-empty sets"));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::invalid(
            "FID feature vectors must share a positive width",
        ));
    }
    let rank_deficient = a.len() <= d || b.len() <= d;
    if rank_deficient {
        log::warn!(
            "FID with {} and {} samples in {d} dims: covariance is rank deficient",
            a.len(),
            b.len()
        );
    }
    let (ma, ca) = gaussian(a);
    let (mb, cb) = gaussian(b);
    let ra = sym_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let value = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(FidResult {
        value: value.max(0.0),
        rank_deficient,
    })
}
