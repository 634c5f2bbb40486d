//! Skeletal motion: the 52-joint skeleton, the 623-channel per-frame feature
//! representation, normalization statistics, synthetic corpora and file I/O.

mod features;
pub mod io;
pub mod skeleton;
mod synth;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use features::{
    extract_features, features_to_joints, heading, layout, CONTACT_THRESHOLD, FEATURE_DIM,
};
pub use skeleton::{Skeleton, NUM_JOINTS};
pub use synth::{
    gesture_words, synth_corpus, SynthConfig, SynthSample, BLEND_FRAMES, MOTIF_FRAMES,
};

pub const DEFAULT_FPS: f64 = 20.0;
pub const STD_FLOOR: f32 = 1e-6;

/// Global joint positions, `frames × 52`, in meters with y up.
#[derive(Clone, Debug, PartialEq)]
pub struct JointClip {
    frames: usize,
    positions: Vec<Vector3<f64>>,
    pub fps: f64,
}

impl JointClip {
    pub fn new(positions: Vec<Vector3<f64>>, fps: f64) -> Result<Self> {
        if !positions.len().is_multiple_of(NUM_JOINTS) {
            return Err(Error::invalid(format!(
                "{} joint positions is not a whole number of 52-joint frames",
                positions.len()
            )));
        }
        Ok(JointClip {
            frames: positions.len() / NUM_JOINTS,
            positions,
            fps,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame(&self, t: usize) -> &[Vector3<f64>] {
        &self.positions[t * NUM_JOINTS..(t + 1) * NUM_JOINTS]
    }

    pub fn joint(&self, t: usize, j: usize) -> Vector3<f64> {
        self.positions[t * NUM_JOINTS + j]
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn is_finite(&self) -> bool {
        self.positions
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// First `n` frames.
    pub fn truncated(&self, n: usize) -> JointClip {
        let n = n.min(self.frames);
        JointClip {
            frames: n,
            positions: self.positions[..n * NUM_JOINTS].to_vec(),
            fps: self.fps,
        }
    }

    pub fn map(&self, f: impl Fn(Vector3<f64>) -> Vector3<f64>) -> JointClip {
        JointClip {
            frames: self.frames,
            positions: self.positions.iter().map(|&p| f(p)).collect(),
            fps: self.fps,
        }
    }

    /// Largest per-frame joint displacement times fps, in m/s.
    pub fn max_speed(&self) -> f64 {
        let mut best = 0.0f64;
        for t in 1..self.frames {
            for j in 0..NUM_JOINTS {
                best = best.max((self.joint(t, j) - self.joint(t - 1, j)).norm());
            }
        }
        best * self.fps
    }
}

/// Per-frame feature rows `[frames, 623]`. `stats_id` is set when the rows
/// are z-scored, naming the statistics used.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub features: Tensor<f32>,
    pub fps: f64,
    pub stats_id: Option<String>,
}

impl MotionSequence {
    pub fn new(features: Tensor<f32>, fps: f64) -> Result<Self> {
        if features.shape().len() != 2 || features.cols() != FEATURE_DIM {
            return Err(Error::invalid(format!(
                "motion features must be [frames, {FEATURE_DIM}], got {:?}",
                features.shape()
            )));
        }
        Ok(MotionSequence {
            features,
            fps,
            stats_id: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub fn is_normalized(&self) -> bool {
        self.stats_id.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub id: String,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    /// Identity statistics (mean 0, std 1).
    pub fn identity() -> Self {
        Self::from_parts(vec![0.0; FEATURE_DIM], vec![1.0; FEATURE_DIM])
    }

    fn from_parts(mean: Vec<f32>, std: Vec<f32>) -> Self {
        let mut h = Sha256::new();
        for v in mean.iter().chain(&std) {
            h.update(v.to_le_bytes());
        }
        let id = hex::encode(&h.finalize()[..8]);
        FeatureStats { id, mean, std }
    }

    /// Per-channel mean and standard deviation over every row of `corpus`,
    /// accumulated in f64. The deviation is floored at [`STD_FLOOR`].
    pub fn compute<'a>(corpus: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut sum = vec![0.0f64; FEATURE_DIM];
        let mut sq = vec![0.0f64; FEATURE_DIM];
        let mut n = 0usize;
        let seqs: Vec<&MotionSequence> = corpus.into_iter().collect();
        for s in &seqs {
            if s.is_normalized() {
                return Err(Error::invalid(
                    "statistics must be computed on raw features",
                ));
            }
            for r in 0..s.rows() {
                for (c, &v) in s.features.row(r).iter().enumerate() {
                    sum[c] += v as f64;
                }
            }
            n += s.rows();
        }
        if n == 0 {
            return Err(Error::invalid(
                "cannot compute statistics of an empty corpus",
            ));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for s in &seqs {
            for r in 0..s.rows() {
                for (c, &v) in s.features.row(r).iter().enumerate() {
                    let d = v as f64 - mean[c];
                    sq[c] += d * d;
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| ((s / n as f64).sqrt() as f32).max(STD_FLOOR))
            .collect();
        Ok(Self::from_parts(
            mean.iter().map(|&m| m as f32).collect(),
            std,
        ))
    }

    pub fn normalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        if seq.is_normalized() {
            return Err(Error::invalid("sequence is already normalized"));
        }
        let mut out = seq.clone();
        for (i, v) in out.features.data_mut().iter_mut().enumerate() {
            let c = i % FEATURE_DIM;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out.stats_id = Some(self.id.clone());
        Ok(out)
    }

    pub fn denormalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        match &seq.stats_id {
            Some(id) if *id == self.id => {}
            Some(id) => {
                return Err(Error::invalid(format!(
                    "sequence normalized with statistics {id}, not {}",
                    self.id
                )))
            }
            None => return Err(Error::invalid("sequence is not normalized")),
        }
        let mut out = seq.clone();
        for (i, v) in out.features.data_mut().iter_mut().enumerate() {
            let c = i % FEATURE_DIM;
            *v = *v * self.std[c] + self.mean[c];
        }
        out.stats_id = None;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: Vec<Vec<f32>>) -> MotionSequence {
        let n = rows.len();
        let data = rows.into_iter().flatten().collect();
        MotionSequence::new(Tensor::new([n, FEATURE_DIM], data).unwrap(), DEFAULT_FPS).unwrap()
    }

    fn ramp(r: usize) -> Vec<f32> {
        (0..FEATURE_DIM)
            .map(|c| (r * 7 + c) as f32 * 0.01 - 2.0)
            .collect()
    }

    #[test]
    fn normalizing_the_mean_row_gives_zeros() {
        let corpus = seq((0..5).map(ramp).collect());
        let stats = FeatureStats::compute([&corpus]).unwrap();
        let mean_row = seq(vec![stats.mean.clone()]);
        let z = stats.normalize(&mean_row).unwrap();
        assert!(z.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_channel_is_floored_and_zero() {
        let corpus = seq(vec![vec![3.5; FEATURE_DIM]; 4]);
        let stats = FeatureStats::compute([&corpus]).unwrap();
        assert!(stats.std.iter().all(|&s| s == STD_FLOOR));
        let z = stats.normalize(&corpus).unwrap();
        assert!(z.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_within_tolerance() {
        let corpus = seq((0..6).map(ramp).collect());
        let stats = FeatureStats::compute([&corpus]).unwrap();
        let back = stats
            .denormalize(&stats.normalize(&corpus).unwrap())
            .unwrap();
        for (a, b) in back.features.data().iter().zip(corpus.features.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_corpus_has_zero_mean() {
        let corpus = seq((0..9).map(ramp).collect());
        let stats = FeatureStats::compute([&corpus]).unwrap();
        let z = stats.normalize(&corpus).unwrap();
        let mut raw = z.clone();
        raw.stats_id = None;
        let again = FeatureStats::compute([&raw]).unwrap();
        assert!(again.mean.iter().all(|m| m.abs() < 1e-5));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(FeatureStats::compute(std::iter::empty()).is_err());
    }

    #[test]
    fn wrong_stats_id_is_rejected() {
        let corpus = seq((0..3).map(ramp).collect());
        let stats = FeatureStats::compute([&corpus]).unwrap();
        let z = stats.normalize(&corpus).unwrap();
        assert!(FeatureStats::identity().denormalize(&z).is_err());
    }
}
