use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::skeleton::{
    HEAD, L_ELBOW, L_FINGERS, L_SHOULDER, L_WRIST, NECK, R_ELBOW, R_FINGERS, R_SHOULDER, R_WRIST,
};
use super::{JointClip, Skeleton, DEFAULT_FPS, NUM_JOINTS};
use crate::error::{Error, Result};

pub const MOTIF_FRAMES: usize = 24;
pub const BLEND_FRAMES: usize = 4;
const MIN_MOTIF_DISTANCE: f64 = 0.05;
const MAX_SPEED: f64 = 5.0;

const WORDS: [&str; 32] = [
    "hello", "thank", "you", "please", "good", "morning", "name", "my", "what", "where", "friend",
    "family", "learn", "sign", "language", "help", "water", "eat", "drink", "home", "school",
    "work", "yes", "no", "sorry", "love", "happy", "book", "time", "today", "tomorrow", "night",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub gesture_vocab: usize,
    pub samples: usize,
    /// Inclusive range of gesture words per sample.
    pub words_per_sample: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub clip: JointClip,
    pub text: String,
    pub words: Vec<usize>,
}

/// The first `n` gesture words.
pub fn gesture_words(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            WORDS
                .get(i)
                .map_or_else(|| format!("word{i}"), |w| w.to_string())
        })
        .collect()
}

/// One sinusoidal channel: rotation of `joint` about `axis`.
#[derive(Clone, Debug)]
struct Wave {
    joint: usize,
    axis: Unit<Vector3<f64>>,
    amplitude: f64,
    cycles: f64,
    phase: f64,
}

type Pose = Vec<Vector3<f64>>;

#[derive(Clone, Debug)]
struct Motif {
    frames: Vec<Pose>,
}

fn base_pose() -> Pose {
    let mut p = vec![Vector3::zeros(); NUM_JOINTS];
    // arms lowered into signing space with elbows bent forward
    p[L_SHOULDER] = Vector3::new(0.0, 0.0, -1.1);
    p[R_SHOULDER] = Vector3::new(0.0, 0.0, 1.1);
    p[L_ELBOW] = Vector3::new(0.0, -1.2, 0.0);
    p[R_ELBOW] = Vector3::new(0.0, 1.2, 0.0);
    p
}

const GROUPS: usize = 5;

fn group_joints(group: usize) -> Vec<usize> {
    match group {
        0 => vec![L_SHOULDER, L_ELBOW, L_WRIST],
        1 => vec![R_SHOULDER, R_ELBOW, R_WRIST],
        2 => (L_FINGERS..L_FINGERS + 15).collect(),
        3 => (R_FINGERS..R_FINGERS + 15).collect(),
        _ => vec![NECK, HEAD],
    }
}

fn random_axis(rng: &mut ChaCha8Rng) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n: f64 = v.norm();
        if n > 0.2 && n <= 1.0 {
            return Unit::new_normalize(v);
        }
    }
}

fn random_waves(rng: &mut ChaCha8Rng) -> Vec<Wave> {
    let mut groups: Vec<usize> = (0..GROUPS).filter(|_| rng.random_bool(0.5)).collect();
    while groups.len() < 2 {
        let g = rng.random_range(0..GROUPS);
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let mut waves = Vec::new();
    for g in groups {
        let cycles = [0.5, 1.0, 1.5][rng.random_range(0..3)];
        let phase = rng.random_range(0.0..2.0 * PI);
        match g {
            2 | 3 => {
                let sign = if g == 2 { 1.0 } else { -1.0 };
                let curl = Unit::new_normalize(Vector3::new(0.0, 0.0, -sign));
                let amplitude = rng.random_range(0.4..1.0);
                for (f, base) in group_joints(g).chunks(3).enumerate() {
                    let offset = f as f64 * 0.3;
                    for &joint in base {
                        waves.push(Wave {
                            joint,
                            axis: curl,
                            amplitude: amplitude * 0.6,
                            cycles,
                            phase: phase + offset,
                        });
                    }
                }
            }
            _ => {
                for joint in group_joints(g) {
                    waves.push(Wave {
                        joint,
                        axis: random_axis(rng),
                        amplitude: rng.random_range(0.2..0.5),
                        cycles,
                        phase: rng.random_range(0.0..2.0 * PI),
                    });
                }
            }
        }
    }
    waves
}

fn render_motif(waves: &[Wave]) -> Motif {
    let base = base_pose();
    let frames = (0..MOTIF_FRAMES)
        .map(|t| {
            let mut pose = base.clone();
            let s = t as f64 / MOTIF_FRAMES as f64;
            for w in waves {
                let angle = w.amplitude * (2.0 * PI * w.cycles * s + w.phase).sin();
                pose[w.joint] += w.axis.into_inner() * angle;
            }
            pose
        })
        .collect();
    Motif { frames }
}

fn pose_to_joints(skel: &Skeleton, pose: &Pose) -> Vec<Vector3<f64>> {
    let rots: Vec<Rotation3<f64>> = pose
        .iter()
        .map(|v| Rotation3::from_scaled_axis(*v))
        .collect();
    skel.forward_kinematics(skel.offset(0), &rots)
}

fn poses_to_clip(skel: &Skeleton, poses: &[Pose]) -> JointClip {
    let positions = poses.iter().flat_map(|p| pose_to_joints(skel, p)).collect();
    JointClip::new(positions, DEFAULT_FPS).expect("whole frames")
}

fn motif_distance(skel: &Skeleton, a: &Motif, b: &Motif) -> f64 {
    let mut total = 0.0;
    for (pa, pb) in a.frames.iter().zip(&b.frames) {
        let (ja, jb) = (pose_to_joints(skel, pa), pose_to_joints(skel, pb));
        total += ja.iter().zip(&jb).map(|(x, y)| (x - y).norm()).sum::<f64>();
    }
    total / (MOTIF_FRAMES * NUM_JOINTS) as f64
}

/// Concatenates motifs with linear blends between the last pose of one
/// and the first pose of the next.
fn sequence(motifs: &[&Motif]) -> Vec<Pose> {
    let mut out: Vec<Pose> = Vec::new();
    for (i, m) in motifs.iter().enumerate() {
        if i > 0 {
            let (from, to) = (out.last().expect("previous motif").clone(), &m.frames[0]);
            for k in 1..=BLEND_FRAMES {
                let a = k as f64 / (BLEND_FRAMES + 1) as f64;
                out.push(
                    from.iter()
                        .zip(to)
                        .map(|(x, y)| x * (1.0 - a) + y * a)
                        .collect(),
                );
            }
        }
        out.extend(m.frames.iter().cloned());
    }
    out
}

fn build_motifs(skel: &Skeleton, rng: &mut ChaCha8Rng, n: usize) -> Vec<Motif> {
    let mut motifs: Vec<Motif> = Vec::with_capacity(n);
    while motifs.len() < n {
        let cand = render_motif(&random_waves(rng));
        let clip = poses_to_clip(skel, &cand.frames);
        if clip.max_speed() >= MAX_SPEED * 0.5 {
            continue;
        }
        if motifs
            .iter()
            .all(|m| motif_distance(skel, m, &cand) > MIN_MOTIF_DISTANCE)
        {
            motifs.push(cand);
        }
    }
    motifs
}

/// Deterministic gesture-language corpus. Each gesture word is a fixed
/// motif of sinusoidal joint rotations; a sample chains several motifs and
/// its text is the matching word sequence. The root stays in place.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    if cfg.gesture_vocab < 2 {
        return Err(Error::Config(format!(
            "gesture vocabulary must have at least 2 words, got {}",
            cfg.gesture_vocab
        )));
    }
    let (lo, hi) = cfg.words_per_sample;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!(
            "invalid words-per-sample range {lo}..={hi}"
        )));
    }
    let skel = Skeleton::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let motifs = build_motifs(&skel, &mut rng, cfg.gesture_vocab);
    let words = gesture_words(cfg.gesture_vocab);
    let mut out = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let k = rng.random_range(lo..=hi);
        let ids: Vec<usize> = (0..k)
            .map(|_| rng.random_range(0..cfg.gesture_vocab))
            .collect();
        let chosen: Vec<&Motif> = ids.iter().map(|&i| &motifs[i]).collect();
        let clip = poses_to_clip(&skel, &sequence(&chosen));
        let text = ids
            .iter()
            .map(|&i| words[i].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        out.push(SynthSample {
            clip,
            text,
            words: ids,
        });
    }
    Ok(out)
}
