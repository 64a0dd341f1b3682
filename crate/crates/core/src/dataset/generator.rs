//! Compositional stick-figure motions with exact ground-truth segments.
//!
//! A sample concatenates 1–4 primitives from a fixed library. Each primitive
//! is a smooth offset field over an 8-joint rest pose that starts and ends at
//! rest, so concatenation only needs a short linear blend. Captions name the
//! primitives in temporal order with filler words around them.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{PoseSequence, Sample, Segment, SegmentAnnotation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const JOINTS: usize = 8;
pub const POSE_DIM: usize = 3 * JOINTS;

/// Bound on any joint coordinate change between consecutive frames.
pub const MAX_FRAME_STEP: f64 = 0.35;

const BLEND_FRAMES: usize = 5;
const MIN_DURATION: usize = 20;
const MAX_DURATION: usize = 60;
const NOISE_STD: f64 = 0.004;
const FPS: f64 = 20.0;

// pelvis, head, l_hand, r_hand, l_knee, r_knee, l_foot, r_foot
const PELVIS: usize = 0;
const HEAD: usize = 1;
const L_HAND: usize = 2;
const R_HAND: usize = 3;
const L_KNEE: usize = 4;
const R_KNEE: usize = 5;
const L_FOOT: usize = 6;
const R_FOOT: usize = 7;

const REST: [[f64; 3]; JOINTS] = [
    [0.0, 1.0, 0.0],
    [0.0, 1.7, 0.0],
    [-0.3, 1.0, 0.0],
    [0.3, 1.0, 0.0],
    [-0.12, 0.5, 0.0],
    [0.12, 0.5, 0.0],
    [-0.12, 0.0, 0.0],
    [0.12, 0.0, 0.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Primitive {
    Walk,
    Turn,
    Sit,
    Stand,
    Wave,
    Jump,
    Pick,
    Kick,
    Bend,
    Clap,
}

pub const PRIMITIVES: [Primitive; 10] = [
    Primitive::Walk,
    Primitive::Turn,
    Primitive::Sit,
    Primitive::Stand,
    Primitive::Wave,
    Primitive::Jump,
    Primitive::Pick,
    Primitive::Kick,
    Primitive::Bend,
    Primitive::Clap,
];

impl Primitive {
    pub fn label(self) -> &'static str {
        match self {
            Primitive::Walk => "walk",
            Primitive::Turn => "turn",
            Primitive::Sit => "sit",
            Primitive::Stand => "stand",
            Primitive::Wave => "wave",
            Primitive::Jump => "jump",
            Primitive::Pick => "pick",
            Primitive::Kick => "kick",
            Primitive::Bend => "bend",
            Primitive::Clap => "clap",
        }
    }

    /// The motion word that names this primitive in captions.
    pub fn keyword(self) -> &'static str {
        match self {
            Primitive::Walk => "walks",
            Primitive::Turn => "turns",
            Primitive::Sit => "sits",
            Primitive::Stand => "stands",
            Primitive::Wave => "waves",
            Primitive::Jump => "jumps",
            Primitive::Pick => "picks",
            Primitive::Kick => "kicks",
            Primitive::Bend => "bends",
            Primitive::Clap => "claps",
        }
    }

    fn phrase(self) -> &'static [&'static str] {
        match self {
            Primitive::Walk => &["walks", "forward"],
            Primitive::Turn => &["turns", "around"],
            Primitive::Sit => &["sits", "down"],
            Primitive::Stand => &["stands", "up"],
            Primitive::Wave => &["waves"],
            Primitive::Jump => &["jumps"],
            Primitive::Pick => &["picks", "something", "up"],
            Primitive::Kick => &["kicks"],
            Primitive::Bend => &["bends", "over"],
            Primitive::Clap => &["claps"],
        }
    }

    /// Joint offsets from the rest pose at phase `s ∈ [0,1]`, plus the
    /// forward root displacement accumulated so far within the primitive.
    fn offsets(self, s: f64, amp: f64) -> ([[f64; 3]; JOINTS], f64) {
        let mut o = [[0.0; 3]; JOINTS];
        let bump = (PI * s).sin();
        let plateau = smoothstep(0.0, 0.25, s) * (1.0 - smoothstep(0.8, 1.0, s));
        let mut forward = 0.0;
        match self {
            Primitive::Walk => {
                let swing = (2.0 * PI * 2.0 * s).sin() * bump * amp;
                o[L_FOOT][2] += 0.3 * swing;
                o[R_FOOT][2] -= 0.3 * swing;
                o[L_KNEE][2] += 0.15 * swing;
                o[R_KNEE][2] -= 0.15 * swing;
                o[L_FOOT][1] += 0.08 * swing.max(0.0);
                o[R_FOOT][1] += 0.08 * (-swing).max(0.0);
                o[L_HAND][2] -= 0.2 * swing;
                o[R_HAND][2] += 0.2 * swing;
                forward = 1.2 * amp * smoothstep(0.0, 1.0, s);
            }
            Primitive::Turn => {
                // full spin about the vertical axis, arms slightly raised
                let angle = 2.0 * PI * smoothstep(0.0, 1.0, s);
                for (j, r) in REST.iter().enumerate() {
                    let (x, z) = (r[0], r[2]);
                    o[j][0] += x * angle.cos() - z * angle.sin() - x;
                    o[j][2] += x * angle.sin() + z * angle.cos() - z;
                }
                o[L_HAND][1] += 0.15 * bump * amp;
                o[R_HAND][1] += 0.15 * bump * amp;
            }
            Primitive::Sit => {
                let b = plateau * amp;
                for j in [PELVIS, HEAD, L_HAND, R_HAND] {
                    o[j][1] -= 0.45 * b;
                    o[j][2] -= 0.15 * b;
                }
                o[L_KNEE][2] += 0.35 * b;
                o[R_KNEE][2] += 0.35 * b;
                o[L_HAND][2] += 0.3 * b;
                o[R_HAND][2] += 0.3 * b;
            }
            Primitive::Stand => {
                // crouch briefly, then extend onto the toes with arms overhead
                let crouch = (PI * (s / 0.35).min(1.0)).sin() * amp;
                let rise = (PI * ((s - 0.35).max(0.0) / 0.65)).sin() * amp;
                for j in [PELVIS, HEAD, L_HAND, R_HAND] {
                    o[j][1] += -0.3 * crouch + 0.12 * rise;
                }
                o[L_KNEE][2] += 0.25 * crouch;
                o[R_KNEE][2] += 0.25 * crouch;
                o[L_HAND][1] += 0.8 * rise;
                o[R_HAND][1] += 0.8 * rise;
            }
            Primitive::Wave => {
                let b = plateau * amp;
                o[R_HAND][0] += 0.1 * b + 0.15 * b * (2.0 * PI * 3.0 * s).sin();
                o[R_HAND][1] += 0.75 * b;
            }
            Primitive::Jump => {
                let crouch = if s < 0.3 { (PI * s / 0.3).sin() } else { 0.0 };
                let flight = if (0.3..0.75).contains(&s) {
                    (PI * (s - 0.3) / 0.45).sin()
                } else {
                    0.0
                };
                for j in 0..JOINTS {
                    o[j][1] += amp * (0.4 * flight);
                }
                for j in [PELVIS, HEAD, L_HAND, R_HAND] {
                    o[j][1] -= amp * 0.2 * crouch;
                }
                o[L_HAND][1] += amp * 0.5 * flight;
                o[R_HAND][1] += amp * 0.5 * flight;
            }
            Primitive::Pick => {
                let b = bump * amp;
                o[HEAD][1] -= 0.5 * b;
                o[HEAD][2] += 0.45 * b;
                o[PELVIS][2] -= 0.15 * b;
                o[R_HAND][1] -= 0.9 * b;
                o[R_HAND][2] += 0.4 * b;
                o[L_HAND][1] -= 0.2 * b;
                o[R_KNEE][2] += 0.2 * b;
            }
            Primitive::Kick => {
                let b = bump * bump * amp;
                o[R_FOOT][2] += 0.6 * b;
                o[R_FOOT][1] += 0.45 * b;
                o[R_KNEE][2] += 0.3 * b;
                o[R_KNEE][1] += 0.2 * b;
                o[L_HAND][2] -= 0.15 * b;
                o[R_HAND][2] -= 0.15 * b;
            }
            Primitive::Bend => {
                let b = bump * amp;
                o[HEAD][1] -= 0.35 * b;
                o[HEAD][2] += 0.4 * b;
                for j in [L_HAND, R_HAND] {
                    o[j][1] -= 0.45 * b;
                    o[j][2] += 0.25 * b;
                }
                o[PELVIS][2] -= 0.1 * b;
            }
            Primitive::Clap => {
                let b = plateau * amp;
                let gap = 0.1 * (2.0 * PI * 3.0 * s).sin().abs();
                o[L_HAND][0] += b * (0.3 - 0.05 - gap);
                o[R_HAND][0] -= b * (0.3 - 0.05 - gap);
                o[L_HAND][1] += 0.35 * b;
                o[R_HAND][1] += 0.35 * b;
                o[L_HAND][2] += 0.3 * b;
                o[R_HAND][2] += 0.3 * b;
            }
        }
        (o, forward)
    }
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Primitive label → caption keyword, the motion-word lexicon used for
/// synchronization scoring of generated data.
pub fn keyword_table() -> BTreeMap<String, String> {
    PRIMITIVES
        .iter()
        .map(|p| (p.label().to_string(), p.keyword().to_string()))
        .collect()
}

/// Deterministic corpus: identical arguments give bitwise-identical samples.
/// Sample `i` draws from its own ChaCha stream derived from `(seed, i)`.
pub fn generate_corpus(n: usize, seed: u64, min_prims: usize, max_prims: usize) -> Result<Vec<Sample>> {
    if !(1 <= min_prims && min_prims <= max_prims && max_prims <= 4) {
        return Err(Error::Config(format!(
            "primitive bounds must satisfy 1 <= min ({min_prims}) <= max ({max_prims}) <= 4"
        )));
    }
    (0..n)
        .map(|i| generate_sample(seed, i as u64, min_prims, max_prims))
        .collect()
}

fn generate_sample(seed: u64, index: u64, min_prims: usize, max_prims: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");

    let k = rng.random_range(min_prims..=max_prims);
    let mut prims = Vec::with_capacity(k);
    for _ in 0..k {
        // no immediate repeats, so every boundary is a real action change
        let p = loop {
            let p = PRIMITIVES[rng.random_range(0..PRIMITIVES.len())];
            if prims.last() != Some(&p) {
                break p;
            }
        };
        prims.push(p);
    }

    let mut frames: Vec<[f64; POSE_DIM]> = Vec::new();
    let mut frame_spans = Vec::with_capacity(k);
    let mut root_z = 0.0;
    for (pi, &p) in prims.iter().enumerate() {
        let dur = rng.random_range(MIN_DURATION..=MAX_DURATION);
        let amp = rng.random_range(0.85..1.15);
        let start = frames.len();
        let mut moved = 0.0;
        for f in 0..dur {
            let s = f as f64 / (dur - 1) as f64;
            let (off, fwd) = p.offsets(s, amp);
            moved = fwd;
            let mut pose = [0.0; POSE_DIM];
            for j in 0..JOINTS {
                for c in 0..3 {
                    let mut v = REST[j][c] + off[j][c];
                    if c == 2 {
                        v += root_z + fwd;
                    }
                    pose[j * 3 + c] = v;
                }
            }
            frames.push(pose);
        }
        root_z += moved;
        if pi > 0 {
            // linear blend from the previous primitive's last frame into this one
            let from = frames[start - 1];
            let to = frames[start + BLEND_FRAMES];
            for b in 0..BLEND_FRAMES {
                let w = (b + 1) as f64 / (BLEND_FRAMES + 1) as f64;
                for (d, (&x, &y)) in frames[start + b].iter_mut().zip(from.iter().zip(&to)) {
                    *d = (1.0 - w) * x + w * y;
                }
            }
        }
        frame_spans.push([start, frames.len() - 1]);
    }

    for pose in frames.iter_mut() {
        for v in pose.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    // root-centre: zero mean pelvis position over the sequence
    let t = frames.len();
    let mut mean = [0.0; 3];
    for pose in &frames {
        for c in 0..3 {
            mean[c] += pose[PELVIS * 3 + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= t as f64;
    }
    let mut data = Vec::with_capacity(t * POSE_DIM);
    for pose in &frames {
        for j in 0..JOINTS {
            for c in 0..3 {
                data.push(pose[j * 3 + c] - mean[c]);
            }
        }
    }

    let (caption, word_spans) = realize_caption(&prims);
    let segments = prims
        .iter()
        .zip(frame_spans)
        .zip(word_spans)
        .map(|((p, frame_span), word_span)| Segment {
            label: p.label().to_string(),
            word_span,
            frame_span,
        })
        .collect();

    Ok(Sample {
        id: format!("synth-{seed}-{index:05}"),
        poses: PoseSequence::new(Tensor::new(vec![t, POSE_DIM], data)?, FPS)?,
        caption,
        segments: Some(SegmentAnnotation { segments }),
    })
}

/// "a person P1 then P2 … and Pk", returning the word span of each primitive.
fn realize_caption(prims: &[Primitive]) -> (String, Vec<[usize; 2]>) {
    let mut words: Vec<&str> = vec!["a", "person"];
    let mut spans = Vec::with_capacity(prims.len());
    for (i, p) in prims.iter().enumerate() {
        let start = if i == 0 {
            0
        } else {
            words.push(if i + 1 == prims.len() { "and" } else { "then" });
            words.len() - 1
        };
        words.extend_from_slice(p.phrase());
        spans.push([start, words.len() - 1]);
    }
    (words.join(" "), spans)
}
