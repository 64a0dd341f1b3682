//! Motion-language samples, the synthetic compositional generator, the
//! vocabulary, and the JSONL sample format.

mod generator;
mod jsonl;
mod vocab;

pub use generator::{
    generate_corpus, keyword_table, Primitive, JOINTS, MAX_FRAME_STEP, POSE_DIM, PRIMITIVES,
};
pub use jsonl::{load_jsonl, read_jsonl, save_jsonl, write_jsonl};
pub use vocab::{tokenize, Vocab, BOS, EOS, PAD, UNK};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `T_x × c` pose features for one motion.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub frames: Tensor,
    pub fps: f64,
}

impl PoseSequence {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::InvalidTensor(format!(
                "pose sequence must be T×c, got {:?}",
                frames.shape()
            )));
        }
        frames.validate()?;
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Token ids (BOS first, EOS last) plus the text they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    pub tokens: Vec<usize>,
    pub raw: String,
}

/// Ground-truth alignment of one primitive action.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: String,
    /// Inclusive indices into the whitespace-split caption words.
    pub word_span: [usize; 2],
    /// Inclusive frame indices.
    pub frame_span: [usize; 2],
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SegmentAnnotation {
    pub segments: Vec<Segment>,
}

impl SegmentAnnotation {
    /// Checks ordering and bounds against a motion of `frames` frames and a
    /// caption of `words` words.
    pub fn validate(&self, frames: usize, words: usize) -> Result<()> {
        let mut prev: Option<&Segment> = None;
        for s in &self.segments {
            let [fs, fe] = s.frame_span;
            let [ws, we] = s.word_span;
            if fs > fe || fe >= frames {
                return Err(Error::Config(format!(
                    "segment {:?} frame span {:?} outside [0, {}]",
                    s.label,
                    s.frame_span,
                    frames.saturating_sub(1)
                )));
            }
            if ws > we || we >= words {
                return Err(Error::Config(format!(
                    "segment {:?} word span {:?} outside caption of {words} words",
                    s.label, s.word_span
                )));
            }
            if let Some(p) = prev {
                if fs < p.frame_span[1] || ws < p.word_span[1] {
                    return Err(Error::Config(format!(
                        "segment {:?} is out of order after {:?}",
                        s.label, p.label
                    )));
                }
            }
            prev = Some(s);
        }
        Ok(())
    }
}

/// One record of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub poses: PoseSequence,
    pub caption: String,
    pub segments: Option<SegmentAnnotation>,
}

/// A sample with its caption mapped through a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    pub poses: Tensor,
    pub caption: Caption,
    pub segments: Option<SegmentAnnotation>,
}

impl EncodedSample {
    pub fn new(sample: &Sample, vocab: &Vocab) -> Self {
        Self {
            id: sample.id.clone(),
            poses: sample.poses.frames.clone(),
            caption: vocab.encode(&sample.caption),
            segments: sample.segments.clone(),
        }
    }
}

pub fn encode_all(samples: &[Sample], vocab: &Vocab) -> Vec<EncodedSample> {
    samples.iter().map(|s| EncodedSample::new(s, vocab)).collect()
}
