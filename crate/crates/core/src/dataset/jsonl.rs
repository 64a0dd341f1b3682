//! One JSON object per line:
//! `{"id", "fps", "poses": [[f64; c]; T], "caption", "segments": [...]}`.
//! Floats are written with 17 significant digits.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PoseSequence, Sample, Segment, SegmentAnnotation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    fps: Option<f64>,
    poses: Vec<Vec<f64>>,
    caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segments: Option<Vec<Segment>>,
}

const DEFAULT_FPS: f64 = 20.0;

/// Writes floats as `{:.16e}` so every value carries 17 significant digits.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn write_jsonl<W: Write>(samples: &[Sample], mut out: W) -> Result<()> {
    for s in samples {
        let rec = Record {
            id: Some(s.id.clone()),
            fps: Some(s.poses.fps),
            poses: s.poses.frames.row_vecs(),
            caption: s.caption.clone(),
            segments: s.segments.as_ref().map(|a| a.segments.clone()),
        };
        let mut ser = serde_json::Serializer::with_formatter(&mut out, SeventeenDigits);
        rec.serialize(&mut ser)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(samples, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: Read>(input: R, origin: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Record {
            path: origin.to_path_buf(),
            line: lineno,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let frames = Tensor::from_rows(&rec.poses).map_err(|e| err(format!("poses: {e}")))?;
        if frames.rows() == 0 {
            return Err(err("poses: empty motion".into()));
        }
        let poses = PoseSequence::new(frames, rec.fps.unwrap_or(DEFAULT_FPS)).map_err(|e| err(e.to_string()))?;
        out.push(Sample {
            id: rec.id.unwrap_or_else(|| format!("line-{lineno}")),
            poses,
            caption: rec.caption,
            segments: rec.segments.map(|segments| SegmentAnnotation { segments }),
        });
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    read_jsonl(File::open(path)?, path)
}
