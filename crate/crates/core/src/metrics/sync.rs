use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::dataset::SegmentAnnotation;
use crate::error::{Error, Result};
use crate::model::argmax;

pub const DEFAULT_TAU: f64 = 0.75;

/// Slack when comparing accumulated mass against `tau`.
const MASS_TOL: f64 = 1e-12;

/// Inclusive frame range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Config(format!("interval start {start} exceeds end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    fn overlap(&self, other: &Interval) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if lo > hi {
            0
        } else {
            hi - lo + 1
        }
    }
}

impl From<[usize; 2]> for Interval {
    fn from(s: [usize; 2]) -> Self {
        Self { start: s[0], end: s[1] }
    }
}

/// Whether the most-attended frame (lowest index on ties) lies in `gt`.
pub fn element_of(beta: &[f64], gt: Interval) -> bool {
    gt.contains(argmax(beta))
}

/// Smallest contiguous interval that contains the argmax frame and carries
/// at least `tau` of the attention mass. Among equally short candidates the
/// heavier one wins, then the one starting earlier.
pub fn predicted_interval(beta: &[f64], tau: f64) -> Interval {
    let n = beta.len();
    let peak = argmax(beta);
    let mut prefix = vec![0.0; n + 1];
    for (i, &b) in beta.iter().enumerate() {
        prefix[i + 1] = prefix[i] + b;
    }
    let mass = |s: usize, e: usize| prefix[e + 1] - prefix[s];
    for width in 1..=n {
        let lo = (peak + 1).saturating_sub(width);
        let hi = peak.min(n - width);
        let mut best: Option<(f64, usize)> = None;
        for s in lo..=hi {
            let m = mass(s, s + width - 1);
            if m + MASS_TOL >= tau && best.is_none_or(|(bm, _)| m > bm) {
                best = Some((m, s));
            }
        }
        if let Some((_, s)) = best {
            return Interval {
                start: s,
                end: s + width - 1,
            };
        }
    }
    Interval {
        start: 0,
        end: n.saturating_sub(1),
    }
}

/// Intersection over union in frame counts.
pub fn iou(pred: Interval, gt: Interval) -> f64 {
    let inter = pred.overlap(&gt);
    inter as f64 / (pred.len() + gt.len() - inter) as f64
}

/// Intersection over the predicted length.
pub fn iop(pred: Interval, gt: Interval) -> f64 {
    pred.overlap(&gt) as f64 / pred.len() as f64
}

/// One scored sample: the generated words (without BOS/EOS), the attention
/// rows of the emitted tokens, and the ground-truth segments.
#[derive(Clone, Copy, Debug)]
pub struct SyncInput<'a> {
    pub id: &'a str,
    pub words: &'a [String],
    pub map: &'a AttentionMap,
    pub segments: &'a SegmentAnnotation,
}

/// Scores of one annotated segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordDiagnostic {
    pub sample: String,
    pub label: String,
    pub word: String,
    /// Decoding step of the matched word, absent on a miss.
    pub step: Option<usize>,
    pub argmax_frame: Option<usize>,
    pub predicted: Option<Interval>,
    pub gt: Interval,
    pub iou: f64,
    pub iop: f64,
    pub element_of: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSync {
    pub id: String,
    pub iou: f64,
    pub iop: f64,
    pub element_of: f64,
    pub segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub tau: f64,
    /// Scored (word, segment) pairs.
    pub pairs: usize,
    pub iou: f64,
    pub iop: f64,
    pub element_of: f64,
    /// Fraction of segments whose keyword was generated at all.
    pub word_recall: f64,
    pub samples: Vec<SampleSync>,
    #[serde(skip)]
    pub words: Vec<WordDiagnostic>,
}

/// Matches every annotated segment to a generated motion word and scores
/// that word's attention row. The k-th segment carrying a label is paired
/// with the k-th generated occurrence of the label's keyword; unmatched
/// segments score zero.
pub fn evaluate_sync(inputs: &[SyncInput], keywords: &BTreeMap<String, String>, tau: f64) -> Result<SyncReport> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau {tau} outside (0, 1]")));
    }
    if inputs.iter().all(|s| s.segments.segments.is_empty()) {
        return Err(Error::Config("no annotated segments to score".into()));
    }
    let mut words = Vec::new();
    let mut samples = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let first = words.len();
        for seg in &inp.segments.segments {
            let keyword = keywords.get(&seg.label).ok_or_else(|| {
                Error::Config(format!("segment label {:?} is not in the keyword table", seg.label))
            })?;
            let k = seen.entry(seg.label.as_str()).or_insert(0);
            let step = inp
                .words
                .iter()
                .enumerate()
                .filter(|(_, w)| *w == keyword)
                .map(|(i, _)| i)
                .nth(*k)
                .filter(|&i| i < inp.map.len());
            *k += 1;
            let gt = Interval::from(seg.frame_span);
            let diag = match step {
                Some(t) => {
                    let beta = &inp.map.beta[t];
                    let pred = predicted_interval(beta, tau);
                    WordDiagnostic {
                        sample: inp.id.to_string(),
                        label: seg.label.clone(),
                        word: keyword.clone(),
                        step: Some(t),
                        argmax_frame: Some(argmax(beta)),
                        predicted: Some(pred),
                        gt,
                        iou: iou(pred, gt),
                        iop: iop(pred, gt),
                        element_of: element_of(beta, gt),
                    }
                }
                None => WordDiagnostic {
                    sample: inp.id.to_string(),
                    label: seg.label.clone(),
                    word: keyword.clone(),
                    step: None,
                    argmax_frame: None,
                    predicted: None,
                    gt,
                    iou: 0.0,
                    iop: 0.0,
                    element_of: false,
                },
            };
            words.push(diag);
        }
        let mine = &words[first..];
        let n = mine.len().max(1) as f64;
        samples.push(SampleSync {
            id: inp.id.to_string(),
            iou: mine.iter().map(|d| d.iou).sum::<f64>() / n,
            iop: mine.iter().map(|d| d.iop).sum::<f64>() / n,
            element_of: mine.iter().filter(|d| d.element_of).count() as f64 / n,
            segments: mine.len(),
        });
    }
    let n = words.len() as f64;
    Ok(SyncReport {
        tau,
        pairs: words.len(),
        iou: words.iter().map(|d| d.iou).sum::<f64>() / n,
        iop: words.iter().map(|d| d.iop).sum::<f64>() / n,
        element_of: words.iter().filter(|d| d.element_of).count() as f64 / n,
        word_recall: words.iter().filter(|d| d.step.is_some()).count() as f64 / n,
        samples,
        words,
    })
}

/// Per-word diagnostics as CSV. Missing values are empty cells.
pub fn write_word_csv<W: Write>(words: &[WordDiagnostic], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "sample",
        "word",
        "step",
        "argmax_frame",
        "pred_start",
        "pred_end",
        "gt_start",
        "gt_end",
        "iou",
        "iop",
        "element_of",
    ])?;
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for d in words {
        w.write_record([
            d.sample.clone(),
            d.word.clone(),
            opt(d.step),
            opt(d.argmax_frame),
            opt(d.predicted.map(|p| p.start)),
            opt(d.predicted.map(|p| p.end)),
            d.gt.start.to_string(),
            d.gt.end.to_string(),
            d.iou.to_string(),
            d.iop.to_string(),
            d.element_of.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Segment;

    fn one_hot(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn element_of_cases() {
        let gt = Interval::new(41, 59).unwrap();
        assert!(element_of(&one_hot(80, 44), gt));
        assert!(!element_of(&one_hot(80, 21), gt));
        let mut tie = vec![0.0; 80];
        tie[30] = 0.5;
        tie[45] = 0.5;
        assert!(!element_of(&tie, gt));
    }

    #[test]
    fn interval_cases() {
        assert_eq!(predicted_interval(&one_hot(12, 7), 0.9), Interval { start: 7, end: 7 });
        assert_eq!(predicted_interval(&[0.1; 10], 0.5), Interval { start: 0, end: 4 });

        let raw: Vec<f64> = (0..=10).map(|i| (5.0 - (i as f64 - 5.0).abs()).max(0.0)).collect();
        let z: f64 = raw.iter().sum();
        let tri: Vec<f64> = raw.iter().map(|x| x / z).collect();
        assert_eq!(predicted_interval(&tri, 0.75), Interval { start: 3, end: 7 });
    }

    #[test]
    fn overlap_cases() {
        let (p, g) = (Interval::new(17, 45).unwrap(), Interval::new(10, 40).unwrap());
        assert!((iou(p, g) - 24.0 / 36.0).abs() < 1e-15);
        assert!((iop(p, g) - 24.0 / 29.0).abs() < 1e-15);
        assert_eq!(iou(g, g), 1.0);
        let far = Interval::new(50, 60).unwrap();
        assert_eq!((iou(far, g), iop(far, g)), (0.0, 0.0));
        assert!(Interval::new(3, 2).is_err());
    }

    #[test]
    fn evaluate_matches_repeated_labels_in_order() {
        let keywords: BTreeMap<String, String> =
            [("walk", "walks"), ("turn", "turns")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let seg = |label: &str, f: [usize; 2]| Segment {
            label: label.into(),
            word_span: [0, 0],
            frame_span: f,
        };
        let ann = SegmentAnnotation {
            segments: vec![seg("walk", [0, 9]), seg("turn", [10, 19]), seg("walk", [20, 29])],
        };
        let words: Vec<String> = "a person walks then turns and walks".split(' ').map(String::from).collect();
        let mut map = AttentionMap::default();
        for center in [0, 0, 3, 12, 14, 18, 25, 29] {
            map.push_row(one_hot(30, center), center as f64, [0, 29]);
        }
        let report = evaluate_sync(
            &[SyncInput {
                id: "s",
                words: &words,
                map: &map,
                segments: &ann,
            }],
            &keywords,
            0.75,
        )
        .unwrap();
        assert_eq!(report.pairs, 3);
        assert_eq!(report.element_of, 1.0);
        assert_eq!(report.words[2].step, Some(6));
        assert_eq!(report.iop, 1.0);

        let short: Vec<String> = words[..5].to_vec();
        let miss = evaluate_sync(
            &[SyncInput {
                id: "s",
                words: &short,
                map: &map,
                segments: &ann,
            }],
            &keywords,
            0.75,
        )
        .unwrap();
        assert!((miss.element_of - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(miss.words[2].step, None);

        let mut csv = Vec::new();
        write_word_csv(&miss.words, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(3).unwrap().starts_with("s,walks,,,,,20,29,0,0,false"));
    }

    #[test]
    fn empty_annotations_rejected() {
        let map = AttentionMap::default();
        let ann = SegmentAnnotation::default();
        let inp = SyncInput {
            id: "x",
            words: &[],
            map: &map,
            segments: &ann,
        };
        assert!(evaluate_sync(&[inp], &BTreeMap::new(), 0.75).is_err());
        assert!(evaluate_sync(&[], &BTreeMap::new(), 0.75).is_err());
    }
}
