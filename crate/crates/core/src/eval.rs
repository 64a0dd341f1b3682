//! Greedy captioning of a dataset and the report combining text and
//! synchronization metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{tokenize, Sample, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{bleu_scores, evaluate_sync, rouge_l_corpus, SyncInput, SyncReport};
use crate::model::{Generation, Model};

/// Generated caption of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Captioned {
    pub id: String,
    /// Generated words, EOS stripped.
    pub words: Vec<String>,
    pub reference: Vec<String>,
    pub generation: Generation,
    pub frames: usize,
}

impl Captioned {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    /// `m₀ / T_x`: the first step's center relative to the motion length.
    pub fn start_fraction(&self) -> f64 {
        self.generation.attention.centers.first().copied().unwrap_or(0.0) / self.frames as f64
    }
}

/// Captions every sample. Samples are independent, so the result does not
/// depend on the thread count.
pub fn caption_all(model: &Model, vocab: &Vocab, samples: &[Sample]) -> Result<Vec<Captioned>> {
    samples
        .par_iter()
        .map(|s| {
            let generation = model.generate(&s.poses.frames)?;
            Ok(Captioned {
                id: s.id.clone(),
                words: vocab.decode_words(&generation.emitted),
                reference: tokenize(&s.caption),
                generation,
                frames: s.poses.len(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricSet {
    pub bleu: bool,
    pub rouge: bool,
    pub sync: bool,
}

impl MetricSet {
    pub fn all() -> Self {
        Self {
            bleu: true,
            rouge: true,
            sync: true,
        }
    }

    /// Parses a comma-separated list of `bleu`, `rouge`, `sync`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut m = Self {
            bleu: false,
            rouge: false,
            sync: false,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "bleu" => m.bleu = true,
                "rouge" => m.rouge = true,
                "sync" => m.sync = true,
                other => return Err(Error::Config(format!("unknown metric {other:?} (expected bleu, rouge, sync)"))),
            }
        }
        if !(m.bleu || m.rouge || m.sync) {
            return Err(Error::Config("no metrics requested".into()));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<BleuScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sync: Option<SyncReport>,
    /// Mean `m₀ / T_x` over samples, reported with `sync`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_fraction: Option<f64>,
}

/// Scores already generated captions.
pub fn score(
    captions: &[Captioned],
    samples: &[Sample],
    metrics: MetricSet,
    keywords: &BTreeMap<String, String>,
    tau: f64,
) -> Result<EvalReport> {
    if captions.len() != samples.len() {
        return Err(Error::Config("one caption per sample required".into()));
    }
    let cands: Vec<Vec<String>> = captions.iter().map(|c| c.words.clone()).collect();
    let refs: Vec<Vec<String>> = captions.iter().map(|c| c.reference.clone()).collect();
    let bleu = metrics.bleu.then(|| {
        let [bleu_1, bleu_2, bleu_3, bleu_4] = bleu_scores(&cands, &refs);
        BleuScores {
            bleu_1,
            bleu_2,
            bleu_3,
            bleu_4,
        }
    });
    let rouge_l = metrics.rouge.then(|| rouge_l_corpus(&cands, &refs));
    let (sync, start_fraction) = if metrics.sync {
        let mut inputs = Vec::with_capacity(samples.len());
        for (c, s) in captions.iter().zip(samples) {
            let segments = s.segments.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "sample {} has no segment annotations; sync metrics need annotated data",
                    s.id
                ))
            })?;
            inputs.push(SyncInput {
                id: &c.id,
                words: &c.words,
                map: &c.generation.attention,
                segments,
            });
        }
        let report = evaluate_sync(&inputs, keywords, tau)?;
        let start = captions.iter().map(Captioned::start_fraction).sum::<f64>() / captions.len().max(1) as f64;
        (Some(report), Some(start))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        samples: samples.len(),
        bleu,
        rouge_l,
        sync,
        start_fraction,
    })
}

/// Captions `samples` and scores them.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    samples: &[Sample],
    metrics: MetricSet,
    keywords: &BTreeMap<String, String>,
    tau: f64,
) -> Result<(EvalReport, Vec<Captioned>)> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let captions = caption_all(model, vocab, samples)?;
    let report = score(&captions, samples, metrics, keywords, tau)?;
    Ok((report, captions))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_list_parsing() {
        assert_eq!(
            MetricSet::parse("bleu, sync").unwrap(),
            MetricSet {
                bleu: true,
                rouge: false,
                sync: true
            }
        );
        assert!(MetricSet::parse("bleu,cider").is_err());
        assert!(MetricSet::parse("").is_err());
    }
}
