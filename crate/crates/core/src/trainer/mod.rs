//! Seeded mini-batch training with Adam, global-norm clipping, held-out BLEU
//! model selection and resumable checkpoints.
//!
//! Each batch's per-sample gradients are computed independently (in
//! parallel unless `threads = 1`) and summed in sample order, so results do
//! not depend on the thread count.

mod adam;

pub use adam::{clip_global_norm, global_norm, Adam};
pub use crate::model::{pad_batch, PaddedBatch};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{encode_all, EncodedSample, Sample, Vocab};
use crate::error::{Error, Result};
use crate::eval::{caption_all, score, MetricSet};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::objectives::{sample_loss, LossBreakdown, LossWeights};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Total epochs, counting any already completed before a resume.
    pub epochs: usize,
    pub seed: u64,
    pub lambda_0: f64,
    pub lambda_m: f64,
    pub margin: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Held-out BLEU is computed every `eval_every` epochs and after the last.
    pub eval_every: usize,
    /// Worker threads; 0 uses every core, 1 runs single-threaded.
    pub threads: usize,
    /// Fraction of the data held out when no validation file is given.
    pub valid_fraction: f64,
    /// Default destination of the final checkpoint.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            lambda_0: w.lambda_0,
            lambda_m: w.lambda_m,
            margin: w.margin,
            clip_norm: 5.0,
            eval_every: 1,
            threads: 0,
            valid_fraction: 0.1,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_0: self.lambda_0,
            lambda_m: self.lambda_m,
            margin: self.margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        if self.eps <= 0.0 {
            return fail("eps must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1");
        }
        if self.lambda_0 < 0.0 || self.lambda_m < 0.0 || self.margin < 0.0 {
            return fail("loss weights and margin must be non-negative");
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return fail("valid_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads a [`ModelConfig`] from TOML, or JSON when the extension is `.json`.
pub fn model_config_from_path(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(&text)?)
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Keeps the first samples for training and the trailing
/// `round(n · fraction)` for validation, leaving at least one for training.
pub fn split_holdout(samples: &[Sample], fraction: f64) -> (&[Sample], &[Sample]) {
    let n = samples.len();
    let k = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    samples.split_at(n - k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean training losses over the epoch's samples.
    pub train: LossBreakdown,
    pub valid_bleu4: Option<f64>,
    /// Mean pre-clipping global gradient norm.
    pub grad_norm: f64,
    pub seconds: f64,
    /// Digest of the epoch's shuffle order and generator position.
    pub rng_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Checkpoint with the highest held-out BLEU@4 (earliest on ties); the
    /// final one when nothing was held out.
    pub best_checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// `run.ckpt` → `run.best.ckpt`.
pub fn best_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    path.with_file_name(name)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> (Vec<usize>, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut h = Sha256::new();
    for &i in &order {
        h.update((i as u64).to_le_bytes());
    }
    h.update(rng.get_word_pos().to_le_bytes());
    let digest = h.finalize();
    (order, digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

fn sample_gradient(model: &Model, s: &EncodedSample, w: &LossWeights) -> Result<(Vec<Tensor>, LossBreakdown)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = sample_loss(model, &mut tape, &bound, &s.poses, &s.caption.tokens, w)?;
    let mut grads = tape.backward(loss.total)?;
    Ok((bound.collect_grads(&tape, &mut grads), loss.breakdown(&tape)))
}

/// Mean loss and gradient of a batch; gradients are summed in batch order.
pub fn batch_gradient(
    model: &Model,
    samples: &[&EncodedSample],
    w: &LossWeights,
) -> Result<(Vec<Tensor>, Vec<LossBreakdown>)> {
    let per: Vec<(Vec<Tensor>, LossBreakdown)> =
        samples.par_iter().map(|s| sample_gradient(model, s, w)).collect::<Result<_>>()?;
    let mut sum: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let mut losses = Vec::with_capacity(per.len());
    let scale = 1.0 / samples.len() as f64;
    for (grads, loss) in per {
        for (acc, g) in sum.iter_mut().zip(&grads) {
            for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += x;
            }
        }
        losses.push(loss);
    }
    for g in &mut sum {
        for x in g.data_mut() {
            *x *= scale;
        }
    }
    Ok((sum, losses))
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    train: Vec<EncodedSample>,
    valid: &'a [Sample],
    vocab: Vocab,
    model: Model,
    adam: Adam,
    first_epoch: usize,
    best: Option<(f64, Checkpoint)>,
}

impl Run<'_> {
    fn checkpoint(&self, epoch: usize, bleu: Option<f64>) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone(), self.vocab.clone());
        ck.epoch = epoch;
        ck.optimizer = Some(self.adam.state.clone());
        let best = self.best.as_ref().map(|(b, c)| (*b, c.epoch));
        ck.meta = serde_json::json!({
            "train_config": self.cfg,
            "valid_bleu4": bleu,
            "best_valid_bleu4": best.map(|b| b.0),
            "best_epoch": best.map(|b| b.1),
        });
        ck
    }

    fn valid_bleu(&self) -> Result<f64> {
        let caps = caption_all(&self.model, &self.vocab, self.valid)?;
        let metrics = MetricSet {
            bleu: true,
            rouge: false,
            sync: false,
        };
        let report = score(&caps, self.valid, metrics, &Default::default(), 1.0)?;
        Ok(report.bleu.map_or(0.0, |b| b.bleu_4))
    }

    fn run(mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
        let w = self.cfg.loss_weights();
        let mut log = TrainLog::default();
        let mut last_bleu = None;
        for epoch in self.first_epoch + 1..=self.cfg.epochs {
            let start = Instant::now();
            let (order, rng_digest) = epoch_order(self.train.len(), self.cfg.seed, epoch);
            let mut losses = Vec::with_capacity(order.len());
            let mut norm_sum = 0.0;
            let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
            for (b, idx) in batches.iter().enumerate() {
                let samples: Vec<&EncodedSample> = idx.iter().map(|&i| &self.train[i]).collect();
                let (mut grads, batch_losses) = batch_gradient(&self.model, &samples, &w)?;
                let mean = LossBreakdown::mean(&batch_losses, &w);
                if !mean.total.is_finite() || grads.iter().any(|g| g.data().iter().any(|x| !x.is_finite())) {
                    return Err(Error::Diverged { epoch, batch: b });
                }
                norm_sum += clip_global_norm(&mut grads, self.cfg.clip_norm);
                self.adam.step(self.model.params_mut().tensors_mut(), &grads);
                losses.extend(batch_losses);
            }
            let evaluate = !self.valid.is_empty() && (epoch % self.cfg.eval_every == 0 || epoch == self.cfg.epochs);
            let bleu = if evaluate { Some(self.valid_bleu()?) } else { None };
            if let Some(b) = bleu {
                last_bleu = Some(b);
                if self.best.as_ref().is_none_or(|(best, _)| b > *best) {
                    let ck = self.checkpoint(epoch, Some(b));
                    self.best = Some((b, ck));
                }
            }
            let entry = EpochLog {
                epoch,
                train: LossBreakdown::mean(&losses, &w),
                valid_bleu4: bleu,
                grad_norm: norm_sum / batches.len().max(1) as f64,
                seconds: start.elapsed().as_secs_f64(),
                rng_digest,
            };
            log::info!("epoch {epoch} finished in {:.1}s", entry.seconds);
            on_epoch(&entry);
            log.epochs.push(entry);
        }
        let epoch = self.cfg.epochs.max(self.first_epoch);
        let final_checkpoint = self.checkpoint(epoch, last_bleu);
        let best_checkpoint = match self.best.take() {
            Some((_, mut ck)) => {
                // Refresh the selection metadata now that training is over.
                let meta = &final_checkpoint.meta;
                ck.meta["best_valid_bleu4"] = meta["best_valid_bleu4"].clone();
                ck.meta["best_epoch"] = meta["best_epoch"].clone();
                ck
            }
            None => final_checkpoint.clone(),
        };
        Ok(TrainOutcome {
            final_checkpoint,
            best_checkpoint,
            log,
        })
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn check_data(train: &[Sample]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    Ok(())
}

/// Trains a fresh model. The vocabulary is built from the training
/// captions and fills `model_cfg.vocab_size` when that is 0.
pub fn train(
    train: &[Sample],
    valid: &[Sample],
    mut model_cfg: ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog) + Send,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(train)?;
    let captions: Vec<&str> = train.iter().map(|s| s.caption.as_str()).collect();
    let vocab = Vocab::build(&captions)?;
    if model_cfg.vocab_size == 0 {
        model_cfg.vocab_size = vocab.len();
    } else if model_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "vocab_size {} does not match the {} entries built from the data",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let model = Model::new(model_cfg, cfg.seed)?;
    let adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, model.params().tensors());
    let run = Run {
        cfg,
        train: encode_all(train, &vocab),
        valid,
        vocab,
        model,
        adam,
        first_epoch: 0,
        best: None,
    };
    with_pool(cfg.threads, || run.run(on_epoch))
}

/// Continues from `state` up to `cfg.epochs`, restoring the optimizer
/// moments. `best` is the previously selected checkpoint, if any.
pub fn resume(
    state: Checkpoint,
    best: Option<Checkpoint>,
    train: &[Sample],
    valid: &[Sample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog) + Send,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(train)?;
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, state.model.params().tensors());
    if let Some(opt) = state.optimizer {
        adam.state = opt;
    }
    let best = best.and_then(|ck| ck.meta["valid_bleu4"].as_f64().map(|b| (b, ck)));
    let run = Run {
        cfg,
        train: encode_all(train, &state.vocab),
        valid,
        vocab: state.vocab,
        model: state.model,
        adam,
        first_epoch: state.epoch,
        best,
    };
    with_pool(cfg.threads, || run.run(on_epoch))
}
