//! Training objective: caption cross-entropy plus the two losses that shape
//! the alignment centers `m_t`.
//!
//! ```text
//! Loss   = Loss_lang + λ₀·Loss₀ + λ_m·Loss_m
//! Loss₀  = m₀ / T_x
//! Loss_m = (1/T_x) Σ_{t=0}^{T_y'−2} max(m_t + margin − m_{t+1}, 0)²
//! ```
//!
//! `m₀` is the center of the first decoding step (query = BOS), and the
//! monotonic sum runs over the non-pad word steps.

use serde::{Deserialize, Serialize};

use crate::dataset::PAD;
use crate::error::{Error, Result};
use crate::model::{Bound, Model, PaddedBatch};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_0: f64,
    pub lambda_m: f64,
    /// Minimum advance of the center between consecutive words, in frames.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_0: 0.1,
            lambda_m: 1000.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    /// Language loss only.
    pub fn language_only() -> Self {
        Self {
            lambda_0: 0.0,
            lambda_m: 0.0,
            margin: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_lang: f64,
    pub loss_0: f64,
    pub loss_m: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Component-wise mean; `total` is recombined from the means.
    pub fn mean(items: &[LossBreakdown], w: &LossWeights) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        total_loss(avg(|b| b.loss_lang), avg(|b| b.loss_0), avg(|b| b.loss_m), w)
    }
}

/// Mean negative log-likelihood of `targets` over rows where `mask` is true.
pub fn loss_lang(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (rows, v) = (logits.rows(), logits.cols());
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Shape {
            op: "loss_lang",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, (&y, &m)) in targets.iter().zip(mask).enumerate() {
        if y >= v {
            return Err(Error::TokenOutOfRange { id: y, size: v });
        }
        if !m {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        sum += lse - row[y];
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

pub fn loss_init(m0: f64, t_x: usize) -> f64 {
    m0 / t_x as f64
}

pub fn loss_monotonic(centers: &[f64], margin: f64, t_x: usize) -> f64 {
    centers
        .windows(2)
        .map(|w| (w[0] + margin - w[1]).max(0.0).powi(2))
        .sum::<f64>()
        / t_x as f64
}

pub fn total_loss(loss_lang: f64, loss_0: f64, loss_m: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        loss_lang,
        loss_0,
        loss_m,
        total: loss_lang + w.lambda_0 * loss_0 + w.lambda_m * loss_m,
    }
}

/// Differentiable [`loss_lang`].
pub fn loss_lang_var(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect();
    tape.cross_entropy(logits, targets, &weights)
}

/// Differentiable [`loss_init`] from a `T_y × 1` column of centers.
pub fn loss_init_var(tape: &mut Tape, centers: Var, t_x: usize) -> Result<Var> {
    let m0 = tape.slice_rows(centers, 0, 1)?;
    let s = tape.sum(m0);
    Ok(tape.scale(s, 1.0 / t_x as f64))
}

/// Differentiable [`loss_monotonic`] over the first `steps` rows of a
/// `T_y × 1` column of centers.
pub fn loss_monotonic_var(tape: &mut Tape, centers: Var, steps: usize, margin: f64, t_x: usize) -> Result<Var> {
    if steps < 2 {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(zero);
    }
    let head = tape.slice_rows(centers, 0, steps - 1)?;
    let tail = tape.slice_rows(centers, 1, steps - 1)?;
    let shifted = tape.add_scalar(head, margin);
    let gap = tape.sub(shifted, tail)?;
    let hinge = tape.relu(gap);
    let sq = tape.mul(hinge, hinge)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / t_x as f64))
}

/// Graph nodes of one sample's objective.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub total: Var,
    pub lang: Var,
    pub init: Var,
    pub monotonic: Var,
}

impl SampleLoss {
    fn combine(tape: &mut Tape, lang: Var, init: Var, monotonic: Var, w: &LossWeights) -> Result<Self> {
        let a = tape.scale(init, w.lambda_0);
        let b = tape.scale(monotonic, w.lambda_m);
        let total = tape.add(lang, a)?;
        let total = tape.add(total, b)?;
        Ok(Self {
            total,
            lang,
            init,
            monotonic,
        })
    }

    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            loss_lang: tape.value(self.lang).item(),
            loss_0: tape.value(self.init).item(),
            loss_m: tape.value(self.monotonic).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Teacher-forced objective of one unpadded sample: `tokens` is the full
/// caption `BOS w_1 … w_n EOS`.
pub fn sample_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    poses: &Tensor,
    tokens: &[usize],
    w: &LossWeights,
) -> Result<SampleLoss> {
    if tokens.len() < 2 {
        return Err(Error::Config("caption needs at least BOS and EOS".into()));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    let mask: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
    let steps = mask.iter().take_while(|&&m| m).count();
    let t_x = poses.rows();

    let enc = model.encode(tape, bound, poses, None)?;
    let out = model.decode(tape, bound, &enc, inputs, None)?;
    let lang = loss_lang_var(tape, out.logits, targets, &mask)?;
    let init = loss_init_var(tape, out.cross.centers, t_x)?;
    let monotonic = loss_monotonic_var(tape, out.cross.centers, steps, w.margin, t_x)?;
    SampleLoss::combine(tape, lang, init, monotonic, w)
}

/// Objective of sample `i` of a padded batch, honouring its frame and token
/// masks. Equals [`sample_loss`] on the unpadded sample.
pub fn padded_sample_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    batch: &PaddedBatch,
    i: usize,
    w: &LossWeights,
) -> Result<SampleLoss> {
    let tokens = &batch.tokens[i];
    let frame_mask = &batch.frame_mask[i];
    let t_x = frame_mask.iter().filter(|&&m| m).count();
    let inputs = &tokens[..tokens.len() - 1];
    let in_mask = &batch.token_mask[i][..tokens.len() - 1];
    let targets = &tokens[1..];
    let mask: Vec<bool> = batch.token_mask[i][1..].to_vec();
    let steps = mask.iter().filter(|&&m| m).count();

    let poses = batch.sample_poses(i);
    let enc = model.encode(tape, bound, &poses, Some(frame_mask))?;
    let out = model.decode(tape, bound, &enc, inputs, Some(in_mask))?;
    let lang = loss_lang_var(tape, out.logits, targets, &mask)?;
    let init = loss_init_var(tape, out.cross.centers, t_x)?;
    let monotonic = loss_monotonic_var(tape, out.cross.centers, steps, w.margin, t_x)?;
    SampleLoss::combine(tape, lang, init, monotonic, w)
}

/// Per-sample losses of a padded batch averaged over the batch.
pub fn batch_loss(model: &Model, batch: &PaddedBatch, w: &LossWeights) -> Result<LossBreakdown> {
    let items = (0..batch.len())
        .map(|i| {
            let mut tape = Tape::new();
            let bound = model.bind_frozen(&mut tape);
            Ok(padded_sample_loss(model, &mut tape, &bound, batch, i, w)?.breakdown(&tape))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&items, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    #[test]
    fn language_loss_cases() {
        let uniform = Tensor::zeros(vec![2, 4]);
        let l = loss_lang(&uniform, &[1, 3], &[true, true]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let sharp = Tensor::from_rows(&[[0.0, 800.0, 0.0], [0.0, 0.0, 800.0]]).unwrap();
        assert_eq!(loss_lang(&sharp, &[1, 2], &[true, true]).unwrap(), 0.0);

        let padded = Tensor::from_rows(&[[0.3, 0.1, -0.2], [1.0, 2.0, 0.0], [5.0, -3.0, 0.0]]).unwrap();
        let head = Tensor::from_rows(&[[0.3, 0.1, -0.2], [1.0, 2.0, 0.0]]).unwrap();
        assert_eq!(
            loss_lang(&padded, &[0, 2, 0], &[true, true, false]).unwrap(),
            loss_lang(&head, &[0, 2], &[true, true]).unwrap()
        );
        assert!(loss_lang(&uniform, &[1, 4], &[true, true]).is_err());
    }

    #[test]
    fn init_loss_cases() {
        assert_eq!(loss_init(0.0, 10), 0.0);
        assert_eq!(loss_init(25.0, 50), 0.5);
        assert_eq!(loss_init(99.0, 100), 0.99);
    }

    #[test]
    fn monotonic_loss_cases() {
        assert_eq!(loss_monotonic(&[2.0, 4.0, 7.0], 1.0, 10), 0.0);
        assert_eq!(loss_monotonic(&[3.0, 2.0], 1.0, 10), 0.4);
        assert!(loss_monotonic(&[5.0, 5.0, 5.0], 1.0, 10) > 0.0);
        assert_eq!(loss_monotonic(&[5.0], 1.0, 10), 0.0);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights {
            lambda_0: 0.1,
            lambda_m: 1000.0,
            margin: 1.0,
        };
        let b = total_loss(1.0, 0.5, 0.001, &w);
        assert!((b.total - 2.05).abs() < 1e-12);
        assert_eq!(total_loss(0.7, 0.3, 0.2, &LossWeights::language_only()).total, 0.7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).total, 0.0);
    }

    #[test]
    fn tape_losses_match_values() {
        let centers = Tensor::new(vec![4, 1], vec![3.0, 2.5, 6.0, 6.2]).unwrap();
        let mut tape = Tape::new();
        let c = tape.param(centers.clone());
        let lm = loss_monotonic_var(&mut tape, c, 4, 1.0, 12).unwrap();
        let l0 = loss_init_var(&mut tape, c, 12).unwrap();
        assert!((tape.value(lm).item() - loss_monotonic(centers.data(), 1.0, 12)).abs() < 1e-15);
        assert_eq!(tape.value(l0).item(), loss_init(3.0, 12));
        let lm3 = loss_monotonic_var(&mut tape, c, 3, 1.0, 12).unwrap();
        assert_eq!(tape.value(lm3).item(), loss_monotonic(&centers.data()[..3], 1.0, 12));

        let logits = Tensor::from_rows(&[[0.3, 0.1, -0.2], [1.0, 2.0, 0.0], [5.0, -3.0, 0.0]]).unwrap();
        let lv = tape.param(logits.clone());
        let mask = [true, true, false];
        let ll = loss_lang_var(&mut tape, lv, &[0, 2, 1], &mask).unwrap();
        assert!((tape.value(ll).item() - loss_lang(&logits, &[0, 2, 1], &mask).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn monotonic_gradient() {
        let centers = Tensor::new(vec![4, 1], vec![3.0, 2.5, 6.0, 6.2]).unwrap();
        let err = grad_check(|t, c| loss_monotonic_var(t, c, 4, 1.0, 12), &centers, 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
