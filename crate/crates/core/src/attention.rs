//! Masked attention blocks.
//!
//! Encoder self-attention is restricted to a sliding window `[i−r, i+r]`
//! around each frame. Cross-attention has a single head whose support is a
//! window `[m_t−D, m_t+D]` around the expected attended frame `m_t`.
//!
//! `m_t` is defined from the attention it also constrains, so cross-attention
//! runs in two passes: a provisional softmax over all valid frames gives a
//! centre, the window is rounded outward from it, and the final weights are
//! renormalized inside that window. The integer bounds are constants for the
//! backward pass. With `D = ∞` both passes coincide.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tape::{masked_softmax_values, Tape, Var};
use crate::tensor::Tensor;

/// Window radius in frames; `Unbounded` disables masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Radius {
    Finite(usize),
    Unbounded,
}

impl Radius {
    pub fn is_finite(self) -> bool {
        matches!(self, Radius::Finite(_))
    }

    pub fn admits(self, distance: usize) -> bool {
        match self {
            Radius::Finite(r) => distance <= r,
            Radius::Unbounded => true,
        }
    }
}

impl fmt::Display for Radius {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Radius::Finite(r) => write!(f, "{r}"),
            Radius::Unbounded => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Radius {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "∞" | "infinity" => Ok(Radius::Unbounded),
            v => v
                .parse()
                .map(Radius::Finite)
                .map_err(|_| Error::Config(format!("invalid window radius {s:?}"))),
        }
    }
}

impl Serialize for Radius {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Radius::Finite(r) => s.serialize_u64(*r as u64),
            Radius::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Radius {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            N(u64),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::N(n) => Ok(Radius::Finite(n as usize)),
            Repr::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Self-attention support `Γ_i = [i−r, i+r]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelfWindow(Radius);

impl SelfWindow {
    pub fn new(radius: Radius) -> Result<Self> {
        if radius == Radius::Finite(0) {
            return Err(Error::Config("self-attention radius must be >= 1 or inf".into()));
        }
        Ok(Self(radius))
    }

    pub fn unbounded() -> Self {
        Self(Radius::Unbounded)
    }

    pub fn radius(self) -> Radius {
        self.0
    }
}

/// Cross-attention support `γ_t = [m_t−D, m_t+D]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossWindow(Radius);

impl CrossWindow {
    pub fn new(radius: Radius) -> Result<Self> {
        if radius == Radius::Finite(0) {
            return Err(Error::Config("cross-attention radius must be >= 1 or inf".into()));
        }
        Ok(Self(radius))
    }

    pub fn unbounded() -> Self {
        Self(Radius::Unbounded)
    }

    pub fn radius(self) -> Radius {
        self.0
    }
}

/// Width `L = 2(D + r)` of motion visible to one decoding step through both
/// masks; the span is `[m_t − D − r, m_t + D + r]`.
pub fn receptive_field(self_radius: Radius, cross_radius: Radius) -> Radius {
    match (self_radius, cross_radius) {
        (Radius::Finite(r), Radius::Finite(d)) => Radius::Finite(2 * (d + r)),
        _ => Radius::Unbounded,
    }
}

/// Boolean `T×T` mask for self-attention. Padded query rows may only see
/// themselves so that no softmax row is empty; their outputs are ignored.
pub fn self_attention_mask(len: usize, window: SelfWindow, key_mask: Option<&[bool]>, causal: bool) -> Vec<bool> {
    let valid = |j: usize| key_mask.is_none_or(|m| m[j]);
    let mut mask = vec![false; len * len];
    for i in 0..len {
        let row = &mut mask[i * len..(i + 1) * len];
        if !valid(i) {
            row[i] = true;
            continue;
        }
        for (j, m) in row.iter_mut().enumerate() {
            *m = valid(j) && window.radius().admits(i.abs_diff(j)) && (!causal || j <= i);
        }
    }
    mask
}

/// Learnable tensors of a multi-head self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
}

#[derive(Clone, Debug)]
pub struct SelfAttentionOutput {
    /// `T×d` merged context `Concat_h(z^h)·W_O`.
    pub output: Var,
    /// Per-head `T×T` attention weights.
    pub weights: Vec<Var>,
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

/// Multi-head self-attention restricted to `window` (and to `j ≤ i` when
/// `causal`). Scores are scaled by `1/√d` with `d` the model width.
pub fn windowed_self_attention(
    tape: &mut Tape,
    x: Var,
    window: SelfWindow,
    heads: usize,
    params: &SelfAttentionParams,
    key_mask: Option<&[bool]>,
    causal: bool,
) -> Result<SelfAttentionOutput> {
    let (len, d) = (tape.value(x).rows(), tape.value(x).cols());
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
    }
    if let Some(m) = key_mask {
        if m.len() != len {
            return Err(Error::Shape {
                op: "self_attention key mask",
                lhs: vec![len],
                rhs: vec![m.len()],
            });
        }
    }
    let mask = self_attention_mask(len, window, key_mask, causal);
    let dh = d / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let q = affine(tape, x, params.wq, params.bq)?;
    let k = affine(tape, x, params.wk, params.bk)?;
    let v = affine(tape, x, params.wv, params.bv)?;

    let mut contexts = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale);
        let a = tape.masked_softmax(s, &mask)?;
        contexts.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let merged = if heads == 1 { contexts[0] } else { tape.concat_cols(&contexts)? };
    let output = tape.matmul(merged, params.wo)?;
    Ok(SelfAttentionOutput { output, weights })
}

/// Result of the two-pass controlled cross-attention for `T_y` queries.
#[derive(Clone, Debug)]
pub struct ControlledAttention {
    /// `T_y×d` retrieved motion representations `r_t`.
    pub context: Var,
    /// `T_y×T_x` final weights `β`.
    pub beta: Var,
    /// `T_y×1` centres `m_t = Σ_i i·β_{i,t}` of the final weights.
    pub centers: Var,
    /// Pass-one centres that placed each window.
    pub provisional_centers: Vec<f64>,
    /// Realized inclusive window bounds per query.
    pub windows: Vec<[usize; 2]>,
}

/// Single-head cross-attention with a window centred on the expected frame.
///
/// `queries` is `T_y×d`, `keys` and `values` are `T_x×d`. Padded frames
/// (false in `frame_mask`) are excluded from both passes.
pub fn cross_attention_controlled(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    values: Var,
    window: CrossWindow,
    frame_mask: Option<&[bool]>,
) -> Result<ControlledAttention> {
    let (ty, d) = (tape.value(queries).rows(), tape.value(queries).cols());
    let tx = tape.value(keys).rows();
    if tape.value(keys).cols() != d {
        return Err(Error::Shape {
            op: "cross_attention keys",
            lhs: tape.value(queries).shape().to_vec(),
            rhs: tape.value(keys).shape().to_vec(),
        });
    }
    let valid: Vec<bool> = match frame_mask {
        Some(m) if m.len() != tx => {
            return Err(Error::Shape {
                op: "cross_attention frame mask",
                lhs: vec![tx],
                rhs: vec![m.len()],
            })
        }
        Some(m) => m.to_vec(),
        None => vec![true; tx],
    };
    let last_valid = valid
        .iter()
        .rposition(|&v| v)
        .ok_or(Error::FullyMasked { row: 0 })?;

    let kt = tape.transpose(keys)?;
    let scores = tape.matmul(queries, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());

    // pass 1: provisional weights over every valid frame
    let full_mask: Vec<bool> = (0..ty).flat_map(|_| valid.iter().copied()).collect();
    let provisional = masked_softmax_values(tape.value(scores).data(), &full_mask, tx)?;
    let provisional_centers: Vec<f64> = provisional
        .chunks(tx)
        .map(|row| row.iter().enumerate().map(|(i, b)| i as f64 * b).sum())
        .collect();

    // pass 2: renormalize inside the window, bounds rounded outward
    let mut windows = Vec::with_capacity(ty);
    let mut mask = vec![false; ty * tx];
    for (t, &m) in provisional_centers.iter().enumerate() {
        let (lo, hi) = match window.radius() {
            Radius::Finite(r) => (
                (m.floor() as usize).saturating_sub(r),
                (m.ceil() as usize + r).min(last_valid),
            ),
            Radius::Unbounded => (0, last_valid),
        };
        windows.push([lo, hi]);
        for i in lo..=hi {
            mask[t * tx + i] = valid[i];
        }
    }
    let beta = tape.masked_softmax(scores, &mask)?;
    let context = tape.matmul(beta, values)?;
    let idx = tape.constant(Tensor::new(vec![tx, 1], (0..tx).map(|i| i as f64).collect())?);
    let centers = tape.matmul(beta, idx)?;

    Ok(ControlledAttention {
        context,
        beta,
        centers,
        provisional_centers,
        windows,
    })
}

/// Cross-attention weights of a decoded caption, one row per emitted token.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub beta: Vec<Vec<f64>>,
    pub centers: Vec<f64>,
    pub windows: Vec<[usize; 2]>,
}

impl AttentionMap {
    /// Copies the first `rows` rows out of a recorded attention.
    pub fn from_controlled(tape: &Tape, att: &ControlledAttention, rows: usize) -> Self {
        let beta = tape.value(att.beta);
        let centers = tape.value(att.centers);
        Self {
            beta: (0..rows).map(|t| beta.row(t).to_vec()).collect(),
            centers: (0..rows).map(|t| centers.row(t)[0]).collect(),
            windows: att.windows[..rows].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.beta.first().map_or(0, Vec::len)
    }

    pub fn push_row(&mut self, beta: Vec<f64>, center: f64, window: [usize; 2]) {
        self.beta.push(beta);
        self.centers.push(center);
        self.windows.push(window);
    }

    /// Rows sum to one, are zero outside their windows, and centres match
    /// their rows, all within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let tx = self.frames();
        for (t, row) in self.beta.iter().enumerate() {
            let fail = |m: String| Err(Error::InvalidTensor(format!("attention row {t}: {m}")));
            if row.len() != tx {
                return fail(format!("has {} frames, expected {tx}", row.len()));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return fail(format!("sums to {sum}"));
            }
            let [lo, hi] = self.windows[t];
            if row.iter().enumerate().any(|(i, &b)| (i < lo || i > hi) && b != 0.0) {
                return fail(format!("mass outside window [{lo}, {hi}]"));
            }
            let m: f64 = row.iter().enumerate().map(|(i, b)| i as f64 * b).sum();
            if (m - self.centers[t]).abs() > tol || self.centers[t] < 0.0 || self.centers[t] > (tx - 1) as f64 {
                return fail(format!("centre {} inconsistent with weights ({m})", self.centers[t]));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, k: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-k..k)).collect()).unwrap()
    }

    fn params(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize) -> SelfAttentionParams {
        let k = 1.0 / (d as f64).sqrt();
        let mut p = || tape.param(random(rng, vec![d, d], k));
        let (wq, wk, wv, wo) = (p(), p(), p(), p());
        let mut b = || tape.param(random(rng, vec![d], k));
        SelfAttentionParams {
            wq,
            bq: b(),
            wk,
            bk: b(),
            wv,
            bv: b(),
            wo,
        }
    }

    #[test]
    fn radius_parse_and_serde() {
        assert_eq!("inf".parse::<Radius>().unwrap(), Radius::Unbounded);
        assert_eq!("10".parse::<Radius>().unwrap(), Radius::Finite(10));
        assert!("x".parse::<Radius>().is_err());
        let json = serde_json::to_string(&[Radius::Finite(3), Radius::Unbounded]).unwrap();
        assert_eq!(json, "[3,\"inf\"]");
        let back: Vec<Radius> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![Radius::Finite(3), Radius::Unbounded]);
    }

    #[test]
    fn zero_radius_windows_rejected() {
        assert!(SelfWindow::new(Radius::Finite(0)).is_err());
        assert!(CrossWindow::new(Radius::Finite(0)).is_err());
        assert!(SelfWindow::new(Radius::Finite(1)).is_ok());
    }

    #[test]
    fn receptive_field_width() {
        use Radius::*;
        assert_eq!(receptive_field(Finite(10), Finite(10)), Finite(40));
        assert_eq!(receptive_field(Finite(0), Finite(5)), Finite(10));
        assert_eq!(receptive_field(Finite(20), Finite(20)), Finite(80));
        assert_eq!(receptive_field(Unbounded, Finite(5)), Unbounded);
        assert_eq!(receptive_field(Finite(5), Unbounded), Unbounded);
    }

    #[test]
    fn single_token_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, vec![1, 4], 1.0));
        let p = params(&mut tape, &mut rng, 4);
        let out = windowed_self_attention(&mut tape, x, SelfWindow::unbounded(), 2, &p, None, false).unwrap();
        for a in &out.weights {
            assert_eq!(tape.value(*a).data(), &[1.0]);
        }
        // z = v·W_O
        let v = affine(&mut tape, x, p.wv, p.bv).unwrap();
        let z = tape.matmul(v, p.wo).unwrap();
        assert!(tape.value(z).max_abs_diff(tape.value(out.output)) < 1e-15);
    }

    #[test]
    fn radius_one_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, vec![5, 4], 1.0));
        let p = params(&mut tape, &mut rng, 4);
        let w = SelfWindow::new(Radius::Finite(1)).unwrap();
        let out = windowed_self_attention(&mut tape, x, w, 2, &p, None, false).unwrap();
        for a in &out.weights {
            let a = tape.value(*a);
            assert_eq!(a.row(0)[3], 0.0);
            for i in 0..5usize {
                for j in 0..5 {
                    if i.abs_diff(j) > 1 {
                        assert_eq!(a.row(i)[j], 0.0);
                    } else {
                        assert!(a.row(i)[j] > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn causal_and_padding_masks() {
        let m = self_attention_mask(4, SelfWindow::unbounded(), Some(&[true, true, true, false]), true);
        #[rustfmt::skip]
        let expected = [
            true, false, false, false,
            true, true, false, false,
            true, true, true, false,
            false, false, false, true,
        ];
        assert_eq!(m, expected);
    }

    #[test]
    fn perturbation_outside_window_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random(&mut rng, vec![40, 8], 1.0);
        let mut tape = Tape::new();
        let p = params(&mut tape, &mut rng, 8);
        let w = SelfWindow::new(Radius::Finite(5)).unwrap();
        let x0 = tape.constant(base.clone());
        let z0 = windowed_self_attention(&mut tape, x0, w, 2, &p, None, false).unwrap().output;
        let mut pert = base;
        for v in &mut pert.data_mut()[20 * 8..21 * 8] {
            *v += 3.0;
        }
        let x1 = tape.constant(pert);
        let z1 = windowed_self_attention(&mut tape, x1, w, 2, &p, None, false).unwrap().output;
        let (a, b) = (tape.value(z0), tape.value(z1));
        for i in 0..40usize {
            if i.abs_diff(20) > 5 {
                assert_eq!(a.row(i), b.row(i), "row {i}");
            } else {
                assert_ne!(a.row(i), b.row(i), "row {i}");
            }
        }
    }

    fn run_cross(keys: Vec<f64>, q: f64, window: CrossWindow) -> (Tape, ControlledAttention) {
        let tx = keys.len();
        let mut tape = Tape::new();
        let qv = tape.constant(Tensor::new(vec![1, 1], vec![q]).unwrap());
        let kv = tape.constant(Tensor::new(vec![tx, 1], keys).unwrap());
        let vv = tape.constant(Tensor::new(vec![tx, 1], (0..tx).map(|i| 10.0 * i as f64).collect()).unwrap());
        let att = cross_attention_controlled(&mut tape, qv, kv, vv, window, None).unwrap();
        (tape, att)
    }

    #[test]
    fn uniform_scores_unbounded() {
        let (tape, att) = run_cross(vec![0.5; 9], 1.0, CrossWindow::unbounded());
        for &b in tape.value(att.beta).data() {
            assert!((b - 1.0 / 9.0).abs() < 1e-15);
        }
        assert!((tape.value(att.centers).item() - 4.0).abs() < 1e-12);
        assert_eq!(att.windows, vec![[0, 8]]);
    }

    #[test]
    fn concentrated_attention() {
        let mut keys = vec![0.0; 12];
        keys[5] = 1.0;
        let (tape, att) = run_cross(keys, 2000.0, CrossWindow::new(Radius::Finite(2)).unwrap());
        assert_eq!(att.windows, vec![[3, 7]]);
        let beta = tape.value(att.beta).data();
        assert_eq!(beta[5], 1.0);
        assert_eq!(tape.value(att.centers).item(), 5.0);
        assert_eq!(tape.value(att.context).item(), 50.0);
    }

    #[test]
    fn two_point_centre() {
        let mut keys = vec![-1e4; 20];
        keys[2] = 0.0;
        keys[6] = 3f64.ln();
        let (tape, att) = run_cross(keys, 1.0, CrossWindow::new(Radius::Finite(10)).unwrap());
        assert!((att.provisional_centers[0] - 5.0).abs() < 1e-12);
        assert_eq!(att.windows, vec![[0, 15]]);
        let beta = tape.value(att.beta).data();
        assert!((beta[2] - 0.25).abs() < 1e-12 && (beta[6] - 0.75).abs() < 1e-12);
        assert!((tape.value(att.centers).item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn window_clipped_at_edges_and_padding() {
        let mut keys = vec![0.0; 10];
        keys[9] = 50.0;
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![10, 1], keys).unwrap());
        let mask = [true, true, true, true, true, true, true, true, false, false];
        let att = cross_attention_controlled(&mut tape, q, k, k, CrossWindow::new(Radius::Finite(3)).unwrap(), Some(&mask))
            .unwrap();
        let beta = tape.value(att.beta).data();
        assert_eq!(&beta[8..], &[0.0, 0.0]);
        assert!(att.windows[0][1] <= 7);
        let map = AttentionMap::from_controlled(&tape, &att, 1);
        map.validate(1e-9).unwrap();
    }

    #[test]
    fn attention_map_validation_rejects_bad_rows() {
        let mut m = AttentionMap::default();
        m.push_row(vec![0.5, 0.5, 0.0], 0.5, [0, 1]);
        m.validate(1e-9).unwrap();
        let mut bad = m.clone();
        bad.centers[0] = 1.0;
        assert!(bad.validate(1e-9).is_err());
        let mut bad = m.clone();
        bad.windows[0] = [0, 0];
        assert!(bad.validate(1e-9).is_err());
        let mut bad = m;
        bad.beta[0] = vec![0.2, 0.2, 0.0];
        assert!(bad.validate(1e-9).is_err());
    }
}
