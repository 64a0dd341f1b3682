//! Encoder/decoder with windowed self-attention and controlled
//! cross-attention.
//!
//! Encoder layer: `x̃ = LN(FFN(z̃) + z̃)`, `z̃ = LN(SA_r(x) + x)`, where
//! `SA_r` is multi-head self-attention limited to `[i−r, i+r]`.
//!
//! Decoder: token embedding plus positional encoding, causal multi-head
//! self-attention with residual and LN giving the query `u_t`, single-head
//! controlled cross-attention giving `r_t`, then the same LN+FFN form fusing
//! `(r_t, u_t)` into `g_t`, projected to vocabulary logits.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{Checkpoint, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use params::{Bound, Params};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cross_attention_controlled, windowed_self_attention, AttentionMap, ControlledAttention, SelfAttentionParams,
    SelfWindow,
};
use crate::dataset::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Standard sinusoidal table: `sin` on even columns, `cos` on odd ones, at
/// geometric frequencies with base 10000.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            data[pos * d + i] = angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![len, d], data).expect("table shape")
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `T_x × d` compact local representations `x̃`.
    pub memory: Var,
    pub frame_mask: Vec<bool>,
    /// Per layer, per head self-attention weights.
    pub self_attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `T_y × V` logits, row `t` predicting the token after input `t`.
    pub logits: Var,
    pub cross: ControlledAttention,
}

/// Incremental greedy-decoding state.
#[derive(Clone, Debug)]
pub struct DecodeState {
    /// Input tokens so far, starting with BOS.
    pub tokens: Vec<usize>,
    /// One cross-attention row per emitted token.
    pub attention: AttentionMap,
}

impl DecodeState {
    pub fn new() -> Self {
        Self {
            tokens: vec![BOS],
            attention: AttentionMap::default(),
        }
    }

    /// Number of tokens emitted so far.
    pub fn step(&self) -> usize {
        self.attention.len()
    }
}

impl Default for DecodeState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub beta: Vec<f64>,
    pub center: f64,
    pub context: Vec<f64>,
    pub window: [usize; 2],
}

/// Greedy decoding result.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Emitted token ids, including the final EOS when one was produced.
    pub emitted: Vec<usize>,
    pub attention: AttentionMap,
}

impl Generation {
    /// Emitted word ids without the terminal EOS.
    pub fn words(&self) -> &[usize] {
        match self.emitted.last() {
            Some(&EOS) => &self.emitted[..self.emitted.len() - 1],
            _ => &self.emitted,
        }
    }
}

/// Padded teacher-forced batch.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    /// `B × T_max × c`, zero-padded.
    pub poses: Tensor,
    /// `B` rows of `T_max` flags; false on padded frames.
    pub frame_mask: Vec<Vec<bool>>,
    /// `B` rows of `L_max` caption tokens (BOS … EOS, then PAD).
    pub tokens: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<bool>>,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sample_poses(&self, b: usize) -> Tensor {
        let (t, c) = (self.poses.shape()[1], self.poses.shape()[2]);
        Tensor::new(vec![t, c], self.poses.data()[b * t * c..(b + 1) * t * c].to_vec()).expect("slice shape")
    }
}

/// Teacher-forced outputs of one sample.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// `(L_max − 1) × V` logits; rows with `target_mask == false` are padding.
    pub logits: Tensor,
    pub target_mask: Vec<bool>,
    /// Attention rows of the non-pad steps.
    pub attention: AttentionMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    frame_pe: Tensor,
    token_pe: Tensor,
}

struct Init {
    rng: ChaCha8Rng,
    params: Params,
    d: usize,
}

impl Init {
    fn uniform(&mut self, name: String, shape: Vec<usize>, k: f64) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-k..=k)).collect();
        self.params.insert(name, Tensor::new(shape, data)?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<()> {
        let k = 1.0 / (fan_in as f64).sqrt();
        self.uniform(format!("{name}.w"), vec![fan_in, fan_out], k)?;
        if bias {
            self.uniform(format!("{name}.b"), vec![fan_out], k)?;
        }
        Ok(())
    }

    fn attention(&mut self, pre: &str) -> Result<()> {
        for proj in ["q", "k", "v"] {
            self.linear(&format!("{pre}.{proj}"), self.d, self.d, true)?;
        }
        Ok(())
    }

    fn layer_norm(&mut self, name: &str) -> Result<()> {
        self.params.insert(format!("{name}.scale"), Tensor::filled(vec![self.d], 1.0))?;
        self.params.insert(format!("{name}.shift"), Tensor::zeros(vec![self.d]))
    }

    fn ffn(&mut self, pre: &str, ff: usize) -> Result<()> {
        self.linear(&format!("{pre}.ffn1"), self.d, ff, true)?;
        self.linear(&format!("{pre}.ffn2"), ff, self.d, true)
    }
}

impl Model {
    /// Fresh model with weights drawn from `U(−1/√fan_in, 1/√fan_in)`,
    /// token embeddings from `U(−1, 1)`, unit LN scale and zero LN shift.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, ff) = (config.d_model, config.ff_width());
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Params::new(),
            d,
        };
        init.linear("pose", config.pose_dim, d, true)?;
        for l in 0..config.layers {
            init.attention(&format!("enc{l}.attn"))?;
            init.linear(&format!("enc{l}.attn.o"), d, d, false)?;
            init.layer_norm(&format!("enc{l}.ln1"))?;
            init.ffn(&format!("enc{l}"), ff)?;
            init.layer_norm(&format!("enc{l}.ln2"))?;
        }
        init.uniform("tok.emb".into(), vec![config.vocab_size, d], 1.0)?;
        for l in 0..config.layers {
            init.attention(&format!("dec{l}.attn"))?;
            init.linear(&format!("dec{l}.attn.o"), d, d, false)?;
            init.layer_norm(&format!("dec{l}.ln"))?;
        }
        init.attention("cross")?;
        init.layer_norm("fuse.ln1")?;
        init.ffn("fuse", ff)?;
        init.layer_norm("fuse.ln2")?;
        init.linear("out", d, config.vocab_size, true)?;
        Self::from_params(config, init.params)
    }

    /// Wraps existing parameters, checking every expected tensor is present
    /// with the shape the configuration implies.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        let frame_pe = positional_encoding(config.max_frames, config.d_model);
        let token_pe = positional_encoding(config.max_caption_len, config.d_model);
        Ok(Self {
            config,
            params,
            frame_pe,
            token_pe,
        })
    }

    fn expected_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, ff, v) = (c.d_model, c.ff_width(), c.vocab_size);
        let mut s: Vec<(String, Vec<usize>)> = vec![("pose.w".into(), vec![c.pose_dim, d]), ("pose.b".into(), vec![d])];
        let attn = |s: &mut Vec<(String, Vec<usize>)>, pre: &str| {
            for proj in ["q", "k", "v"] {
                s.push((format!("{pre}.{proj}.w"), vec![d, d]));
                s.push((format!("{pre}.{proj}.b"), vec![d]));
            }
        };
        let ln = |s: &mut Vec<(String, Vec<usize>)>, pre: &str| {
            s.push((format!("{pre}.scale"), vec![d]));
            s.push((format!("{pre}.shift"), vec![d]));
        };
        let ffn = |s: &mut Vec<(String, Vec<usize>)>, pre: &str| {
            s.push((format!("{pre}.ffn1.w"), vec![d, ff]));
            s.push((format!("{pre}.ffn1.b"), vec![ff]));
            s.push((format!("{pre}.ffn2.w"), vec![ff, d]));
            s.push((format!("{pre}.ffn2.b"), vec![d]));
        };
        for l in 0..c.layers {
            attn(&mut s, &format!("enc{l}.attn"));
            s.push((format!("enc{l}.attn.o.w"), vec![d, d]));
            ln(&mut s, &format!("enc{l}.ln1"));
            ffn(&mut s, &format!("enc{l}"));
            ln(&mut s, &format!("enc{l}.ln2"));
        }
        s.push(("tok.emb".into(), vec![v, d]));
        for l in 0..c.layers {
            attn(&mut s, &format!("dec{l}.attn"));
            s.push((format!("dec{l}.attn.o.w"), vec![d, d]));
            ln(&mut s, &format!("dec{l}.ln"));
        }
        attn(&mut s, "cross");
        ln(&mut s, "fuse.ln1");
        ffn(&mut s, "fuse");
        ln(&mut s, "fuse.ln2");
        s.push(("out.w".into(), vec![d, v]));
        s.push(("out.b".into(), vec![v]));
        s
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape, true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape, false)
    }

    fn affine(&self, tape: &mut Tape, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let h = tape.matmul(x, b.get(&format!("{name}.w")))?;
        tape.add_row(h, b.get(&format!("{name}.b")))
    }

    fn layer_norm(&self, tape: &mut Tape, b: &Bound, x: Var, name: &str) -> Result<Var> {
        tape.layer_norm(x, b.get(&format!("{name}.scale")), b.get(&format!("{name}.shift")), LN_EPS)
    }

    /// `LN_2(FFN(z̃) + z̃)` with `z̃ = LN_1(a + x)`.
    fn ln_ffn(&self, tape: &mut Tape, b: &Bound, a: Var, x: Var, pre: &str, ln1: &str, ln2: &str) -> Result<Var> {
        let s = tape.add(a, x)?;
        let zt = self.layer_norm(tape, b, s, ln1)?;
        let h = self.affine(tape, b, zt, &format!("{pre}.ffn1"))?;
        let h = tape.relu(h);
        let f = self.affine(tape, b, h, &format!("{pre}.ffn2"))?;
        let s = tape.add(f, zt)?;
        self.layer_norm(tape, b, s, ln2)
    }

    fn attn_params(&self, b: &Bound, pre: &str) -> SelfAttentionParams {
        SelfAttentionParams {
            wq: b.get(&format!("{pre}.q.w")),
            bq: b.get(&format!("{pre}.q.b")),
            wk: b.get(&format!("{pre}.k.w")),
            bk: b.get(&format!("{pre}.k.b")),
            wv: b.get(&format!("{pre}.v.w")),
            bv: b.get(&format!("{pre}.v.b")),
            wo: b.get(&format!("{pre}.o.w")),
        }
    }

    /// `x_i = p_i W_e + b_e + PE_i`.
    pub fn embed_poses(&self, tape: &mut Tape, b: &Bound, poses: &Tensor) -> Result<Var> {
        let (t, c) = (poses.rows(), poses.cols());
        if c != self.config.pose_dim {
            return Err(Error::Shape {
                op: "embed_poses",
                lhs: poses.shape().to_vec(),
                rhs: vec![self.config.pose_dim],
            });
        }
        if t > self.config.max_frames {
            return Err(Error::Config(format!(
                "motion of {t} frames exceeds positional-encoding capacity {}",
                self.config.max_frames
            )));
        }
        let p = tape.constant(poses.clone());
        let x = self.affine(tape, b, p, "pose")?;
        let pe = tape.constant(self.pe_rows(&self.frame_pe, t));
        tape.add(x, pe)
    }

    fn pe_rows(&self, table: &Tensor, n: usize) -> Tensor {
        let d = table.cols();
        Tensor::new(vec![n, d], table.data()[..n * d].to_vec()).expect("pe slice")
    }

    pub fn encode(&self, tape: &mut Tape, b: &Bound, poses: &Tensor, frame_mask: Option<&[bool]>) -> Result<EncoderOutput> {
        let window = self.config.self_window()?;
        let mut x = self.embed_poses(tape, b, poses)?;
        let mut self_attention = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let p = self.attn_params(b, &format!("enc{l}.attn"));
            let sa = windowed_self_attention(tape, x, window, self.config.heads, &p, frame_mask, false)?;
            x = self.ln_ffn(tape, b, sa.output, x, &format!("enc{l}"), &format!("enc{l}.ln1"), &format!("enc{l}.ln2"))?;
            self_attention.push(sa.weights);
        }
        Ok(EncoderOutput {
            memory: x,
            frame_mask: frame_mask.map_or_else(|| vec![true; poses.rows()], <[bool]>::to_vec),
            self_attention,
        })
    }

    /// All decoding steps for the input prefix `tokens` at once (causal).
    pub fn decode(
        &self,
        tape: &mut Tape,
        b: &Bound,
        enc: &EncoderOutput,
        tokens: &[usize],
        token_mask: Option<&[bool]>,
    ) -> Result<DecoderOutput> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Config("decoder input must start with BOS".into()));
        }
        if n > self.config.max_caption_len {
            return Err(Error::Config(format!(
                "decoder input of {n} tokens exceeds max_caption_len {}",
                self.config.max_caption_len
            )));
        }
        let e = tape.gather_rows(b.get("tok.emb"), tokens)?;
        let pe = tape.constant(self.pe_rows(&self.token_pe, n));
        let mut u = tape.add(e, pe)?;
        for l in 0..self.config.layers {
            let p = self.attn_params(b, &format!("dec{l}.attn"));
            let sa = windowed_self_attention(tape, u, SelfWindow::unbounded(), self.config.heads, &p, token_mask, true)?;
            let s = tape.add(sa.output, u)?;
            u = self.layer_norm(tape, b, s, &format!("dec{l}.ln"))?;
        }

        let q = self.affine(tape, b, u, "cross.q")?;
        let k = self.affine(tape, b, enc.memory, "cross.k")?;
        let v = self.affine(tape, b, enc.memory, "cross.v")?;
        let cross = cross_attention_controlled(tape, q, k, v, self.config.cross_window()?, Some(&enc.frame_mask))?;
        let g = self.ln_ffn(tape, b, cross.context, u, "fuse", "fuse.ln1", "fuse.ln2")?;
        let logits = self.affine(tape, b, g, "out")?;
        Ok(DecoderOutput { logits, cross })
    }

    /// Runs the decoder on the current prefix and returns the newest step.
    pub fn decode_step(&self, tape: &mut Tape, b: &Bound, enc: &EncoderOutput, state: &DecodeState) -> Result<StepOutput> {
        let out = self.decode(tape, b, enc, &state.tokens, None)?;
        let t = state.tokens.len() - 1;
        Ok(StepOutput {
            logits: tape.value(out.logits).row(t).to_vec(),
            beta: tape.value(out.cross.beta).row(t).to_vec(),
            center: tape.value(out.cross.centers).row(t)[0],
            context: tape.value(out.cross.context).row(t).to_vec(),
            window: out.cross.windows[t],
        })
    }

    /// Greedy decoding from BOS until EOS or `max_caption_len` emitted tokens.
    pub fn generate(&self, poses: &Tensor) -> Result<Generation> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let enc = self.encode(&mut tape, &b, poses, None)?;
        let mut state = DecodeState::new();
        let mut emitted = Vec::new();
        while state.step() < self.config.max_caption_len {
            let step = self.decode_step(&mut tape, &b, &enc, &state)?;
            let next = argmax(&step.logits);
            state.attention.push_row(step.beta, step.center, step.window);
            emitted.push(next);
            if next == EOS {
                break;
            }
            state.tokens.push(next);
        }
        Ok(Generation {
            emitted,
            attention: state.attention,
        })
    }

    /// Teacher-forced forward of a padded batch, one sample at a time with
    /// its frame and token masks.
    pub fn forward_teacher_forced(&self, batch: &PaddedBatch) -> Result<Vec<TeacherForced>> {
        (0..batch.len())
            .map(|i| {
                let mut tape = Tape::new();
                let b = self.bind_frozen(&mut tape);
                let poses = batch.sample_poses(i);
                let enc = self.encode(&mut tape, &b, &poses, Some(&batch.frame_mask[i]))?;
                let toks = &batch.tokens[i];
                let inputs = &toks[..toks.len() - 1];
                let in_mask = &batch.token_mask[i][..toks.len() - 1];
                let out = self.decode(&mut tape, &b, &enc, inputs, Some(in_mask))?;
                let target_mask: Vec<bool> = toks[1..].iter().map(|&t| t != PAD).collect();
                let valid = target_mask.iter().filter(|&&m| m).count();
                Ok(TeacherForced {
                    logits: tape.value(out.logits).clone(),
                    attention: AttentionMap::from_controlled(&tape, &out.cross, valid),
                    target_mask,
                })
            })
            .collect()
    }
}

/// Index of the largest value, ties toward the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pads samples to the batch maximum: poses with zeros, captions with PAD.
pub fn pad_batch(samples: &[(&Tensor, &[usize])]) -> Result<PaddedBatch> {
    if samples.is_empty() {
        return Err(Error::Config("cannot pad an empty batch".into()));
    }
    let c = samples[0].0.cols();
    let tmax = samples.iter().map(|s| s.0.rows()).max().unwrap_or(0);
    let lmax = samples.iter().map(|s| s.1.len()).max().unwrap_or(0);
    let mut poses = vec![0.0; samples.len() * tmax * c];
    let mut frame_mask = Vec::with_capacity(samples.len());
    let mut tokens = Vec::with_capacity(samples.len());
    let mut token_mask = Vec::with_capacity(samples.len());
    for (b, (p, toks)) in samples.iter().enumerate() {
        if p.cols() != c {
            return Err(Error::Shape {
                op: "pad_batch",
                lhs: samples[0].0.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        let t = p.rows();
        poses[b * tmax * c..b * tmax * c + t * c].copy_from_slice(p.data());
        frame_mask.push((0..tmax).map(|i| i < t).collect());
        let mut row = toks.to_vec();
        row.resize(lmax, PAD);
        tokens.push(row);
        token_mask.push((0..lmax).map(|i| i < toks.len()).collect());
    }
    Ok(PaddedBatch {
        poses: Tensor::new(vec![samples.len(), tmax, c], poses)?,
        frame_mask,
        tokens,
        token_mask,
    })
}

#[cfg(test)]
mod tests;
