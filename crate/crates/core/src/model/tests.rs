use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::Radius;

fn cfg(d: usize, heads: usize, r: Radius, big_d: Radius, layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        heads,
        self_radius: r,
        cross_radius: big_d,
        layers,
        vocab_size: 9,
        pose_dim: 3,
        max_frames: 64,
        max_caption_len: 6,
        ..Default::default()
    }
}

fn small() -> Model {
    Model::new(cfg(8, 2, Radius::Finite(3), Radius::Finite(3), 1), 5).unwrap()
}

fn random_poses(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Tensor {
    Tensor::new(vec![t, c], (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn encode_value(model: &Model, poses: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let b = model.bind_frozen(&mut tape);
    let enc = model.encode(&mut tape, &b, poses, None).unwrap();
    tape.value(enc.memory).clone()
}

fn logits_for(model: &Model, poses: &Tensor, tokens: &[usize]) -> Tensor {
    let mut tape = Tape::new();
    let b = model.bind_frozen(&mut tape);
    let enc = model.encode(&mut tape, &b, poses, None).unwrap();
    let out = model.decode(&mut tape, &b, &enc, tokens, None).unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn positional_encoding_closed_form() {
    let pe = positional_encoding(4, 6);
    for (i, &x) in pe.row(0).iter().enumerate() {
        assert_eq!(x, if i % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert_eq!(pe.row(2)[0], 2f64.sin());
    assert_eq!(pe.row(3)[3], (3.0 / 10000f64.powf(2.0 / 6.0)).cos());
}

#[test]
fn zero_poses_embed_to_positional_rows() {
    let mut model = small();
    let pos = model.params().position("pose.b").unwrap();
    model.params_mut().tensors_mut()[pos] = Tensor::zeros(vec![8]);
    let mut tape = Tape::new();
    let b = model.bind_frozen(&mut tape);
    let x = model.embed_poses(&mut tape, &b, &Tensor::zeros(vec![5, 3])).unwrap();
    assert_eq!(tape.value(x).data(), positional_encoding(5, 8).data());
}

#[test]
fn identical_frames_embed_differently() {
    let model = small();
    let mut tape = Tape::new();
    let b = model.bind_frozen(&mut tape);
    let x = model.embed_poses(&mut tape, &b, &Tensor::filled(vec![2, 3], 0.3)).unwrap();
    assert_ne!(tape.value(x).row(0), tape.value(x).row(1));
}

#[test]
fn too_many_frames_rejected() {
    let model = small();
    let mut tape = Tape::new();
    let b = model.bind_frozen(&mut tape);
    assert!(model.embed_poses(&mut tape, &b, &Tensor::zeros(vec![65, 3])).is_err());
    assert!(model.embed_poses(&mut tape, &b, &Tensor::zeros(vec![4, 2])).is_err());
}

#[test]
fn single_frame_encodes() {
    let model = small();
    let out = encode_value(&model, &Tensor::filled(vec![1, 3], 0.5));
    assert_eq!(out.shape(), &[1, 8]);
    out.validate().unwrap();
}

#[test]
fn one_layer_encoder_is_local() {
    let model = Model::new(cfg(8, 2, Radius::Finite(5), Radius::Finite(3), 1), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let poses = random_poses(&mut rng, 40, 3);
    let mut perturbed = poses.clone();
    for x in &mut perturbed.data_mut()[20 * 3..21 * 3] {
        *x += 1.5;
    }
    let (a, b) = (encode_value(&model, &poses), encode_value(&model, &perturbed));
    for i in 0..40usize {
        if i.abs_diff(20) > 5 {
            assert_eq!(a.row(i), b.row(i), "row {i}");
        }
    }
    assert_ne!(a.row(20), b.row(20));
}

#[test]
fn stacked_encoder_widens_receptive_field() {
    let model = Model::new(cfg(8, 2, Radius::Finite(10), Radius::Finite(3), 3), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let poses = random_poses(&mut rng, 60, 3);
    let mut perturbed = poses.clone();
    for x in &mut perturbed.data_mut()[45 * 3..46 * 3] {
        *x += 1.5;
    }
    let (a, b) = (encode_value(&model, &poses), encode_value(&model, &perturbed));
    assert_ne!(a.row(20), b.row(20));
}

#[test]
fn decoder_is_causal() {
    let model = small();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let poses = random_poses(&mut rng, 12, 3);
    let a = logits_for(&model, &poses, &[BOS, 4, 5, 6]);
    let b = logits_for(&model, &poses, &[BOS, 4, 7, 8]);
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn cross_attention_is_live() {
    let model = small();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let a = logits_for(&model, &random_poses(&mut rng, 12, 3), &[BOS, 4]);
        let b = logits_for(&model, &random_poses(&mut rng, 12, 3), &[BOS, 4]);
        assert!(a.max_abs_diff(&b) > 0.0);
    }
}

#[test]
fn decode_step_matches_teacher_forcing() {
    let model = small();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let poses = random_poses(&mut rng, 15, 3);
    let caption = [BOS, 4, 6, 5, EOS];
    let batch = pad_batch(&[(&poses, &caption[..])]).unwrap();
    let tf = model.forward_teacher_forced(&batch).unwrap().remove(0);

    let mut tape = Tape::new();
    let b = model.bind_frozen(&mut tape);
    let enc = model.encode(&mut tape, &b, &poses, None).unwrap();
    let mut state = DecodeState::new();
    for t in 0..caption.len() - 1 {
        let step = model.decode_step(&mut tape, &b, &enc, &state).unwrap();
        for (x, y) in step.logits.iter().zip(tf.logits.row(t)) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(step.beta, tf.attention.beta[t]);
        state.attention.push_row(step.beta, step.center, step.window);
        state.tokens.push(caption[t + 1]);
        assert_eq!(state.step(), t + 1);
    }
    state.attention.validate(1e-9).unwrap();
}

#[test]
fn padding_is_neutral_and_batch_order_irrelevant() {
    let model = small();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p1 = random_poses(&mut rng, 10, 3);
    let p2 = random_poses(&mut rng, 20, 3);
    let c1 = [BOS, 4, EOS];
    let c2 = [BOS, 5, 6, 7, EOS];
    let alone = model.forward_teacher_forced(&pad_batch(&[(&p1, &c1[..])]).unwrap()).unwrap();
    let batch = pad_batch(&[(&p1, &c1[..]), (&p2, &c2[..])]).unwrap();
    assert!(batch.frame_mask[0][..10].iter().all(|&m| m));
    assert!(batch.frame_mask[0][10..].iter().all(|&m| !m));
    let both = model.forward_teacher_forced(&batch).unwrap();
    assert_eq!(both[0].target_mask, vec![true, true, false, false]);
    for t in 0..2 {
        for (x, y) in alone[0].logits.row(t).iter().zip(both[0].logits.row(t)) {
            assert!((x - y).abs() < 1e-9);
        }
        for (j, (x, y)) in alone[0].attention.beta[t].iter().zip(&both[0].attention.beta[t]).enumerate() {
            assert!((x - y).abs() < 1e-9);
            assert!(j < 10 || *y == 0.0);
        }
        assert!(both[0].attention.beta[t][10..].iter().all(|&w| w == 0.0));
    }
    let swapped = model
        .forward_teacher_forced(&pad_batch(&[(&p2, &c2[..]), (&p1, &c1[..])]).unwrap())
        .unwrap();
    assert_eq!(swapped[1].logits, both[0].logits);
    assert_eq!(swapped[0].logits, both[1].logits);
}

#[test]
fn generate_respects_cap_and_rows() {
    let model = small();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..4 {
        let g = model.generate(&random_poses(&mut rng, 14, 3)).unwrap();
        assert!(g.emitted.len() <= model.config().max_caption_len);
        assert_eq!(g.attention.len(), g.emitted.len());
        if g.emitted.last() != Some(&EOS) {
            assert_eq!(g.emitted.len(), model.config().max_caption_len);
        }
        g.attention.validate(1e-9).unwrap();
    }
}

#[test]
fn forcing_eos_out_of_reach_hits_cap() {
    let mut model = small();
    let pos = model.params().position("out.b").unwrap();
    model.params_mut().tensors_mut()[pos].data_mut()[EOS] = -1e6;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = model.generate(&random_poses(&mut rng, 14, 3)).unwrap();
    assert_eq!(g.emitted.len(), 6);
    assert_eq!(g.words().len(), 6);
}

#[test]
fn unbounded_windows_reduce_to_full_attention() {
    let model = Model::new(cfg(8, 2, Radius::Unbounded, Radius::Unbounded, 1), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let poses = random_poses(&mut rng, 30, 3);
    let mut tape = Tape::new();
    let b = model.bind_frozen(&mut tape);
    let enc = model.encode(&mut tape, &b, &poses, None).unwrap();
    for w in &enc.self_attention[0] {
        assert!(tape.value(*w).data().iter().all(|&x| x > 0.0));
    }
    let out = model.decode(&mut tape, &b, &enc, &[BOS, 4, 5], None).unwrap();
    assert!(out.cross.windows.iter().all(|&w| w == [0, 29]));
    for (t, &m) in out.cross.provisional_centers.iter().enumerate() {
        assert!((tape.value(out.cross.centers).row(t)[0] - m).abs() < 1e-12);
    }
}

#[test]
fn from_params_checks_shapes() {
    let model = small();
    let mut wider = model.config().clone();
    wider.d_model = 4;
    assert!(Model::from_params(wider, model.params().clone()).is_err());
    let ok = Model::from_params(model.config().clone(), model.params().clone()).unwrap();
    assert_eq!(ok, model);
}

#[test]
fn init_is_seeded_and_bounded() {
    let a = small();
    assert_eq!(a, small());
    let w = a.params().get("enc0.ffn2.w").unwrap();
    let k = 1.0 / 32f64.sqrt();
    assert!(w.data().iter().all(|x| x.abs() <= k));
    assert!(a.params().get("fuse.ln1.scale").unwrap().data().iter().all(|&x| x == 1.0));
    assert_ne!(a.params(), Model::new(a.config().clone(), 6).unwrap().params());
}
