use proptest::prelude::*;

use synccap_core::attention::{cross_attention_controlled, AttentionMap, CrossWindow};
use synccap_core::metrics::{bleu, element_of, iop, iou, predicted_interval, rouge_l, Interval};
use synccap_core::objectives::{loss_monotonic, total_loss, LossWeights};
use synccap_core::tape::masked_softmax_values;
use synccap_core::{Radius, Tape, Tensor};

fn distribution(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..max_len).prop_filter_map("non-zero mass", |v| {
        let z: f64 = v.iter().sum();
        (z > 1e-6).then(|| v.iter().map(|x| x / z).collect())
    })
}

fn interval(limit: usize) -> impl Strategy<Value = Interval> {
    (0..limit, 0..limit).prop_map(|(a, b)| Interval::new(a.min(b), a.max(b)).unwrap())
}

proptest! {
    #[test]
    fn masked_softmax_rows_are_distributions(
        row in prop::collection::vec(-20.0f64..20.0, 1..30),
        mask_bits in prop::collection::vec(any::<bool>(), 30),
    ) {
        let mut mask: Vec<bool> = mask_bits[..row.len()].to_vec();
        mask[0] = true;
        let p = masked_softmax_values(&row, &mask, row.len()).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (w, m) in p.iter().zip(&mask) {
            prop_assert!(*w >= 0.0);
            if !m { prop_assert_eq!(*w, 0.0); }
        }
    }

    #[test]
    fn overlap_bounds(a in interval(100), b in interval(100)) {
        prop_assert!(iou(a, b) <= iop(a, b));
        prop_assert!(iou(a, b) <= 1.0 && iop(a, b) <= 1.0);
        prop_assert_eq!(iou(a, b), iou(b, a));
    }

    #[test]
    fn element_of_survives_monotone_rescaling(beta in distribution(60), gt in interval(60), k in 0.1f64..5.0) {
        let rescaled: Vec<f64> = beta.iter().map(|b| (k * b).exp() + 3.0).collect();
        prop_assert_eq!(element_of(&beta, gt), element_of(&rescaled, gt));
    }

    #[test]
    fn predicted_interval_is_minimal(beta in distribution(60), tau in 0.05f64..1.0) {
        let iv = predicted_interval(&beta, tau);
        let peak = beta.iter().enumerate().fold(0, |b, (i, &x)| if x > beta[b] { i } else { b });
        let mass = |s: usize, e: usize| beta[s..=e].iter().sum::<f64>();
        prop_assert!(iv.contains(peak));
        prop_assert!(mass(iv.start, iv.end) + 1e-12 >= tau);
        if iv.start < iv.end {
            let drop_left = iv.start + 1 > peak || mass(iv.start + 1, iv.end) + 1e-12 < tau;
            let drop_right = iv.end < peak + 1 || mass(iv.start, iv.end - 1) + 1e-12 < tau;
            prop_assert!(drop_left && drop_right);
        }
    }

    #[test]
    fn monotonic_loss_shift_invariance(
        centers in prop::collection::vec(0.0f64..100.0, 1..12),
        shift in -50.0f64..50.0,
        margin in 0.0f64..3.0,
    ) {
        let shifted: Vec<f64> = centers.iter().map(|c| c + shift).collect();
        let (a, b) = (loss_monotonic(&centers, margin, 100), loss_monotonic(&shifted, margin, 100));
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        let ok = centers.windows(2).all(|w| w[1] - w[0] >= margin);
        prop_assert_eq!(a == 0.0, ok);
    }

    #[test]
    fn lambda_m_scales_only_its_term(l in 0.0f64..5.0, l0 in 0.0f64..1.0, lm in 0.0f64..0.1, s in 0.0f64..10.0) {
        let w = LossWeights::default();
        let scaled = LossWeights { lambda_m: w.lambda_m * s, ..w };
        let (a, b) = (total_loss(l, l0, lm, &w), total_loss(l, l0, lm, &scaled));
        let expected = a.total + (s - 1.0) * w.lambda_m * lm;
        prop_assert!((b.total - expected).abs() < 1e-9 * expected.abs().max(1.0));
    }

    #[test]
    fn text_scores_are_bounded(
        cand in prop::collection::vec(0u8..6, 0..10),
        refr in prop::collection::vec(0u8..6, 1..10),
        n in 1usize..=4,
    ) {
        let c: Vec<String> = cand.iter().map(|x| x.to_string()).collect();
        let r: Vec<String> = refr.iter().map(|x| x.to_string()).collect();
        let b = bleu(std::slice::from_ref(&c), std::slice::from_ref(&r), n);
        let rl = rouge_l(&c, &r);
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!((0.0..=1.0).contains(&rl));
        prop_assert_eq!(rouge_l(&r, &r), 1.0);
    }

    #[test]
    fn controlled_attention_rows_are_valid(
        seed in any::<u64>(),
        t_x in 2usize..40,
        t_y in 1usize..6,
        d in 1usize..5,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rand_tensor = |r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
        };
        let mut tape = Tape::new();
        let q = tape.constant(rand_tensor(t_y, 4));
        let k = tape.constant(rand_tensor(t_x, 4));
        let v = tape.constant(rand_tensor(t_x, 4));
        let window = CrossWindow::new(Radius::Finite(d)).unwrap();
        let att = cross_attention_controlled(&mut tape, q, k, v, window, None).unwrap();
        let map = AttentionMap::from_controlled(&tape, &att, t_y);
        map.validate(1e-9).unwrap();
        for (row, &[s, e]) in map.beta.iter().zip(&map.windows) {
            for (j, &w) in row.iter().enumerate() {
                if j < s || j > e { prop_assert_eq!(w, 0.0); }
            }
        }
    }
}
