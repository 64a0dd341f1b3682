use synccap_core::dataset::generate_corpus;
use synccap_core::trainer::{train, TrainConfig};
use synccap_core::{ModelConfig, Radius};

#[test]
fn language_loss_strictly_decreases_over_first_epochs() {
    let data = generate_corpus(200, 7, 2, 3).unwrap();
    let model_cfg = ModelConfig {
        d_model: 64,
        heads: 4,
        self_radius: Radius::Finite(10),
        cross_radius: Radius::Finite(10),
        ..Default::default()
    };
    let cfg = TrainConfig { epochs: 5, ..Default::default() };
    let out = train(&data, &[], model_cfg, &cfg, |_| {}).unwrap();
    let losses: Vec<f64> = out.log.epochs.iter().map(|e| e.train.loss_lang).collect();
    assert_eq!(losses.len(), 5);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}
