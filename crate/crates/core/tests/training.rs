use lsamesh::harness::{generate_synthetic, BaseShape, SyntheticSpec};
use lsamesh::model::{evaluate, train, TrainOutputs};
use lsamesh::{LsaAutoencoder, ModelConfig, Normalizer, TrainConfig};

fn small_set(count: usize) -> lsamesh::harness::Dataset {
    generate_synthetic(&SyntheticSpec {
        base: BaseShape::Icosphere {
            subdivisions: 1,
            radius: 100.0,
        },
        latent_dim_true: 2,
        num_train: count,
        num_test: 2,
        ..Default::default()
    })
    .unwrap()
}

fn small_model(data: &lsamesh::harness::Dataset, seed: u64) -> LsaAutoencoder<f64> {
    let cfg = ModelConfig {
        latent_dim: 4,
        k: 7,
        enc_channels: vec![8, 8],
        dec_channels: vec![8, 8],
        sampling_factors: vec![4, 4],
        ..Default::default()
    };
    let nz = Normalizer::fit(&data.train, cfg.std_mode).unwrap();
    LsaAutoencoder::new(cfg, data.template.clone(), nz, seed).unwrap()
}

#[test]
fn overfits_a_handful_of_shapes() {
    let data = small_set(4);
    let mut model = small_model(&data, 1);
    let before = evaluate(&model, &data.train, 4).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        batch_size: 4,
        epochs: 150,
        weight_decay: 0.0,
        ..Default::default()
    };
    let out = train(&mut model, &data.train, &data.train, &cfg, &TrainOutputs::default()).unwrap();
    let after = evaluate(&model, &data.train, 4).unwrap();
    assert_eq!(after, out.best_val_error_mm);
    assert!(after < 0.2 * before, "{before} -> {after}");
    assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = small_set(12);
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 4,
        epochs: 3,
        ..Default::default()
    };
    let run = |seed: u64| {
        let mut model = small_model(&data, seed);
        let out = train(&mut model, &data.train, &data.test, &cfg, &TrainOutputs::default()).unwrap();
        (lsamesh::model::log_to_csv(&out.log), model.snapshot())
    };
    let (log_a, params_a) = run(5);
    let (log_b, params_b) = run(5);
    assert_eq!(log_a, log_b);
    assert_eq!(params_a, params_b);
    assert_ne!(run(6).0, log_a);
}
