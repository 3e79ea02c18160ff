use rationale_core::autodiff::AdamConfig;
use rationale_core::data::{generate_planted, Dataset, PlantedSpec};
use rationale_core::evaluation::{evaluate, EvalConfig, PredictionPath};
use rationale_core::model::{ModelConfig, Probe, RationaleModel};
use rationale_core::training::{
    compute_hsa_indicator, pretrain_predictor, train, train_adapted_predictor, LossConfig,
    LossMode, PredictorTraining, TrainConfig,
};

fn tiny_data(seed: u64) -> Dataset {
    generate_planted(&PlantedSpec {
        n_train: 96,
        n_val: 24,
        n_test: 24,
        seed,
        ..PlantedSpec::default()
    })
    .unwrap()
}

fn tiny_model(data: &Dataset, d: usize) -> RationaleModel {
    let cfg = ModelConfig {
        d_model: d,
        heads: 2,
        layers: 1,
        d_ff: 2 * d,
        max_seq_len: 64,
        ..ModelConfig::default()
    };
    RationaleModel::new(cfg, data.vocab.len(), data.num_classes()).unwrap()
}

fn fast_adam() -> AdamConfig {
    AdamConfig {
        lr: 1e-3,
        accumulation_window: 1,
        ..AdamConfig::default()
    }
}

fn tiny_train_config(loss: LossConfig) -> TrainConfig {
    TrainConfig {
        loss,
        optimizer: fast_adam(),
        batch_size: 16,
        max_epochs: 2,
        evals_per_epoch: 2,
        pretrain_epochs: 1,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_pretraining_epochs_leave_parameters_unchanged() {
    let data = tiny_data(0);
    let mut model = tiny_model(&data, 8);
    let before = model.store.clone();
    let losses = pretrain_predictor(
        &mut model,
        &data.train,
        &PredictorTraining {
            epochs: 0,
            ..PredictorTraining::default()
        },
    )
    .unwrap();
    assert!(losses.is_empty());
    assert_eq!(model.store, before);
}

#[test]
fn pretraining_beats_chance_on_planted_data() {
    let data = generate_planted(&PlantedSpec {
        n_val: 200,
        ..PlantedSpec::default()
    })
    .unwrap();
    let mut model = tiny_model(&data, 32);
    pretrain_predictor(
        &mut model,
        &data.train,
        &PredictorTraining {
            epochs: 3,
            optimizer: fast_adam(),
            ..PredictorTraining::default()
        },
    )
    .unwrap();
    let report = evaluate(
        &model,
        &data.val,
        &EvalConfig {
            probe: Probe::Substitution,
            path: PredictionPath::FullInput,
        },
    )
    .unwrap();
    assert!(
        report.accuracy > 0.5 + 0.1,
        "validation accuracy {}",
        report.accuracy
    );
}

#[test]
fn adapted_training_requires_an_open_mix_ratio() {
    let data = tiny_data(1);
    let mut model = tiny_model(&data, 8);
    for ratio in [0.0, 1.0] {
        let cfg = PredictorTraining {
            mix_ratio: ratio,
            ..PredictorTraining::default()
        };
        assert!(train_adapted_predictor(&mut model, &data.train, &cfg).is_err());
    }
}

#[test]
fn hsa_indicator_follows_a_constant_predictor() {
    let data = tiny_data(2);
    let mut model = tiny_model(&data, 8);
    let head = model.predictor_head().clone();
    model.store.get_mut(head.weight).data_mut().fill(0.0);
    model
        .store
        .get_mut(head.bias)
        .data_mut()
        .copy_from_slice(&[5.0, -5.0]);
    for inst in &data.test {
        let hit = compute_hsa_indicator(&model, inst, Probe::Substitution).unwrap();
        assert_eq!(hit, inst.label == 0);
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = tiny_data(3);
    let cfg = tiny_train_config(LossConfig::default());
    let a = train(tiny_model(&data, 8), &data, &cfg).unwrap();
    let b = train(tiny_model(&data, 8), &data, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.store, b.model.store);
    assert!(!a.log.is_empty());
}

#[test]
fn selective_and_unsupervised_modes_train() {
    let data = tiny_data(4);
    for loss in [
        LossConfig {
            selective: true,
            lambda_su1: 2.0,
            ..LossConfig::default()
        },
        LossConfig {
            mode: LossMode::Unsupervised,
            ..LossConfig::default()
        },
    ] {
        let out = train(tiny_model(&data, 8), &data, &tiny_train_config(loss)).unwrap();
        assert!(out.best_val_loss.is_finite());
        for r in &out.log {
            assert!((0.0..=1.0).contains(&r.mean_mask));
        }
    }
}

#[test]
fn empty_validation_split_is_an_error() {
    let mut data = tiny_data(5);
    data.val.clear();
    assert!(train(
        tiny_model(&data, 8),
        &data,
        &tiny_train_config(LossConfig::default())
    )
    .is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = tiny_data(6);
    let out = train(
        tiny_model(&data, 8),
        &data,
        &tiny_train_config(LossConfig::default()),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    out.model.to_checkpoint().unwrap().save(&path).unwrap();
    let back = RationaleModel::from_checkpoint(
        &rationale_core::autodiff::Checkpoint::load(&path).unwrap(),
    )
    .unwrap();
    for inst in &data.test {
        assert_eq!(out.model.infer(inst).unwrap(), back.infer(inst).unwrap());
    }
}
