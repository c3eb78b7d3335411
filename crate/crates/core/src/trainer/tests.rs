use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::backbones::{BackboneConfig, ConvShapeletConfig, EarlyClassifier, LstmConfig, ModelConfig};
use crate::dataio::{synth_pattern_dataset, LabeledSeries, SynthConfig};
use crate::error::Error;
use crate::objective::TradeOff;

/// Two classes told apart by the sign of the series mean.
fn sign_of_mean_set(n: usize, len: usize, seed: u64) -> Vec<LabeledSeries<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let shift = if label == 0 { 0.8 } else { -0.8 };
            let v = (0..len)
                .map(|_| shift + 0.5 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            LabeledSeries::univariate(v, label).unwrap()
        })
        .collect()
}

fn small_conv(seed: u64) -> EarlyClassifier<f64> {
    EarlyClassifier::new(ModelConfig {
        backbone: BackboneConfig::Conv(ConvShapeletConfig {
            num_blocks: 2,
            kernels_per_block: 4,
            width_step: 2,
            input_dim: 1,
            dropout_rate: 0.5,
        }),
        num_classes: 2,
        init_seed: seed,
    })
    .unwrap()
}

fn small_lstm(seed: u64) -> EarlyClassifier<f64> {
    EarlyClassifier::new(ModelConfig {
        backbone: BackboneConfig::Lstm(LstmConfig {
            num_layers: 1,
            hidden_dim: 8,
            input_dim: 1,
        }),
        num_classes: 2,
        init_seed: seed,
    })
    .unwrap()
}

fn quiet() -> impl FnMut(&EpochRecord) {
    |_| {}
}

#[test]
fn pretraining_separates_sign_of_mean() {
    let data = sign_of_mean_set(64, 20, 1);
    for mut model in [small_conv(2), small_lstm(2)] {
        let cfg = TrainConfig::classification(0.01, 30, 3).clipped_for(model.config().backbone.kind());
        let log = train_phase1(&mut model, &data, None, &cfg, &mut quiet()).unwrap();
        assert!(log.iter().any(|r| r.train_acc >= 0.99), "{:?}", log.last());
    }
}

#[test]
fn zero_epochs_change_nothing() {
    let data = sign_of_mean_set(8, 6, 1);
    let mut model = small_conv(4);
    let before = model.params().clone();
    let log = train_phase1(&mut model, &data, None, &TrainConfig::classification(0.01, 0, 0), &mut quiet()).unwrap();
    assert!(log.is_empty());
    assert_eq!(model.params(), &before);
}

#[test]
fn fixed_seed_reproduces_parameters_and_log() {
    let data = sign_of_mean_set(20, 10, 5);
    let run = |kind: u8| {
        let mut model = if kind == 0 { small_conv(1) } else { small_lstm(1) };
        let cfg = TrainConfig::classification(0.01, 3, 9).clipped_for(model.config().backbone.kind());
        let log1 = train_phase1(&mut model, &data, Some(&data), &cfg, &mut quiet()).unwrap();
        let cfg2 = TrainConfig::finetune(TradeOff::new(0.8).unwrap(), 0.01, 2, 9);
        let log2 = train_phase2(&mut model, &data, None, &cfg2, &mut quiet()).unwrap();
        (model.params().clone(), model.batch_norm_state().cloned(), log1, log2)
    };
    for kind in [0, 1] {
        assert_eq!(run(kind), run(kind));
    }
}

#[test]
fn pretraining_leaves_stop_head_alone() {
    let data = sign_of_mean_set(16, 8, 2);
    let mut model = small_conv(3);
    let (w, b) = model.stop_head();
    let (w0, b0) = (model.params().at(w).clone(), model.params().at(b).clone());
    let (cw, _) = model.class_head();
    let c0 = model.params().at(cw).clone();
    train_phase1(&mut model, &data, None, &TrainConfig::classification(0.01, 2, 0), &mut quiet()).unwrap();
    assert_eq!(model.params().at(w), &w0);
    assert_eq!(model.params().at(b), &b0);
    assert_ne!(model.params().at(cw), &c0);
}

#[test]
fn finetuning_moves_stop_head() {
    let data = sign_of_mean_set(16, 8, 2);
    let mut model = small_lstm(3);
    let (w, b) = model.stop_head();
    let cfg = TrainConfig::finetune(TradeOff::new(0.7).unwrap(), 0.01, 1, 0);
    train_phase2(&mut model, &data, None, &cfg, &mut quiet()).unwrap();
    assert!(model.params().at(w).value.data().iter().any(|&v| v != 0.0));
    assert_ne!(model.params().at(b).value.data(), &[-5.0]);
}

#[test]
fn logged_loss_splits_into_components() {
    let data = sign_of_mean_set(24, 12, 6);
    let mut model = small_conv(8);
    let log = train_phase1(&mut model, &data, None, &TrainConfig::classification(0.01, 2, 1), &mut quiet()).unwrap();
    for r in &log {
        assert_eq!(r.loss, r.cls_loss);
        assert!((r.earliness_loss - 0.5).abs() < 1e-12);
        assert!(r.wall_ms.is_none());
    }
    for alpha in [0.0, 0.35, 0.8, 1.0] {
        let mut m = model.clone();
        let cfg = TrainConfig::finetune(TradeOff::new(alpha).unwrap(), 0.01, 3, 2);
        let log = train_phase2(&mut m, &data, None, &cfg, &mut quiet()).unwrap();
        for r in &log {
            let parts = alpha * r.cls_loss + (1.0 - alpha) * r.earliness_loss;
            assert!((r.loss - parts).abs() < 1e-9, "alpha {alpha}: {r:?}");
        }
    }
}

#[test]
fn zero_alpha_pulls_decisions_earlier() {
    // frozen classifier, only the stopping head learns; majority of 5 seeds
    let wins = (0..5u64)
        .filter(|&seed| {
            let ds: crate::dataio::Dataset<f64> = synth_pattern_dataset(&SynthConfig {
                n_train_per_class: 16,
                n_test_per_class: 1,
                length: 30,
                signal_pos: 0.3,
                sigma: 0.5,
                seed,
            })
            .unwrap();
            let mut model = small_conv(seed);
            let mut cfg = TrainConfig::finetune(TradeOff::new(0.0).unwrap(), 0.01, 4, seed);
            cfg.freeze_classifier = true;
            let log = train_phase2(&mut model, &ds.train, None, &cfg, &mut quiet()).unwrap();
            log.windows(2).all(|w| w[1].earliness_loss < w[0].earliness_loss)
        })
        .count();
    assert!(wins >= 3, "{wins} of 5 seeds");
}

#[test]
fn config_validation() {
    let data = sign_of_mean_set(4, 4, 0);
    let mut model = small_conv(0);
    let mut bad = TrainConfig::classification(0.01, 1, 0);
    bad.alpha = Some(TradeOff::new(0.5).unwrap());
    assert!(train_phase1(&mut model, &data, None, &bad, &mut quiet()).is_err());
    assert!(train_phase1(&mut model, &data, None, &TrainConfig::classification(0.0, 1, 0), &mut quiet()).is_err());
    assert!(train_phase1(&mut model, &[], None, &TrainConfig::classification(0.01, 1, 0), &mut quiet()).is_err());
    let ft = TrainConfig::finetune(TradeOff::new(0.5).unwrap(), 0.01, 1, 0);
    assert!(train_phase1(&mut model, &data, None, &ft, &mut quiet()).is_err());
    assert!(train_phase2(&mut model, &data, None, &TrainConfig::classification(0.01, 1, 0), &mut quiet()).is_err());
}

#[test]
fn divergence_is_reported() {
    let mut data = sign_of_mean_set(4, 4, 0);
    data[0] = LabeledSeries::univariate(vec![1e308, -1e308, 1e308, 1e308], 0).unwrap();
    let mut model = small_conv(0);
    let err = train_phase1(&mut model, &data, None, &TrainConfig::classification(0.01, 1, 0), &mut quiet());
    assert!(matches!(err, Err(Error::Diverged { .. }) | Err(Error::Numeric(_))), "{err:?}");
}

fn grid_points() -> Vec<GridPoint> {
    let conv = |d| BackboneConfig::Conv(ConvShapeletConfig {
        num_blocks: 1,
        kernels_per_block: d,
        width_step: 2,
        input_dim: 1,
        dropout_rate: 0.0,
    });
    vec![
        GridPoint { backbone: conv(2), learning_rate: 0.01 },
        GridPoint { backbone: conv(4), learning_rate: 0.01 },
        GridPoint { backbone: conv(2), learning_rate: 0.01 },
    ]
}

#[test]
fn grid_search_is_deterministic_and_complete() {
    let data = sign_of_mean_set(18, 8, 4);
    let grid = grid_points();
    let cv = CvSettings::new(3, 2, 7);
    let report = grid_search_cv(&data, 2, &grid, &cv).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[0].fold_accuracy, report.rows[2].fold_accuracy);
    assert!(report.rows.iter().all(|r| r.fold_accuracy.len() == 3));
    let best = &report.rows[report.best];
    assert!(report.rows.iter().all(|r| r.mean_accuracy <= best.mean_accuracy));
    // index 2 duplicates index 0 and can never be chosen over it
    assert_ne!(report.best, 2);
    assert_eq!(report, grid_search_cv(&data, 2, &grid, &cv).unwrap());

    let single = grid_search_cv(&data, 2, &grid[..1], &cv).unwrap();
    assert_eq!(single.best, 0);
    assert_eq!(single.rows[0].fold_accuracy, report.rows[0].fold_accuracy);
}

#[test]
fn grid_search_needs_enough_members_per_class() {
    let data = sign_of_mean_set(4, 6, 4);
    let err = grid_search_cv(&data, 2, &grid_points(), &CvSettings::new(3, 1, 0));
    assert!(matches!(err, Err(Error::Stratification { .. })));
}

#[test]
fn grid_spec_expansion() {
    let spec: GridSpec = serde_json::from_str(
        r#"{"conv": {"num_blocks": [1, 2], "kernels_per_block": [3], "width_step": [2, 4]},
            "lstm": {"num_layers": [1], "hidden_dim": [4, 8]},
            "learning_rate": [0.1, 0.01]}"#,
    )
    .unwrap();
    let points = spec.expand(2).unwrap();
    assert_eq!(points.len(), (4 + 2) * 2);
    assert!(points.iter().all(|p| p.backbone.input_dim() == 2));
    assert_eq!(points[0].learning_rate, 0.1);
    assert_eq!(GridSpec::reference().expand(1).unwrap().len(), (27 + 20) * 2);
    let empty: GridSpec = serde_json::from_str("{}").unwrap();
    assert!(empty.expand(1).is_err());
}
