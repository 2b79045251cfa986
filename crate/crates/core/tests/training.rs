use xmodal_core::align::{AlignMode, LossBreakdown};
use xmodal_core::checkpoint::{load_checkpoint, save_checkpoint, to_bytes};
use xmodal_core::data::{generate_synthetic, subject_kfold, PairedSample, SyntheticGenConfig};
use xmodal_core::model::CrossModalModel;
use xmodal_core::train::{evaluate, run_experiment, train_fold, train_step, LossRanges, OptimizerState, TrainConfig};
use xmodal_core::vit::ModelConfig;
use xmodal_core::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        layers: 1,
        ..ModelConfig::desk()
    }
}

fn small_data(size: usize) -> Vec<PairedSample> {
    generate_synthetic(&SyntheticGenConfig {
        image_size: size,
        hyperplastic: 24,
        adenomatous: 24,
        subjects: 10,
        ..Default::default()
    })
    .unwrap()
}

fn small_cfg(mode: AlignMode) -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        batch_size: 8,
        max_epochs: 2,
        mode,
        model: small_model(),
        ..Default::default()
    }
}

fn one_step(mode: AlignMode, batch: &[PairedSample], model: &ModelConfig) -> LossBreakdown {
    let cfg = TrainConfig {
        mode,
        model: model.clone(),
        ..Default::default()
    };
    let mut m = CrossModalModel::new(model.clone(), &cfg.align, 1).unwrap();
    let mut state = OptimizerState::for_model(&m);
    train_step(&mut m, &mut state, batch, &cfg, cfg.lr, &mut LossRanges::default()).unwrap()
}

#[test]
fn live_terms_follow_the_mode() {
    let data = small_data(16);
    let batch = &data[..4];
    let b = one_step(AlignMode::WlOnly, batch, &small_model());
    assert_eq!((b.cls_nbi, b.global_align, b.local_align), (0.0, 0.0, 0.0));
    assert_eq!(b.total, b.cls_wl);
    let b = one_step(AlignMode::Cga, batch, &small_model());
    assert!(b.cls_nbi > 0.0 && b.global_align > 0.0);
    assert_eq!(b.local_align, 0.0);
    let b = one_step(AlignMode::CgaSam, batch, &small_model());
    assert!(b.local_align >= 0.0 && b.local_align <= 0.3);
    assert!((b.cls_wl + b.cls_nbi + b.global_align + b.local_align - b.total).abs() < 1e-9);
}

#[test]
fn balanced_first_batch_starts_near_ln2() {
    let data = generate_synthetic(&SyntheticGenConfig {
        hyperplastic: 8,
        adenomatous: 8,
        subjects: 4,
        ..Default::default()
    })
    .unwrap();
    let b = one_step(AlignMode::WlOnly, &data, &ModelConfig::desk());
    assert!((b.cls_wl - 2f64.ln()).abs() < 0.15, "cls_wl {}", b.cls_wl);
}

#[test]
fn one_step_on_a_repeated_pair_lowers_its_loss() {
    let data = small_data(64);
    let cfg = TrainConfig::default();
    for rep in 0..10 {
        let pair = &data[rep..rep + 1];
        let mut m = CrossModalModel::new(ModelConfig::desk(), &cfg.align, rep as u64).unwrap();
        let mut state = OptimizerState::for_model(&m);
        let mut ranges = LossRanges::default();
        let before = train_step(&mut m, &mut state, pair, &cfg, cfg.lr, &mut ranges)
            .unwrap()
            .total;
        // zero lr re-measures the loss without moving the weights
        let after = train_step(&mut m, &mut state, pair, &cfg, 0.0, &mut ranges)
            .unwrap()
            .total;
        assert!(after < before, "rep {rep}: {before} -> {after}");
    }
}

#[test]
fn constant_model_scores_the_majority_fraction() {
    let mut data = generate_synthetic(&SyntheticGenConfig {
        image_size: 16,
        hyperplastic: 4,
        adenomatous: 6,
        subjects: 4,
        ..Default::default()
    })
    .unwrap();
    let mut m = CrossModalModel::new(small_model(), &Default::default(), 0).unwrap();
    // zero head weights and a bias favouring class 1
    for p in m.backbone.params.iter_mut() {
        if p.name.starts_with("head") {
            p.tensor.data_mut().fill(0.0);
            if p.name.ends_with("bias") {
                p.tensor.data_mut()[1] = 1.0;
            }
        }
    }
    assert_eq!(evaluate(&m, &data).unwrap(), 0.6);
    data.reverse();
    assert_eq!(evaluate(&m, &data).unwrap(), 0.6);
    assert_eq!(evaluate(&m.pruned(), &data).unwrap(), 0.6);
    assert!(matches!(evaluate(&m, &[]), Err(Error::Data(_))));
}

#[test]
fn sgd_is_bit_deterministic_over_five_steps() {
    let data = small_data(16);
    let cfg = small_cfg(AlignMode::CgaSam);
    let run = || {
        let mut m = CrossModalModel::new(cfg.model.clone(), &cfg.align, 3).unwrap();
        let mut state = OptimizerState::for_model(&m);
        for s in 0..5 {
            train_step(
                &mut m,
                &mut state,
                &data[s * 4..s * 4 + 4],
                &cfg,
                cfg.lr,
                &mut LossRanges::default(),
            )
            .unwrap();
        }
        to_bytes(&m).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn experiment_is_reproducible_and_checkpoints_round_trip() {
    let data = small_data(16);
    let split = subject_kfold(&data, 2, 0).unwrap();
    let cfg = small_cfg(AlignMode::CgaSam);
    let modes = [AlignMode::WlOnly, AlignMode::CgaSam];
    let mut log_a = Vec::new();
    let (ra, fa) = run_experiment(&cfg, &data, &split, &modes, Some(&mut log_a)).unwrap();
    let mut log_b = Vec::new();
    let (rb, fb) = run_experiment(&cfg, &data, &split, &modes, Some(&mut log_b)).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.to_csv(), rb.to_csv());
    assert_eq!(log_a, log_b);
    assert_eq!(
        String::from_utf8(log_a).unwrap().lines().count(),
        2 * 2 * cfg.max_epochs
    );
    for (x, y) in fa.iter().flatten().zip(fb.iter().flatten()) {
        assert_eq!(to_bytes(&x.best_model).unwrap(), to_bytes(&y.best_model).unwrap());
    }

    let dir = tempfile::tempdir().unwrap();
    let best = &fa[1][0];
    let path = dir.path().join("best.ckpt");
    save_checkpoint(&best.best_model, &path).unwrap();
    let (_, val) = split.indices(&data, 0);
    let val: Vec<PairedSample> = val.iter().map(|&i| data[i].clone()).collect();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(evaluate(&loaded, &val).unwrap(), best.best_accuracy);
    assert_eq!(evaluate(&loaded.pruned(), &val).unwrap(), best.best_accuracy);
}

#[test]
fn single_fold_split_gives_a_single_row() {
    let data = small_data(16);
    let split = subject_kfold(&data, 1, 0).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..small_cfg(AlignMode::Cga)
    };
    let (r, _) = run_experiment(&cfg, &data, &split, &[AlignMode::Cga], None).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].folds.len(), 1);
    assert_eq!(r.to_csv().lines().next().unwrap(), "method,fold1,mean");
}

#[test]
fn non_finite_weights_abort_with_the_step_index() {
    let data = small_data(16);
    let split = subject_kfold(&data, 2, 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e200,
        ..small_cfg(AlignMode::Cga)
    };
    match train_fold(&cfg, &data, &split, 0, None) {
        Err(Error::Numerical(m)) => assert!(m.starts_with("step "), "{m}"),
        other => panic!("expected a numerical error, got {:?}", other.map(|r| r.best_accuracy)),
    }
}

#[test]
fn too_few_pairs_for_a_batch_is_a_config_error() {
    let data = small_data(16);
    let split = subject_kfold(&data, 2, 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 64,
        ..small_cfg(AlignMode::WlOnly)
    };
    assert!(matches!(
        train_fold(&cfg, &data, &split, 0, None),
        Err(Error::Config(_))
    ));
}
