use super::*;
use crate::arch::{ModelKind, Rank};
use crate::data::{generate_phantom, preprocess, PhantomSpec};

fn phantoms(n: usize, size: usize) -> Vec<PreprocessedSample> {
    (0..n)
        .map(|i| {
            let case = generate_phantom(&PhantomSpec::cube(format!("case{i}"), size, i as u64)).unwrap();
            preprocess(&case, None).unwrap()
        })
        .collect()
}

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::new(ModelKind::UNet, Rank::Three);
    c.width_scale = 16;
    c.spatial = 16;
    c.batch_size = 2;
    c.epochs = 1;
    c.seed = 5;
    c
}

#[test]
fn one_epoch_one_row() {
    let data = phantoms(2, 16);
    let mut state = TrainState::new(tiny_config()).unwrap();
    let report = train(&mut state, &data, 1, &TrainOptions::default()).unwrap();
    assert_eq!(report.history.rows.len(), 1);
    assert_eq!(report.step_losses.len(), 1);
    let r = &report.history.rows[0];
    assert_eq!((r.epoch, r.split), (1, Split::Train));
    assert!([r.total_loss, r.dice_loss, r.focal_loss].iter().all(|v| v.is_finite()));
    assert_eq!(state.epoch, 1);
}

#[test]
fn identical_seeds_identical_runs() {
    let data = phantoms(3, 16);
    let mut cfg = tiny_config();
    cfg.validation_fraction = 0.34;
    let run = || {
        let mut state = TrainState::new(cfg.clone()).unwrap();
        let rep = train(&mut state, &data, 2, &TrainOptions::default()).unwrap();
        (state, rep)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra.history.without_time(), rb.history.without_time());
    assert_eq!(ra.history.rows.len(), 4);
    assert_eq!(encode(&a), encode(&b));
}

#[test]
fn max_steps_stops_mid_epoch() {
    let data = phantoms(3, 16);
    let mut cfg = tiny_config();
    cfg.batch_size = 1;
    cfg.validation_fraction = 0.0;
    let mut state = TrainState::new(cfg).unwrap();
    let opts = TrainOptions {
        max_steps: Some(4),
        ..Default::default()
    };
    let rep = train(&mut state, &data, 10, &opts).unwrap();
    assert_eq!(rep.step_losses.len(), 4);
    assert_eq!(rep.history.rows.len(), 2);
    assert_eq!(state.adam.step, 4);
}

#[test]
fn wrong_sample_shape_rejected() {
    let data = phantoms(1, 32);
    let mut state = TrainState::new(tiny_config()).unwrap();
    assert!(matches!(
        train(&mut state, &data, 1, &TrainOptions::default()),
        Err(TrainError::SampleShape { .. })
    ));
    assert!(matches!(
        train(&mut state, &[], 1, &TrainOptions::default()),
        Err(TrainError::EmptyDataset)
    ));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let data = phantoms(2, 16);
    let mut state = TrainState::new(tiny_config()).unwrap();
    train(&mut state, &data, 1, &TrainOptions::default()).unwrap();
    let bytes = encode(&state);
    assert_eq!(&bytes[..4], MAGIC);
    let back = decode(&bytes).unwrap();
    assert_eq!(back, state);

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(
        decode(&flipped),
        Err(TrainError::Checkpoint(CheckpointError::Checksum { .. }))
    ));

    let mut v999 = bytes.clone();
    v999[4..8].copy_from_slice(&999u32.to_le_bytes());
    assert!(matches!(
        decode(&v999),
        Err(TrainError::Checkpoint(CheckpointError::Version(999)))
    ));
    assert!(decode(&bytes[..bytes.len() - 9]).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = phantoms(2, 16);
    let mut whole = TrainState::new(tiny_config()).unwrap();
    let full = train(&mut whole, &data, 2, &TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let mut first = TrainState::new(tiny_config()).unwrap();
    let opts = TrainOptions {
        checkpoint_path: Some(&ckpt),
        ..Default::default()
    };
    train(&mut first, &data, 1, &opts).unwrap();
    let mut resumed = load_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.epoch, 1);
    let rest = train(&mut resumed, &data, 1, &TrainOptions::default()).unwrap();
    assert_eq!(rest.history.rows[0].without_time(), full.history.rows[1].without_time());
    assert_eq!(resumed.params, whole.params);
}

#[test]
fn evaluation_is_deterministic() {
    let data = phantoms(2, 16);
    let state = TrainState::new(tiny_config()).unwrap();
    let net = state.network().unwrap();
    let a = evaluate(&net, &state.params, &data).unwrap();
    assert_eq!(a, evaluate(&net, &state.params, &data).unwrap());
    assert_eq!(a.cases.len(), 2);
    assert!(matches!(evaluate(&net, &state.params, &[]), Err(TrainError::EmptyDataset)));
}

#[test]
fn kfold_mean_of_folds() {
    let data = phantoms(5, 16);
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    cfg.batch_size = 4;
    assert!(run_kfold(&cfg, &data[..4], 5).is_err());
    let rep = run_kfold(&cfg, &data, 5).unwrap();
    assert_eq!(rep.folds.len(), 5);
    let mean: f64 = rep.folds.iter().map(|r| r.mean_dice_foreground).sum::<f64>() / 5.0;
    assert!((rep.mean.mean_dice_foreground - mean).abs() < 1e-9);
    assert!(rep.std_accuracy >= 0.0);
}
