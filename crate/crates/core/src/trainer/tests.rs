use super::*;
use crate::features::{MelMatrix, MelParams, MelUtterance, SpeakerVocab, MEL_BINS};
use crate::model::{ModelConfig, ScaleSpec};
use crate::seed::Noise;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        latent_groups: 2,
        split: 1,
        scales: vec![ScaleSpec { factor: 4, groups: 1 }, ScaleSpec { factor: 2, groups: 1 }],
        segment_frames: 8,
        base_channels: 4,
        latent_channels: 2,
        speaker_embedding_dim: 4,
        ..ModelConfig::desk()
    }
}

fn toy_dataset(utts: usize, frames: usize) -> Dataset {
    let vocab = SpeakerVocab::from_names(["a", "b"]).unwrap();
    let mut noise = Noise::new(5);
    let raw = (0..utts)
        .map(|i| {
            let t = noise.standard_normal::<f32>(&[MEL_BINS * frames]);
            MelUtterance {
                mel: MelMatrix::new(frames, t.into_vec()).unwrap(),
                speaker: SpeakerId((i % 2) as u32),
                source_id: format!("u{i}"),
            }
        })
        .collect();
    Dataset::from_utterances(raw, vocab, MelParams::default(), 8).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn eight_segments_batch_eight_is_one_step() {
    let ds = toy_dataset(2, 32);
    assert_eq!(ds.segments().len(), 8);
    let m = Model::init(tiny_config(), 2, 0).unwrap();
    let ck = train(m, &ds, &cfg(1), None).unwrap();
    assert_eq!(ck.meta.step, 1);
    assert_eq!(ck.meta.epoch, 1);
    assert!(ck.meta.history[0].loss.is_finite());
}

#[test]
fn identical_seeds_give_identical_losses() {
    let ds = toy_dataset(3, 20);
    let run = || {
        let m = Model::init(tiny_config(), 2, 1).unwrap();
        let mut t = Trainer::new(m, TrainConfig { batch_size: 3, ..cfg(2) }).unwrap();
        t.run(&ds.segments(), |_| Ok(())).unwrap();
        t.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>()
    };
    let a = run();
    assert!(a.len() > 2);
    assert_eq!(a, run());
}

#[test]
fn clipping_bounds_the_global_norm() {
    let ds = toy_dataset(2, 16);
    let m = Model::init(tiny_config(), 2, 0).unwrap();
    let mut t = Trainer::new(
        m,
        TrainConfig {
            grad_clip: 1e-3,
            batch_size: 2,
            ..cfg(2)
        },
    )
    .unwrap();
    t.run(&ds.segments(), |_| Ok(())).unwrap();
    for s in &t.steps {
        assert!(s.grad_norm > 1e-3);
        assert!(s.clipped_norm <= 1e-3, "{}", s.clipped_norm);
    }

    let mut g = vec![Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap()];
    assert_eq!(clip_gradients(&mut g, 10.0), (5.0, 5.0));
    let (before, after) = clip_gradients(&mut g, 1.0);
    assert_eq!(before, 5.0);
    assert!(after <= 1.0 && after > 0.999);
}

#[test]
fn resume_continues_the_epoch_counter_and_trajectory() {
    let ds = toy_dataset(2, 16);
    let constant = |epochs| TrainConfig {
        schedule: LrSchedule::Constant,
        batch_size: 3,
        ..cfg(epochs)
    };
    let full = train(Model::init(tiny_config(), 2, 0).unwrap(), &ds, &constant(3), None).unwrap();
    let part = train(Model::init(tiny_config(), 2, 0).unwrap(), &ds, &constant(2), None).unwrap();
    assert_eq!(part.meta.epoch, 2);
    let bytes = part.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let resumed = train_with(Trainer::resume(back, constant(3)).unwrap(), &ds, None).unwrap();
    assert_eq!(resumed.meta.epoch, 3);
    assert_eq!(resumed.meta.history.len(), 3);
    assert!(resumed.model.params().bit_eq(full.model.params()));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(2, 16);
    let ck = train(
        Model::init(tiny_config(), 2, 0).unwrap(),
        &ds,
        &TrainConfig {
            ema_decay: Some(0.9),
            ..cfg(1)
        },
        Some(dir.path()),
    )
    .unwrap();
    let path = dir.path().join(FINAL_CHECKPOINT);
    assert!(dir.path().join(LOG_FILE).exists());
    let back = load_checkpoint(&path).unwrap();
    assert!(back.model.params().bit_eq(ck.model.params()));
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.model_checksum(), ck.model_checksum());
    assert!(back.optimizer.ema.is_some());

    let bytes = fs::read(&path).unwrap();
    let truncated = &bytes[..bytes.len() / 2];
    assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::Integrity(_))));
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&versioned),
        Err(Error::UnsupportedVersion { found: 7, .. })
    ));

    let other = SpeakerVocab::from_names(["a", "b", "c"]).unwrap();
    assert!(matches!(back.check_vocab(&other), Err(Error::Config(_))));
    back.check_vocab(ds.vocab()).unwrap();
}

#[test]
fn vocab_mismatch_and_bad_config_are_config_errors() {
    let ds = toy_dataset(2, 16);
    let m = Model::init(tiny_config(), 3, 0).unwrap();
    assert!(matches!(train(m, &ds, &cfg(1), None), Err(Error::Config(_))));
    let m = Model::init(tiny_config(), 2, 0).unwrap();
    for bad in [
        TrainConfig { batch_size: 0, ..cfg(1) },
        TrainConfig { beta: -1.0, ..cfg(1) },
        TrainConfig { learning_rate: 0.0, ..cfg(1) },
    ] {
        assert!(matches!(Trainer::new(m.clone(), bad), Err(Error::Config(_))));
    }
}

#[test]
fn schedules() {
    let c = TrainConfig::default();
    assert_eq!(c.learning_rate_at(0, 100), 1e-3);
    assert!((c.learning_rate_at(50, 100) - 5e-4).abs() < 1e-12);
    assert!(c.learning_rate_at(100, 100).abs() < 1e-12);
    let w = TrainConfig {
        kl_warmup_steps: 4,
        beta: 2.0,
        ..c
    };
    assert_eq!(w.beta_at(0), 0.5);
    assert_eq!(w.beta_at(3), 2.0);
    assert_eq!(w.beta_at(40), 2.0);
}
