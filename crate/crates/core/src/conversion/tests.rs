use super::*;
use crate::model::{ModelConfig, ScaleSpec};

fn small(l: usize, k: usize) -> ModelConfig {
    ModelConfig {
        latent_groups: l,
        split: k,
        scales: vec![ScaleSpec { factor: 8, groups: 1 }, ScaleSpec { factor: 4, groups: l - 1 }],
        base_channels: 4,
        latent_channels: 2,
        speaker_embedding_dim: 4,
        ..ModelConfig::desk()
    }
}

fn utterance(frames: usize, seed: u64) -> MelUtterance {
    let data = Noise::new(seed)
        .standard_normal::<f32>(&[MEL_BINS * frames])
        .into_vec()
        .into_iter()
        .map(|v| 0.5 + 0.1 * v)
        .collect();
    MelUtterance {
        mel: MelMatrix::new(frames, data).unwrap(),
        speaker: SpeakerId(0),
        source_id: "u".into(),
    }
}

#[test]
fn lengths_are_preserved() {
    let m = Model::<f32>::init(small(3, 2), 3, 0).unwrap();
    for granularity in [Granularity::Segment, Granularity::Utterance] {
        for f in [1, 40, 95, 120] {
            let req = ConversionRequest {
                granularity,
                ..ConversionRequest::new(utterance(f, f as u64), SpeakerId(2))
            };
            let out = convert_utterance(&m, &req).unwrap();
            assert_eq!(out.frames(), f, "{granularity:?}");
            assert_eq!(out.speaker, SpeakerId(2));
        }
    }
}

#[test]
fn mean_mode_is_deterministic_and_sampled_mode_is_seeded() {
    let m = Model::<f32>::init(small(3, 1), 2, 1).unwrap();
    let u = utterance(95, 3);
    let mut req = ConversionRequest::new(u, SpeakerId(1));
    let a = convert_utterance(&m, &req).unwrap();
    let b = convert_utterance(&m, &req).unwrap();
    assert_eq!(a.mel.data(), b.mel.data());

    req.mode = ConversionMode::Sampled { seed: 4 };
    let s1 = convert_utterance(&m, &req).unwrap();
    let s2 = convert_utterance(&m, &req).unwrap();
    assert_eq!(s1.mel.data(), s2.mel.data());
    assert_ne!(s1.mel.data(), a.mel.data());
}

#[test]
fn target_speaker_never_reaches_invariant_latents() {
    let m = Model::<f32>::init(small(4, 2), 4, 2).unwrap();
    let seg = segment_utterance(&utterance(40, 9), 40).unwrap().segments.remove(0);
    for mode in [ConversionMode::Mean, ConversionMode::Sampled { seed: 1 }] {
        let zs: Vec<_> = (0..4)
            .map(|t| conversion_latents(&m, &seg, SpeakerId(0), SpeakerId(t), mode).unwrap())
            .collect();
        for z in &zs[1..] {
            for (a, b) in z.invariant().iter().zip(zs[0].invariant()) {
                assert!(a.bit_eq(b));
            }
            assert!(z.dependent().iter().zip(zs[0].dependent()).any(|(a, b)| !a.bit_eq(b)));
        }
        // the source speaker does reach them through the encoder
        let other = conversion_latents(&m, &seg, SpeakerId(3), SpeakerId(0), mode).unwrap();
        assert!(!other.invariant()[0].bit_eq(&zs[0].invariant()[0]));
    }
}

#[test]
fn full_split_uses_only_the_posterior() {
    let m = Model::<f32>::init(small(3, 3), 3, 2).unwrap();
    let seg = segment_utterance(&utterance(40, 1), 40).unwrap().segments.remove(0);
    let base = conversion_latents(&m, &seg, SpeakerId(0), SpeakerId(0), ConversionMode::Mean).unwrap();
    assert!(base.dependent().is_empty());
    let x = batch_tensor::<f32>(&[&seg]).unwrap();
    let enc = m.encode_mean(&x, &[SpeakerId(0)]).unwrap();
    assert!(enc.z.bit_eq(&base));
    for t in 1..3 {
        let z = conversion_latents(&m, &seg, SpeakerId(0), SpeakerId(t), ConversionMode::Mean).unwrap();
        assert!(z.bit_eq(&base));
        let out = convert_segment(&m, &seg, SpeakerId(0), SpeakerId(t), ConversionMode::Mean).unwrap();
        let dec = m.decode(&z, &[SpeakerId(t)]).unwrap().mean;
        assert_eq!(out.mel.data(), dec.data());
    }
}

#[test]
fn unknown_speakers_are_rejected() {
    let m = Model::<f32>::init(small(2, 1), 2, 0).unwrap();
    let req = ConversionRequest::new(utterance(10, 0), SpeakerId(2));
    assert!(matches!(convert_utterance(&m, &req), Err(Error::InvalidInput(_))));
}

#[test]
fn benchmark_reports_consistent_numbers() {
    let m = Model::<f32>::init(small(2, 1), 2, 0).unwrap();
    let r = benchmark_conversion(&m, 3, 2, 0.0125, 0).unwrap();
    assert_eq!(r.totals.len(), 2);
    assert!(r.std_total >= 0.0);
    assert!((r.seconds_per_segment * 3.0 - r.mean_total).abs() < 1e-12);
    assert!((r.seconds_per_speech_second - r.seconds_per_segment / 0.5).abs() < 1e-12);
    assert_eq!(r.reference_seconds_per_segment, 0.172);
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
}
