use proptest::prelude::*;

use super::*;
use crate::seed::Noise;

fn tiny(l: usize, k: usize) -> ModelConfig {
    let scales = if l == 1 {
        vec![ScaleSpec { factor: 4, groups: 1 }]
    } else {
        vec![
            ScaleSpec { factor: 4, groups: l / 2 },
            ScaleSpec { factor: 2, groups: l - l / 2 },
        ]
    };
    ModelConfig {
        latent_groups: l,
        split: k,
        scales,
        segment_frames: 8,
        base_channels: 8,
        latent_channels: 2,
        speaker_embedding_dim: 6,
        ..ModelConfig::desk()
    }
}

fn input(b: usize, t: usize, seed: u64) -> Tensor<f64> {
    Noise::new(seed).standard_normal::<f64>(&[b, 1, MEL_BINS, t]).map(|v| 0.5 + 0.2 * v)
}

fn speakers(ids: &[u32]) -> Vec<SpeakerId> {
    ids.iter().map(|&i| SpeakerId(i)).collect()
}

#[test]
fn init_is_deterministic() {
    let a = Model::<f32>::init(ModelConfig::desk(), 4, 11).unwrap();
    let b = Model::<f32>::init(ModelConfig::desk(), 4, 11).unwrap();
    let c = Model::<f32>::init(ModelConfig::desk(), 4, 12).unwrap();
    assert!(a.params().bit_eq(b.params()));
    assert!(!a.params().bit_eq(c.params()));
}

#[test]
fn encode_and_decode_shapes() {
    let cfg = tiny(4, 2);
    let m = Model::<f64>::init(cfg.clone(), 3, 1).unwrap();
    let x = input(2, 8, 0);
    let ys = speakers(&[0, 2]);
    let enc = m.encode(&x, &ys, 5).unwrap();
    assert_eq!(enc.z.len(), 4);
    assert_eq!(enc.posteriors.len(), 4);
    for l in 1..=4 {
        let s = cfg.latent_shape(l);
        assert_eq!(enc.z.groups[l - 1].shape(), [2, s[0], s[1], s[2]]);
    }
    assert_eq!(m.decode(&enc.z, &ys).unwrap().mean.shape(), [2, 1, 80, 8]);
}

#[test]
fn encode_is_deterministic_given_seed() {
    let m = Model::<f32>::init(tiny(4, 2), 3, 1).unwrap();
    let x = input(2, 8, 0).cast::<f32>();
    let ys = speakers(&[0, 1]);
    let a = m.encode(&x, &ys, 9).unwrap();
    let b = m.encode(&x, &ys, 9).unwrap();
    let c = m.encode(&x, &ys, 10).unwrap();
    assert!(a.z.bit_eq(&b.z));
    assert!(!a.z.bit_eq(&c.z));
    let d1 = m.decode(&a.z, &ys).unwrap().mean;
    let d2 = m.decode(&a.z, &ys).unwrap().mean;
    assert!(d1.bit_eq(&d2));
}

#[test]
fn zeroed_residuals_give_posterior_equal_prior() {
    let mut m = Model::<f64>::init(tiny(4, 2), 3, 1).unwrap();
    m.zero_posterior_residuals();
    let enc = m.encode(&input(2, 8, 1), &speakers(&[1, 2]), 3).unwrap();
    for (q, p) in enc.posteriors.iter().zip(&enc.priors) {
        assert_eq!(q.mean.data(), p.mean.data());
        assert_eq!(q.log_variance.data(), p.log_variance.data());
    }
}

#[test]
fn priors_below_split_ignore_the_speaker() {
    let m = Model::<f32>::init(tiny(4, 3), 5, 2).unwrap();
    let x = input(1, 8, 4).cast::<f32>();
    let z = m.encode(&x, &speakers(&[0]), 1).unwrap().z;
    for level in 1..=4 {
        let prefix = &z.groups[..level - 1];
        let outs: Vec<_> = (0..5)
            .map(|y| m.prior_params(prefix, &[SpeakerId(y)], level).unwrap())
            .collect();
        let same = outs.iter().all(|o| o.bit_eq(&outs[0]));
        if level <= 3 {
            assert!(same, "level {level} depends on the speaker");
        } else {
            assert!(!same, "level {level} should see the speaker");
        }
    }
    let top = m.prior_params(&[], &speakers(&[4]), 1).unwrap();
    assert!(top.mean.data().iter().all(|&v| v == 0.0));
    assert!(top.log_variance.data().iter().all(|&v| v == 0.0));
}

#[test]
fn split_at_top_leaves_only_the_output_conditioned() {
    let m = Model::<f32>::init(tiny(4, 4), 2, 0).unwrap();
    for (name, _, conditional) in m.cin_sites() {
        if name.starts_with("dec.cell") {
            assert!(!conditional, "{name}");
        }
        if name.starts_with("dec.post") || name.starts_with("dec.out") || name.starts_with("enc.") {
            assert!(conditional, "{name}");
        }
    }
}

#[test]
fn single_latent_model_has_standard_prior_and_one_group() {
    let m = Model::<f64>::init(tiny(1, 1), 2, 0).unwrap();
    let enc = m.encode(&input(1, 8, 2), &speakers(&[1]), 0).unwrap();
    assert_eq!(enc.z.len(), 1);
    assert!(enc.priors[0].bit_eq(&DiagonalGaussian::standard(enc.z.groups[0].shape())));
    assert!(m.cin_sites().iter().all(|(n, _, _)| !n.starts_with("dec.cell")));
}

#[test]
fn cin_normalizes_then_applies_speaker_affine() {
    let mut m = Model::<f64>::init(tiny(2, 1), 2, 3).unwrap();
    let (site, c) = m
        .cin_sites()
        .iter()
        .enumerate()
        .find(|(_, s)| s.2)
        .map(|(i, s)| (i, s.1))
        .unwrap();
    let feats = Noise::new(1).standard_normal::<f64>(&[2, c, 5, 4]).map(|v| 3.0 * v + 1.0);
    let ys = speakers(&[0, 1]);

    let same_feats = Tensor::stack(&[feats.index_batch(0), feats.index_batch(0)]).unwrap();
    let two = m.apply_cin(&same_feats, &ys, site).unwrap();
    assert!(two.index_batch(0).max_abs_diff(&two.index_batch(1)) > 1e-6);

    // constant channel -> delta(y)
    let constant = Tensor::full(&[1, c, 5, 4], 2.5);
    let out = m.apply_cin(&constant, &speakers(&[1]), site).unwrap();
    for ch in 0..c {
        let plane = &out.data()[ch * 20..(ch + 1) * 20];
        assert!(plane.iter().all(|&v| v == plane[0]));
    }

    // unit affine -> zero mean, unit variance per channel
    let name = m.cin_sites()[site].0.to_string();
    for suffix in [".cin.weight", ".cin.bias"] {
        let t = m.params_mut().get_mut(&format!("{name}{suffix}")).unwrap();
        t.data_mut().fill(0.0);
    }
    let out = m.apply_cin(&feats, &ys, site).unwrap();
    for plane in out.data().chunks(20) {
        let mean = plane.iter().sum::<f64>() / 20.0;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 20.0;
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "mean {mean} var {var}");
    }
    assert!(matches!(
        m.apply_cin(&Tensor::zeros(&[1, c + 1, 5, 4]), &speakers(&[0]), site),
        Err(Error::Config(_))
    ));
}

#[test]
fn sample_latents_properties() {
    let g = DiagonalGaussian::new(Tensor::full(&[3], 1.5f64), Tensor::full(&[3], -8.0)).unwrap();
    let s = sample_latents(&g, 0);
    assert!(s.data().iter().all(|v| (v - 1.5).abs() < 0.1));
    assert!(sample_latents(&g, 4).bit_eq(&sample_latents(&g, 4)));

    // Monte Carlo mean within 3 standard errors
    let n = 100_000;
    let g = DiagonalGaussian::new(Tensor::full(&[n], 0.7f64), Tensor::full(&[n], 0.5f64.ln())).unwrap();
    let s = sample_latents(&g, 17);
    let mean = s.sum() / n as f64;
    let se = (0.5f64 / n as f64).sqrt();
    assert!((mean - 0.7).abs() < 3.0 * se, "mean {mean}");
}

#[test]
fn invalid_requests_are_rejected() {
    let m = Model::<f32>::init(tiny(4, 2), 2, 0).unwrap();
    let x = input(1, 8, 0).cast::<f32>();
    assert!(matches!(m.encode(&x, &speakers(&[2]), 0), Err(Error::InvalidInput(_))));
    let z = m.encode(&x, &speakers(&[0]), 0).unwrap().z;
    let short = LatentHierarchy {
        groups: z.groups[..3].to_vec(),
        split: 2,
    };
    assert!(m.decode(&short, &speakers(&[0])).is_err());
    assert!(m.prior_params(&z.groups[..1], &speakers(&[0]), 3).is_err());
    assert!(Model::<f32>::init(
        ModelConfig {
            split: 5,
            ..tiny(4, 2)
        },
        2,
        0
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn decode_of_encode_matches_input_shape(
        l in 1usize..5,
        k_frac in 0.0f64..1.0,
        coarse in prop::bool::ANY,
        t_mult in 1usize..3,
    ) {
        let k = 1 + ((l as f64 - 1.0) * k_frac).round() as usize;
        let scales = if l == 1 || coarse {
            vec![ScaleSpec { factor: 4, groups: l }]
        } else {
            vec![ScaleSpec { factor: 8, groups: 1 }, ScaleSpec { factor: 2, groups: l - 1 }]
        };
        let cfg = ModelConfig { scales, segment_frames: 8 * t_mult, ..tiny(l, k) };
        let m = Model::<f32>::init(cfg, 2, 0).unwrap();
        let x = input(2, 8 * t_mult, 1).cast::<f32>();
        let ys = speakers(&[0, 1]);
        let enc = m.encode(&x, &ys, 3).unwrap();
        prop_assert_eq!(enc.z.len(), l);
        let out = m.decode(&enc.z, &ys).unwrap().mean;
        prop_assert_eq!(out.shape(), x.shape());
    }
}
