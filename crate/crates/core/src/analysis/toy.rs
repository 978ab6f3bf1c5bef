//! Synthetic multi-speaker corpus with known speaker and content factors.
//!
//! Every utterance index `j` has one "script": an f0 contour and a sequence
//! of vowel-like formant targets with pauses. All speakers render the same
//! scripts from the same harmonic excitation. A speaker only changes the
//! spectral envelope: a formant scaling (vocal-tract length), a spectral
//! tilt and one fixed extra resonance.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_mel, Dataset, MelParams, MelUtterance, SpeakerVocab};
use crate::seed::{indexed_seed, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            speakers: 4,
            utterances_per_speaker: 6,
            seconds: 1.5,
            sample_rate: 48_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySpeaker {
    pub formant_scale: f64,
    /// dB per octave above 100 Hz.
    pub tilt_db: f64,
    pub resonance_hz: f64,
    pub resonance_gain: f64,
}

#[derive(Debug, Clone)]
struct Phone {
    end: f64,
    formants: [f64; 3],
    voiced: bool,
}

#[derive(Debug, Clone)]
struct Script {
    f0: f64,
    f0_depth: f64,
    f0_rate: f64,
    phones: Vec<Phone>,
}

const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [640.0, 1190.0, 2390.0],
];

pub fn toy_speaker(cfg: &ToyCorpusConfig, i: usize) -> ToySpeaker {
    let mut r = rng(indexed_seed(cfg.seed, "toy/speaker", i as u64));
    // spread the scale evenly so speakers stay distinguishable
    let pos = if cfg.speakers > 1 { i as f64 / (cfg.speakers - 1) as f64 } else { 0.5 };
    ToySpeaker {
        formant_scale: 0.8 + 0.4 * pos,
        tilt_db: -4.0 - 6.0 * r.gen::<f64>(),
        resonance_hz: 2500.0 + 7000.0 * ((i as f64 * 0.618_034).fract()),
        resonance_gain: 2.0 + 2.0 * r.gen::<f64>(),
    }
}

fn script(cfg: &ToyCorpusConfig, j: usize) -> Script {
    let mut r = rng(indexed_seed(cfg.seed, "toy/script", j as u64));
    let mut phones = Vec::new();
    let mut t = 0.0;
    while t < cfg.seconds {
        let voiced = r.gen::<f64>() > 0.15;
        t += if voiced { r.gen_range(0.08..0.22) } else { r.gen_range(0.04..0.1) };
        phones.push(Phone {
            end: t,
            formants: VOWELS[r.gen_range(0..VOWELS.len())],
            voiced,
        });
    }
    Script {
        f0: r.gen_range(100.0..200.0),
        f0_depth: r.gen_range(0.05..0.2),
        f0_rate: r.gen_range(1.0..4.0),
        phones,
    }
}

impl ToySpeaker {
    fn envelope(&self, f: f64, formants: &[f64; 3]) -> f64 {
        let mut e = 0.02;
        for (k, &fk) in formants.iter().enumerate() {
            let c = fk * self.formant_scale;
            let bw = 60.0 + 40.0 * k as f64;
            e += (1.0 - 0.25 * k as f64) / (1.0 + ((f - c) / bw).powi(2));
        }
        let r = (f - self.resonance_hz) / 300.0;
        e *= 1.0 + self.resonance_gain / (1.0 + r * r);
        let octaves = (f.max(100.0) / 100.0).log2();
        e * 10f64.powf(self.tilt_db * octaves / 20.0)
    }
}

/// Renders utterance `j` of `speaker`.
pub fn render(cfg: &ToyCorpusConfig, speaker: &ToySpeaker, j: usize) -> Vec<f32> {
    let sc = script(cfg, j);
    let sr = cfg.sample_rate as f64;
    let n = (cfg.seconds * sr).round() as usize;
    let nyquist = sr / 2.0;
    let block = 240usize;
    let max_h = (nyquist / (sc.f0 * (1.0 - sc.f0_depth))) as usize;
    let mut phase = vec![0.0f64; max_h + 1];
    let mut prev_amp = vec![0.0f64; max_h + 1];
    let mut out = vec![0f32; n];
    // shared breath noise so silent regions are not at the log floor
    let noise = Normal::new(0.0, 1e-3).expect("valid");
    let mut nr = rng(indexed_seed(cfg.seed, "toy/noise", j as u64));
    let mut phone = 0;
    for b0 in (0..n).step_by(block) {
        let t = b0 as f64 / sr;
        while phone + 1 < sc.phones.len() && sc.phones[phone].end <= t {
            phone += 1;
        }
        let p = &sc.phones[phone];
        let f0 = sc.f0 * (1.0 + sc.f0_depth * (2.0 * PI * sc.f0_rate * t).sin());
        let amp: Vec<f64> = (0..=max_h)
            .map(|h| {
                let f = h as f64 * f0;
                if h == 0 || !p.voiced || f >= nyquist * 0.95 {
                    0.0
                } else {
                    0.05 * speaker.envelope(f, &p.formants)
                }
            })
            .collect();
        let len = block.min(n - b0);
        for i in 0..len {
            let w = i as f64 / block as f64;
            let mut s = 0.0;
            for h in 1..=max_h {
                let a = prev_amp[h] + (amp[h] - prev_amp[h]) * w;
                if a != 0.0 {
                    s += a * phase[h].sin();
                }
                phase[h] += 2.0 * PI * h as f64 * f0 / sr;
            }
            out[b0 + i] = (s + noise.sample(&mut nr)) as f32;
        }
        for p in phase.iter_mut() {
            *p %= 2.0 * PI;
        }
        prev_amp = amp;
    }
    out
}

pub fn speaker_name(i: usize) -> String {
    format!("spk{i}")
}

/// Raw log-mel utterances of the toy corpus, speaker-major.
pub fn toy_utterances(cfg: &ToyCorpusConfig, params: &MelParams) -> Result<(Vec<MelUtterance>, SpeakerVocab)> {
    check(cfg, params)?;
    let vocab = SpeakerVocab::from_names((0..cfg.speakers).map(speaker_name))?;
    let mut out = Vec::new();
    for s in 0..cfg.speakers {
        let spk = toy_speaker(cfg, s);
        let id = vocab.id(&speaker_name(s)).expect("in vocab");
        for j in 0..cfg.utterances_per_speaker {
            let wav = render(cfg, &spk, j);
            out.push(extract_mel(&wav, cfg.sample_rate, params, id, format!("{}/utt{j:03}", speaker_name(s)))?);
        }
    }
    Ok((out, vocab))
}

/// The toy corpus as a normalized in-memory dataset.
pub fn toy_dataset(cfg: &ToyCorpusConfig, params: &MelParams, segment_frames: usize) -> Result<Dataset> {
    let (raw, vocab) = toy_utterances(cfg, params)?;
    Dataset::from_utterances(raw, vocab, params.clone(), segment_frames)
}

/// Writes `root/<speaker>/uttNNN.wav` as 16-bit PCM.
pub fn write_toy_corpus(cfg: &ToyCorpusConfig, root: &Path) -> Result<()> {
    if cfg.speakers == 0 || cfg.utterances_per_speaker == 0 || !(cfg.seconds > 0.0) {
        return Err(Error::config("toy corpus needs speakers, utterances and a positive duration"));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: cfg.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    for s in 0..cfg.speakers {
        let dir = root.join(speaker_name(s));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let spk = toy_speaker(cfg, s);
        for j in 0..cfg.utterances_per_speaker {
            let path = dir.join(format!("utt{j:03}.wav"));
            let wav_err = |e: hound::Error| Error::invalid(format!("{}: {e}", path.display()));
            let mut w = hound::WavWriter::create(&path, spec).map_err(wav_err)?;
            for v in render(cfg, &spk, j) {
                w.write_sample((v.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(wav_err)?;
            }
            w.finalize().map_err(wav_err)?;
        }
    }
    Ok(())
}

fn check(cfg: &ToyCorpusConfig, params: &MelParams) -> Result<()> {
    if cfg.speakers == 0 || cfg.utterances_per_speaker == 0 || !(cfg.seconds > 0.0) {
        return Err(Error::config("toy corpus needs speakers, utterances and a positive duration"));
    }
    if cfg.sample_rate != params.sample_rate {
        return Err(Error::config("toy corpus and mel parameters disagree on the sample rate"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyCorpusConfig {
        ToyCorpusConfig {
            speakers: 2,
            utterances_per_speaker: 2,
            seconds: 0.3,
            ..ToyCorpusConfig::default()
        }
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let cfg = small();
        let a = render(&cfg, &toy_speaker(&cfg, 0), 1);
        assert_eq!(a, render(&cfg, &toy_speaker(&cfg, 0), 1));
        assert_eq!(a.len(), 14_400);
        let peak = a.iter().fold(0f32, |m, v| m.max(v.abs()));
        assert!(peak > 0.01 && peak < 1.0, "peak {peak}");
    }

    #[test]
    fn speakers_share_content_but_differ_in_envelope() {
        let cfg = small();
        let (utts, vocab) = toy_utterances(&cfg, &MelParams::default()).unwrap();
        assert_eq!(vocab.len(), 2);
        assert_eq!(utts.len(), 4);
        let diff = |a: &MelUtterance, b: &MelUtterance| {
            a.mel.data().iter().zip(b.mel.data()).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.mel.data().len() as f32
        };
        // same script, other speaker vs. same speaker, other script
        let cross_speaker = diff(&utts[0], &utts[2]);
        assert!(cross_speaker > 0.1, "{cross_speaker}");
        assert_eq!(utts[0].frames(), utts[2].frames());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        write_toy_corpus(&cfg, dir.path()).unwrap();
        let ds = crate::features::build_dataset(dir.path(), &MelParams::default(), 8).unwrap();
        assert_eq!(ds.vocab().names(), ["spk0", "spk1"]);
        assert_eq!(ds.utterances().len(), 4);
    }
}
