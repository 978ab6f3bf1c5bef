use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{MelMatrix, MelUtterance, SpeakerId, MEL_BINS};
use crate::error::{Error, Result};

/// STFT and mel filterbank settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper band edge; `None` means Nyquist.
    pub f_max: Option<f64>,
    /// Mel amplitudes are clamped to this value before the log.
    pub log_floor: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        Self::for_sample_rate(48_000)
    }
}

impl MelParams {
    /// 12.5 ms hop, 50 ms window, FFT size the next power of two.
    pub fn for_sample_rate(sample_rate: u32) -> Self {
        let hop_length = (sample_rate as usize * 25).div_ceil(2000);
        let win_length = sample_rate as usize / 20;
        MelParams {
            sample_rate,
            n_fft: win_length.next_power_of_two(),
            hop_length,
            win_length,
            n_mels: MEL_BINS,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-5,
        }
    }

    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    /// Seconds between consecutive frames.
    pub fn frame_period(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels != MEL_BINS {
            return Err(Error::config(format!(
                "n_mels must be {MEL_BINS}, got {}",
                self.n_mels
            )));
        }
        if self.sample_rate == 0 || self.hop_length == 0 || self.win_length == 0 {
            return Err(Error::config("sample rate, hop and window must be positive"));
        }
        if self.win_length > self.n_fft {
            return Err(Error::config(format!(
                "window length {} exceeds FFT size {}",
                self.win_length, self.n_fft
            )));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max() && self.f_max() <= self.sample_rate as f64 / 2.0) {
            return Err(Error::config("mel band edges must satisfy 0 <= f_min < f_max <= sr/2"));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(Error::config("log floor must be positive"));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Peak frequency (Hz) of each of the `n_mels` triangular filters.
pub fn mel_center_frequencies(params: &MelParams) -> Vec<f64> {
    edge_frequencies(params)[1..=params.n_mels].to_vec()
}

fn edge_frequencies(params: &MelParams) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(params.f_min), hz_to_mel(params.f_max()));
    let n = params.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Triangular filters on the linear-frequency FFT grid, unit peak height.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_freqs: usize,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(params: &MelParams) -> Self {
        let n_freqs = params.n_fft / 2 + 1;
        let edges = edge_frequencies(params);
        let bin_hz = params.sample_rate as f64 / params.n_fft as f64;
        let mut weights = vec![0.0; params.n_mels * n_freqs];
        for m in 0..params.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_freqs {
                let f = k as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[m * n_freqs + k] = w;
            }
        }
        MelFilterbank { n_freqs, weights }
    }

    pub fn apply(&self, magnitude: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.weights[m * self.n_freqs..(m + 1) * self.n_freqs];
            *o = row.iter().zip(magnitude).map(|(w, a)| w * a).sum();
        }
    }
}

struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    window_sum: f64,
}

impl Stft {
    fn new(params: &MelParams) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(params.n_fft);
        let n = params.win_length;
        // periodic Hann
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let window_sum = window.iter().sum();
        Stft {
            fft,
            window,
            window_sum,
        }
    }
}

/// Log-mel features of a mono waveform.
///
/// Frame `t` is centred on sample `t * hop` (zero padded at the edges) and
/// there are `ceil(len / hop)` frames. Magnitudes are scaled by the window
/// sum so a full-scale sinusoid peaks near 0.5 before the mel projection.
pub fn extract_mel(
    waveform: &[f32],
    sample_rate: u32,
    params: &MelParams,
    speaker: SpeakerId,
    source_id: impl Into<String>,
) -> Result<MelUtterance> {
    params.validate()?;
    if waveform.is_empty() {
        return Err(Error::invalid("waveform is empty"));
    }
    if sample_rate != params.sample_rate {
        return Err(Error::config(format!(
            "waveform sample rate {sample_rate} Hz does not match mel parameters ({} Hz)",
            params.sample_rate
        )));
    }
    if let Some(i) = waveform.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite sample at index {i}")));
    }
    let stft = Stft::new(params);
    let bank = MelFilterbank::new(params);
    let frames = waveform.len().div_ceil(params.hop_length);
    let n_freqs = params.n_fft / 2 + 1;
    let half_win = params.win_length as isize / 2;
    let offset = (params.n_fft - params.win_length) / 2;

    let mut buf = vec![Complex::new(0.0, 0.0); params.n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); stft.fft.get_inplace_scratch_len()];
    let mut magnitude = vec![0.0; n_freqs];
    let mut mel = vec![0.0; params.n_mels];
    let mut data = vec![0f32; params.n_mels * frames];
    for t in 0..frames {
        buf.fill(Complex::new(0.0, 0.0));
        let start = (t * params.hop_length) as isize - half_win;
        for (i, w) in stft.window.iter().enumerate() {
            let idx = start + i as isize;
            if idx >= 0 && (idx as usize) < waveform.len() {
                buf[offset + i].re = waveform[idx as usize] as f64 * w;
            }
        }
        stft.fft.process_with_scratch(&mut buf, &mut scratch);
        for (m, c) in magnitude.iter_mut().zip(&buf) {
            *m = c.norm() / stft.window_sum;
        }
        bank.apply(&magnitude, &mut mel);
        for (b, &v) in mel.iter().enumerate() {
            data[b * frames + t] = v.max(params.log_floor).ln() as f32;
        }
    }
    Ok(MelUtterance {
        mel: MelMatrix::new(frames, data)?,
        speaker,
        source_id: source_id.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, sr: u32) -> Vec<f32> {
        let n = (seconds * sr as f64) as usize;
        (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn default_geometry() {
        let p = MelParams::default();
        assert_eq!(p.hop_length, 600);
        assert_eq!(p.win_length, 2400);
        assert_eq!(p.n_fft, 4096);
        assert!((p.frame_period() - 0.0125).abs() < 1e-12);
        p.validate().unwrap();
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let p = MelParams::default();
        let u = extract_mel(&vec![0.0; 24_000], 48_000, &p, SpeakerId(0), "s").unwrap();
        let floor = (1e-5f64).ln() as f32;
        assert!(u.mel.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn half_second_gives_forty_frames() {
        let p = MelParams::default();
        let u = extract_mel(&tone(220.0, 0.5, 48_000), 48_000, &p, SpeakerId(0), "t").unwrap();
        assert_eq!(u.frames(), 40);
    }

    #[test]
    fn pure_tone_peaks_at_nearest_mel_center() {
        let p = MelParams::default();
        // Oracle: filter centres straight from the HTK mel formula.
        let lo = 0.0f64;
        let hi = 2595.0 * (1.0f64 + 24_000.0 / 700.0).log10();
        let centers: Vec<f64> = (1..=80)
            .map(|i| 700.0 * (10f64.powf((lo + (hi - lo) * i as f64 / 81.0) / 2595.0) - 1.0))
            .collect();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
            .unwrap()
            .0;
        let u = extract_mel(&tone(440.0, 0.5, 48_000), 48_000, &p, SpeakerId(0), "a4").unwrap();
        // interior frames only; edge frames see half a window of padding
        for t in 2..u.frames() - 2 {
            let col = u.mel.frame(t);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn extraction_is_bitwise_deterministic() {
        let p = MelParams::default();
        let w = tone(311.0, 0.3, 48_000);
        let a = extract_mel(&w, 48_000, &p, SpeakerId(0), "x").unwrap();
        let b = extract_mel(&w, 48_000, &p, SpeakerId(0), "x").unwrap();
        let bits = |u: &MelUtterance| u.mel.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn rejects_empty_and_mismatched_input() {
        let p = MelParams::default();
        assert!(matches!(
            extract_mel(&[], 48_000, &p, SpeakerId(0), "e"),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            extract_mel(&[0.0; 100], 16_000, &p, SpeakerId(0), "e"),
            Err(Error::Config(_))
        ));
    }
}
