//! Voice conversion: speaker-invariant latents from the source, the rest of
//! the hierarchy from the target-conditioned prior, decoded under the target.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{concat_segments, segment_utterance, MelMatrix, MelSegment, MelUtterance, SpeakerId, MEL_BINS};
use crate::model::{batch_tensor, LatentHierarchy, Model};
use crate::seed::{indexed_seed, Noise};
use crate::tensor::{Real, Tensor};

/// Segments converted per forward pass.
pub const CONVERT_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ConversionMode {
    /// Means everywhere; fully deterministic.
    Mean,
    Sampled { seed: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Fixed-length segments, as in training.
    #[default]
    Segment,
    /// The whole utterance in one pass.
    Utterance,
}

/// `source.mel` must already be normalized.
#[derive(Debug, Clone)]
pub struct ConversionRequest {
    pub source: MelUtterance,
    pub source_speaker: SpeakerId,
    pub target_speaker: SpeakerId,
    pub mode: ConversionMode,
    pub granularity: Granularity,
}

impl ConversionRequest {
    pub fn new(source: MelUtterance, target_speaker: SpeakerId) -> Self {
        ConversionRequest {
            source_speaker: source.speaker,
            source,
            target_speaker,
            mode: ConversionMode::Mean,
            granularity: Granularity::Segment,
        }
    }
}

fn seed_for(mode: ConversionMode, index: usize) -> Option<u64> {
    match mode {
        ConversionMode::Mean => None,
        ConversionMode::Sampled { seed } => Some(indexed_seed(seed, "convert", index as u64)),
    }
}

fn tensor_to_segments<T: Real>(out: &Tensor<T>, speaker: SpeakerId) -> Result<Vec<MelSegment>> {
    let (b, _, _, t) = out.dims4();
    (0..b)
        .map(|i| {
            let data = out.index_batch(i).data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
            Ok(MelSegment {
                mel: MelMatrix::new(t, data)?,
                speaker,
            })
        })
        .collect()
}

/// Converts one segment. The returned segment carries `target`.
pub fn convert_segment<T: Real>(
    m: &Model<T>,
    x: &MelSegment,
    source: SpeakerId,
    target: SpeakerId,
    mode: ConversionMode,
) -> Result<MelSegment> {
    let mut out = convert_segments(m, std::slice::from_ref(x), source, target, mode)?;
    Ok(out.remove(0))
}

/// Converts segments in batches of [`CONVERT_BATCH`].
pub fn convert_segments<T: Real>(
    m: &Model<T>,
    xs: &[MelSegment],
    source: SpeakerId,
    target: SpeakerId,
    mode: ConversionMode,
) -> Result<Vec<MelSegment>> {
    let mut out = Vec::with_capacity(xs.len());
    for (ci, chunk) in xs.chunks(CONVERT_BATCH).enumerate() {
        let refs: Vec<&MelSegment> = chunk.iter().collect();
        let x = batch_tensor::<T>(&refs)?;
        let (_, y) = m.convert_latents(&x, &vec![source; chunk.len()], &vec![target; chunk.len()], seed_for(mode, ci))?;
        out.extend(tensor_to_segments(&y, target)?);
    }
    Ok(out)
}

/// Latents used by the conversion pass for one segment.
pub fn conversion_latents<T: Real>(
    m: &Model<T>,
    x: &MelSegment,
    source: SpeakerId,
    target: SpeakerId,
    mode: ConversionMode,
) -> Result<LatentHierarchy<T>> {
    let xt = batch_tensor::<T>(&[x])?;
    Ok(m.convert_latents(&xt, &[source], &[target], seed_for(mode, 0))?.0)
}

/// Converts a whole utterance; the output has the input's frame count.
pub fn convert_utterance<T: Real>(m: &Model<T>, req: &ConversionRequest) -> Result<MelUtterance> {
    m.check_speakers(&[req.source_speaker, req.target_speaker])?;
    let mel = match req.granularity {
        Granularity::Segment => {
            let seg = segment_utterance(&req.source, m.config().segment_frames)?;
            let out = convert_segments(m, &seg.segments, req.source_speaker, req.target_speaker, req.mode)?;
            concat_segments(&out, &seg.pad_lengths)?
        }
        Granularity::Utterance => convert_wide(m, req)?,
    };
    Ok(MelUtterance {
        mel,
        speaker: req.target_speaker,
        source_id: req.source.source_id.clone(),
    })
}

fn convert_wide<T: Real>(m: &Model<T>, req: &ConversionRequest) -> Result<MelMatrix> {
    let f = req.source.frames();
    let coarse = m.config().scales[0].factor;
    let width = f.div_ceil(coarse) * coarse;
    let padded = req.source.mel.window_edge_padded(0, width);
    let x = Tensor::from_vec(
        &[1, 1, MEL_BINS, width],
        padded.data().iter().map(|&v| T::from_f32(v).unwrap_or(T::nan())).collect(),
    )?;
    let (_, y) = m.convert_latents_wide(&x, &[req.source_speaker], &[req.target_speaker], seed_for(req.mode, 0))?;
    let full = &tensor_to_segments(&y, req.target_speaker)?[0].mel;
    Ok(full.window_edge_padded(0, f))
}

/// Provenance written next to every converted file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionMetadata {
    pub source_id: String,
    pub source_speaker: String,
    pub target_speaker: String,
    #[serde(flatten)]
    pub mode: ConversionMode,
    pub granularity: Granularity,
    pub frames: usize,
    pub model_checksum: String,
}

/// Wall-clock timing of repeated conversion passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub segments: usize,
    pub repeats: usize,
    /// Total seconds of each measured repeat.
    pub totals: Vec<f64>,
    pub mean_total: f64,
    pub std_total: f64,
    pub seconds_per_segment: f64,
    /// Conversion time per second of input speech.
    pub seconds_per_speech_second: f64,
    /// Published reference latency on other hardware, for context only.
    pub reference_seconds_per_segment: f64,
}

pub const REFERENCE_SECONDS_PER_SEGMENT: f64 = 0.172;

/// Times converting `segment_count` random segments one at a time, after
/// one warm-up pass. Conversion is a single non-autoregressive pass per
/// segment, so time should grow linearly with the count.
pub fn benchmark_conversion<T: Real>(
    m: &Model<T>,
    segment_count: usize,
    repeats: usize,
    frame_period: f64,
    seed: u64,
) -> Result<TimingReport> {
    if segment_count == 0 || repeats == 0 {
        return Err(Error::invalid("benchmark needs at least one segment and one repeat"));
    }
    if m.vocab_size() == 0 {
        return Err(Error::invalid("model has no speakers"));
    }
    let t = m.config().segment_frames;
    let mut noise = Noise::new(seed);
    let segs: Vec<MelSegment> = (0..segment_count)
        .map(|i| {
            let data = noise
                .standard_normal::<f32>(&[MEL_BINS * t])
                .into_vec()
                .into_iter()
                .map(|v| (0.5 + 0.15 * v).clamp(0.0, 1.0))
                .collect();
            MelSegment {
                mel: MelMatrix::new(t, data).expect("sized"),
                speaker: SpeakerId((i % m.vocab_size()) as u32),
            }
        })
        .collect();
    let target = SpeakerId(((1) % m.vocab_size()) as u32);
    let run = || -> Result<f64> {
        let start = Instant::now();
        for s in &segs {
            convert_segment(m, s, s.speaker, target, ConversionMode::Mean)?;
        }
        Ok(start.elapsed().as_secs_f64())
    };
    run()?;
    let totals = (0..repeats).map(|_| run()).collect::<Result<Vec<_>>>()?;
    let n = totals.len() as f64;
    let mean_total = totals.iter().sum::<f64>() / n;
    let std_total = (totals.iter().map(|v| (v - mean_total).powi(2)).sum::<f64>() / n).sqrt();
    let seconds_per_segment = mean_total / segment_count as f64;
    Ok(TimingReport {
        segments: segment_count,
        repeats,
        totals,
        mean_total,
        std_total,
        seconds_per_segment,
        seconds_per_speech_second: seconds_per_segment / (t as f64 * frame_period),
        reference_seconds_per_segment: REFERENCE_SECONDS_PER_SEGMENT,
    })
}

/// Time ratio of converting `2n` versus `n` segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub small: TimingReport,
    pub large: TimingReport,
    pub ratio: f64,
    /// Whether the ratio lies in `2.0 ± 20%`.
    pub linear: bool,
}

pub fn linearity_check<T: Real>(m: &Model<T>, n: usize, repeats: usize, frame_period: f64, seed: u64) -> Result<LinearityReport> {
    let small = benchmark_conversion(m, n, repeats, frame_period, seed)?;
    let large = benchmark_conversion(m, 2 * n, repeats, frame_period, seed)?;
    // medians are robust to a single descheduled repeat
    let ratio = median(&large.totals) / median(&small.totals);
    Ok(LinearityReport {
        linear: (ratio - 2.0).abs() <= 0.4,
        small,
        large,
        ratio,
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[cfg(test)]
mod tests;
