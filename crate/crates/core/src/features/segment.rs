use super::{MelMatrix, MelSegment, MelUtterance};
use crate::error::{Error, Result};

/// Consecutive non-overlapping windows of an utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedUtterance {
    pub segments: Vec<MelSegment>,
    /// Frames of edge padding appended to each segment (non-zero only for
    /// the last one).
    pub pad_lengths: Vec<usize>,
}

/// Splits `u` into `ceil(F / T)` windows of width `segment_frames`. A short
/// final window is right-padded by repeating the utterance's last frame.
pub fn segment_utterance(u: &MelUtterance, segment_frames: usize) -> Result<SegmentedUtterance> {
    if segment_frames == 0 {
        return Err(Error::invalid("segment length must be at least one frame"));
    }
    let f = u.frames();
    if f == 0 {
        return Err(Error::invalid("utterance has no frames"));
    }
    let count = f.div_ceil(segment_frames);
    let mut segments = Vec::with_capacity(count);
    let mut pad_lengths = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * segment_frames;
        let end = start + segment_frames;
        pad_lengths.push(end.saturating_sub(f));
        segments.push(MelSegment {
            mel: u.mel.window_edge_padded(start, segment_frames),
            speaker: u.speaker,
        });
    }
    Ok(SegmentedUtterance {
        segments,
        pad_lengths,
    })
}

/// Inverse of [`segment_utterance`]: joins segments and trims padding.
pub fn concat_segments(segments: &[MelSegment], pad_lengths: &[usize]) -> Result<MelMatrix> {
    let first = segments
        .first()
        .ok_or_else(|| Error::invalid("no segments to concatenate"))?;
    if pad_lengths.len() != segments.len() {
        return Err(Error::invalid(format!(
            "{} pad lengths for {} segments",
            pad_lengths.len(),
            segments.len()
        )));
    }
    let width = first.frames();
    let last = segments.len() - 1;
    let mut parts = Vec::with_capacity(segments.len());
    for (i, (s, &pad)) in segments.iter().zip(pad_lengths).enumerate() {
        if s.frames() != width {
            return Err(Error::invalid("segments have different widths"));
        }
        if pad > 0 && i != last {
            return Err(Error::invalid(format!("padding on non-final segment {i}")));
        }
        if pad >= width {
            return Err(Error::invalid(format!(
                "pad length {pad} leaves no frames in a segment of width {width}"
            )));
        }
        parts.push(if pad == 0 {
            s.mel.clone()
        } else {
            s.mel.window_edge_padded(0, width - pad)
        });
    }
    MelMatrix::hcat(&parts)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::features::{SpeakerId, MEL_BINS};

    fn utterance(frames: usize) -> MelUtterance {
        let data = (0..MEL_BINS * frames).map(|i| (i % 977) as f32 * 0.01 - 3.0).collect();
        MelUtterance {
            mel: MelMatrix::new(frames, data).unwrap(),
            speaker: SpeakerId(1),
            source_id: "u".into(),
        }
    }

    #[test]
    fn exact_multiple_needs_no_padding() {
        let s = segment_utterance(&utterance(120), 40).unwrap();
        assert_eq!(s.segments.len(), 3);
        assert_eq!(s.pad_lengths, vec![0, 0, 0]);
    }

    #[test]
    fn single_segment_is_identity() {
        let u = utterance(40);
        let s = segment_utterance(&u, 40).unwrap();
        assert_eq!(s.segments.len(), 1);
        assert_eq!(s.segments[0].mel, u.mel);
    }

    #[test]
    fn remainder_is_edge_padded() {
        let u = utterance(95);
        let s = segment_utterance(&u, 40).unwrap();
        assert_eq!(s.segments.len(), 3);
        assert_eq!(s.pad_lengths, vec![0, 0, 25]);
        let last = &s.segments[2].mel;
        for b in 0..MEL_BINS {
            for t in 15..40 {
                assert_eq!(last.get(b, t), u.mel.get(b, 94));
            }
        }
    }

    #[test]
    fn concat_examples() {
        let s = segment_utterance(&utterance(120), 40).unwrap();
        assert_eq!(concat_segments(&s.segments, &s.pad_lengths).unwrap().frames(), 120);
        let short = segment_utterance(&utterance(15), 40).unwrap();
        assert_eq!(short.pad_lengths, vec![25]);
        assert_eq!(concat_segments(&short.segments, &short.pad_lengths).unwrap().frames(), 15);
    }

    #[test]
    fn inconsistent_padding_is_rejected() {
        let s = segment_utterance(&utterance(80), 40).unwrap();
        assert!(concat_segments(&s.segments, &[0]).is_err());
        assert!(concat_segments(&s.segments, &[5, 0]).is_err());
        assert!(concat_segments(&s.segments, &[0, 40]).is_err());
        assert!(concat_segments(&[], &[]).is_err());
        assert!(segment_utterance(&utterance(10), 0).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_frame_exact(frames in 1usize..400, width in 1usize..64) {
            let u = utterance(frames);
            let s = segment_utterance(&u, width).unwrap();
            prop_assert_eq!(s.segments.len(), frames.div_ceil(width));
            let back = concat_segments(&s.segments, &s.pad_lengths).unwrap();
            prop_assert_eq!(back, u.mel);
        }
    }
}
