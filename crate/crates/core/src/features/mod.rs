//! Log-mel features, fixed-length segments and speaker-labelled datasets.

mod dataset;
pub mod format;
mod mel;
mod segment;

pub use dataset::{
    build_dataset, normalized_segments, read_wav_mono, segment_count, Dataset, DatasetManifest, Normalization,
    SegmentRef, UtteranceEntry, MANIFEST_FILE,
};
pub use mel::{extract_mel, hz_to_mel, mel_center_frequencies, mel_to_hz, MelFilterbank, MelParams};
pub use segment::{concat_segments, segment_utterance, SegmentedUtterance};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of mel bins in every feature matrix.
pub const MEL_BINS: usize = 80;

/// Default segment length in frames (0.5 s at the default hop).
pub const DEFAULT_SEGMENT_FRAMES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpeakerId(pub u32);

impl SpeakerId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Speaker names in sorted order; a speaker's id is its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerVocab {
    speakers: Vec<String>,
}

impl SpeakerVocab {
    /// Builds a vocabulary from names in any order; duplicates collapse.
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut speakers: Vec<String> = names.into_iter().map(Into::into).collect();
        speakers.sort();
        speakers.dedup();
        if speakers.is_empty() {
            return Err(Error::invalid("speaker vocabulary is empty"));
        }
        Ok(SpeakerVocab { speakers })
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<SpeakerId> {
        self.speakers
            .binary_search_by(|s| s.as_str().cmp(name))
            .ok()
            .map(|i| SpeakerId(i as u32))
    }

    pub fn name(&self, id: SpeakerId) -> Option<&str> {
        self.speakers.get(id.index()).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.speakers
    }

    pub fn contains(&self, id: SpeakerId) -> bool {
        id.index() < self.speakers.len()
    }

    pub fn check(&self, id: SpeakerId) -> Result<()> {
        if self.contains(id) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "unknown speaker id {id} (vocabulary has {} speakers)",
                self.len()
            )))
        }
    }
}

/// A `MEL_BINS x frames` row-major matrix of log-mel values.
#[derive(Debug, Clone, PartialEq)]
pub struct MelMatrix {
    frames: usize,
    data: Vec<f32>,
}

impl MelMatrix {
    pub fn new(frames: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("mel matrix needs at least one frame"));
        }
        if data.len() != MEL_BINS * frames {
            return Err(Error::invalid(format!(
                "mel matrix of {frames} frames needs {} values, got {}",
                MEL_BINS * frames,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite mel value at bin {} frame {}",
                i / frames,
                i % frames
            )));
        }
        Ok(MelMatrix { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        MEL_BINS
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.data[bin * self.frames + frame]
    }

    /// Column `frame` as a vector over bins.
    pub fn frame(&self, frame: usize) -> Vec<f32> {
        (0..MEL_BINS).map(|b| self.get(b, frame)).collect()
    }

    /// Frames `[start, start + len)`; indices past the end repeat the last frame.
    pub fn window_edge_padded(&self, start: usize, len: usize) -> MelMatrix {
        let mut data = Vec::with_capacity(MEL_BINS * len);
        for b in 0..MEL_BINS {
            let row = &self.data[b * self.frames..(b + 1) * self.frames];
            data.extend((start..start + len).map(|t| row[t.min(self.frames - 1)]));
        }
        MelMatrix { frames: len, data }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> MelMatrix {
        MelMatrix {
            frames: self.frames,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Horizontal concatenation.
    pub fn hcat(parts: &[MelMatrix]) -> Result<MelMatrix> {
        let frames: usize = parts.iter().map(|p| p.frames).sum();
        let mut data = Vec::with_capacity(MEL_BINS * frames);
        for b in 0..MEL_BINS {
            for p in parts {
                data.extend_from_slice(&p.data[b * p.frames..(b + 1) * p.frames]);
            }
        }
        MelMatrix::new(frames, data)
    }
}

/// A whole utterance before segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct MelUtterance {
    pub mel: MelMatrix,
    pub speaker: SpeakerId,
    pub source_id: String,
}

impl MelUtterance {
    pub fn frames(&self) -> usize {
        self.mel.frames()
    }
}

/// One fixed-length training and conversion unit.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSegment {
    pub mel: MelMatrix,
    pub speaker: SpeakerId,
}

impl MelSegment {
    pub fn frames(&self) -> usize {
        self.mel.frames()
    }
}
