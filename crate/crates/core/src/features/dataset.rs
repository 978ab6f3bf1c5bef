use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{
    extract_mel, format, segment_utterance, MelMatrix, MelParams, MelSegment, MelUtterance, SpeakerVocab,
};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
const FEATURE_DIR: &str = "features";

/// Corpus-level min-max map from log-mel values onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    /// Amplitude floor applied before the log during extraction.
    pub floor: f64,
    /// Corpus minimum log-mel value.
    pub shift: f64,
    /// Corpus range (max - min), or 1 for a constant corpus.
    pub scale: f64,
}

impl Normalization {
    pub fn identity(floor: f64) -> Self {
        Normalization {
            floor,
            shift: 0.0,
            scale: 1.0,
        }
    }

    pub fn fit<'a>(floor: f64, mels: impl IntoIterator<Item = &'a MelMatrix>) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for m in mels {
            for &v in m.data() {
                lo = lo.min(f64::from(v));
                hi = hi.max(f64::from(v));
            }
        }
        if !lo.is_finite() {
            return Err(Error::invalid("cannot fit normalization to an empty corpus"));
        }
        let range = hi - lo;
        Ok(Normalization {
            floor,
            shift: lo,
            scale: if range > 0.0 { range } else { 1.0 },
        })
    }

    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        v * self.scale + self.shift
    }

    pub fn normalize(&self, m: &MelMatrix) -> MelMatrix {
        m.map(|v| self.normalize_value(f64::from(v)) as f32)
    }

    pub fn denormalize(&self, m: &MelMatrix) -> MelMatrix {
        m.map(|v| self.denormalize_value(f64::from(v)) as f32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceEntry {
    pub id: String,
    pub speaker: String,
    pub frames: usize,
    /// Feature file relative to the manifest directory.
    pub file: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRef {
    /// Index into the manifest's utterance table.
    pub utterance: usize,
    pub start: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub segment_frames: usize,
    pub speakers: Vec<String>,
    pub mel_params: MelParams,
    pub normalization: Normalization,
    pub utterances: Vec<UtteranceEntry>,
    pub segments: Vec<SegmentRef>,
}

impl DatasetManifest {
    pub fn vocab(&self) -> Result<SpeakerVocab> {
        SpeakerVocab::from_names(self.speakers.iter().cloned())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("manifest serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::config(format!("malformed manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }
}

/// Utterances held in memory in normalized units, with their manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    vocab: SpeakerVocab,
    utterances: Vec<MelUtterance>,
}

impl Dataset {
    /// Builds a dataset from raw log-mel utterances, fitting normalization
    /// over all of them.
    pub fn from_utterances(
        raw: Vec<MelUtterance>,
        vocab: SpeakerVocab,
        mel_params: MelParams,
        segment_frames: usize,
    ) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::invalid("dataset has no utterances"));
        }
        let normalization = Normalization::fit(mel_params.log_floor, raw.iter().map(|u| &u.mel))?;
        Self::with_normalization(raw, vocab, mel_params, segment_frames, normalization)
    }

    /// Like [`Dataset::from_utterances`] but reuses existing statistics, e.g.
    /// those of a training corpus.
    pub fn with_normalization(
        raw: Vec<MelUtterance>,
        vocab: SpeakerVocab,
        mel_params: MelParams,
        segment_frames: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::invalid("dataset has no utterances"));
        }
        if segment_frames == 0 {
            return Err(Error::config("segment length must be at least one frame"));
        }
        let mut entries = Vec::with_capacity(raw.len());
        let mut segments = Vec::new();
        let mut utterances = Vec::with_capacity(raw.len());
        for (i, u) in raw.into_iter().enumerate() {
            vocab.check(u.speaker)?;
            let f = u.frames();
            for s in 0..f.div_ceil(segment_frames) {
                let start = s * segment_frames;
                segments.push(SegmentRef {
                    utterance: i,
                    start,
                    pad: (start + segment_frames).saturating_sub(f),
                });
            }
            entries.push(UtteranceEntry {
                file: format!("{FEATURE_DIR}/{i:05}.mel"),
                id: u.source_id.clone(),
                speaker: vocab.name(u.speaker).expect("checked").to_string(),
                frames: f,
            });
            utterances.push(MelUtterance {
                mel: normalization.normalize(&u.mel),
                ..u
            });
        }
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            segment_frames,
            speakers: vocab.names().to_vec(),
            mel_params,
            normalization,
            utterances: entries,
            segments,
        };
        Ok(Dataset {
            manifest,
            vocab,
            utterances,
        })
    }

    pub fn vocab(&self) -> &SpeakerVocab {
        &self.vocab
    }

    pub fn normalization(&self) -> &Normalization {
        &self.manifest.normalization
    }

    pub fn segment_frames(&self) -> usize {
        self.manifest.segment_frames
    }

    /// Normalized utterances.
    pub fn utterances(&self) -> &[MelUtterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.manifest.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.segments.is_empty()
    }

    pub fn segment(&self, i: usize) -> MelSegment {
        let r = self.manifest.segments[i];
        let u = &self.utterances[r.utterance];
        MelSegment {
            mel: u.mel.window_edge_padded(r.start, self.manifest.segment_frames),
            speaker: u.speaker,
        }
    }

    /// All segments in manifest order, in normalized units.
    pub fn segments(&self) -> Vec<MelSegment> {
        (0..self.len()).map(|i| self.segment(i)).collect()
    }

    /// Keeps only the listed utterances (normalization is left unchanged).
    pub fn subset(&self, utterance_indices: &[usize]) -> Result<Dataset> {
        let raw = utterance_indices
            .iter()
            .map(|&i| {
                let u = self
                    .utterances
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("utterance index {i} out of range")))?;
                Ok(MelUtterance {
                    mel: self.normalization().denormalize(&u.mel),
                    ..u.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut d = Dataset::with_normalization(
            raw,
            self.vocab.clone(),
            self.manifest.mel_params.clone(),
            self.segment_frames(),
            *self.normalization(),
        )?;
        // keep values bit-identical to the parent rather than re-normalized
        for (dst, &i) in d.utterances.iter_mut().zip(utterance_indices) {
            dst.mel = self.utterances[i].mel.clone();
        }
        Ok(d)
    }

    /// Writes `manifest.toml` and one feature file per utterance (log-mel,
    /// not normalized) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let feat_dir = dir.join(FEATURE_DIR);
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        for (entry, u) in self.manifest.utterances.iter().zip(&self.utterances) {
            let raw = self.normalization().denormalize(&u.mel);
            format::write(&dir.join(&entry.file), &raw, Some(u.speaker))?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a dataset from a manifest file or its directory.
    pub fn load(path: &Path) -> Result<Dataset> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest = DatasetManifest::from_toml(&text)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let vocab = manifest.vocab()?;
        let mut utterances = Vec::with_capacity(manifest.utterances.len());
        for entry in &manifest.utterances {
            let speaker = vocab
                .id(&entry.speaker)
                .ok_or_else(|| Error::Integrity(format!("utterance {} has unknown speaker", entry.id)))?;
            let (mel, file_speaker) = format::read(&base.join(&entry.file))?;
            if mel.frames() != entry.frames || file_speaker.is_some_and(|s| s != speaker) {
                return Err(Error::Integrity(format!(
                    "feature file {} disagrees with the manifest",
                    entry.file
                )));
            }
            utterances.push(MelUtterance {
                mel: manifest.normalization.normalize(&mel),
                speaker,
                source_id: entry.id.clone(),
            });
        }
        for r in &manifest.segments {
            let ok = manifest
                .utterances
                .get(r.utterance)
                .is_some_and(|u| r.start < u.frames && r.start + manifest.segment_frames - r.pad == u.frames.min(r.start + manifest.segment_frames));
            if !ok {
                return Err(Error::Integrity(format!("bad segment reference {r:?}")));
            }
        }
        if manifest.segments.is_empty() {
            return Err(Error::Integrity("manifest lists no segments".into()));
        }
        Ok(Dataset {
            manifest,
            vocab,
            utterances,
        })
    }
}

/// Reads a WAV file and averages its channels. Integer formats are scaled
/// to `[-1, 1)`.
pub fn read_wav_mono(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let bad = |e: hound::Error| Error::invalid(format!("corrupt audio in {}: {e}", path.display()));
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.into_samples::<f32>().collect::<std::result::Result<_, _>>().map_err(bad)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(bad)?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / c.len() as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Scans `root/<speaker>/*.wav`, extracts features and segments them.
///
/// Speakers and files are visited in sorted order so ids and manifests are
/// reproducible. Unreadable audio is skipped with a warning.
pub fn build_dataset(root: &Path, params: &MelParams, segment_frames: usize) -> Result<Dataset> {
    params.validate()?;
    let speaker_dirs = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect::<Vec<_>>();
    let mut per_speaker = Vec::new();
    for dir in &speaker_dirs {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid(format!("speaker directory {} is not UTF-8", dir.display())))?
            .to_string();
        let wavs: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        per_speaker.push((name, wavs));
    }
    per_speaker.retain(|(_, w)| !w.is_empty());
    if per_speaker.is_empty() {
        return Err(Error::invalid(format!("no audio found under {}", root.display())));
    }
    let vocab = SpeakerVocab::from_names(per_speaker.iter().map(|(n, _)| n.clone()))?;
    if vocab.len() < 2 {
        warn!("corpus has a single speaker; training works but conversion needs at least two");
    }

    let mut raw = Vec::new();
    for (name, wavs) in &per_speaker {
        let speaker = vocab.id(name).expect("vocab built from these names");
        for wav in wavs {
            let (samples, sr) = match read_wav_mono(wav) {
                Ok(v) => v,
                Err(e) => {
                    warn!("skipping {}: {e}", wav.display());
                    continue;
                }
            };
            if samples.is_empty() {
                warn!("skipping {}: no samples", wav.display());
                continue;
            }
            let id = format!(
                "{name}/{}",
                wav.file_stem().and_then(|s| s.to_str()).unwrap_or("utt")
            );
            raw.push(extract_mel(&samples, sr, params, speaker, id)?);
        }
    }
    if raw.is_empty() {
        return Err(Error::invalid(format!("no readable audio under {}", root.display())));
    }
    let d = Dataset::from_utterances(raw, vocab, params.clone(), segment_frames)?;
    info!(
        "dataset: {} utterances, {} segments, {} speakers",
        d.utterances.len(),
        d.len(),
        d.vocab.len()
    );
    Ok(d)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Number of segments an utterance of `frames` frames produces.
pub fn segment_count(frames: usize, segment_frames: usize) -> usize {
    frames.div_ceil(segment_frames)
}

/// Segments and speaker ids of a raw utterance after normalization.
pub fn normalized_segments(
    u: &MelUtterance,
    norm: &Normalization,
    segment_frames: usize,
) -> Result<(Vec<MelSegment>, Vec<usize>)> {
    let n = MelUtterance {
        mel: norm.normalize(&u.mel),
        speaker: u.speaker,
        source_id: u.source_id.clone(),
    };
    let s = segment_utterance(&n, segment_frames)?;
    Ok((s.segments, s.pad_lengths))
}
