//! Binary feature files.
//!
//! One utterance (or converted output) per file, little-endian throughout:
//!
//! | offset | size | field                                          |
//! |-------:|-----:|------------------------------------------------|
//! | 0      | 4    | magic `b"CDMF"`                                |
//! | 4      | 2    | format version (`u16`, currently 1)            |
//! | 6      | 2    | reserved, zero                                 |
//! | 8      | 4    | mel bin count (`u32`, always 80)               |
//! | 12     | 4    | frame count `F` (`u32`, at least 1)            |
//! | 16     | 4    | speaker id (`u32`, `0xFFFF_FFFF` = unlabelled) |
//! | 20     | 4    | reserved, zero                                 |
//! | 24     | 4·80·F | `f32` values, row-major (bin, frame)         |

use std::fs;
use std::path::Path;

use super::{MelMatrix, SpeakerId, MEL_BINS};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CDMF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const UNLABELLED: u32 = u32::MAX;

pub fn encode(mel: &MelMatrix, speaker: Option<SpeakerId>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * mel.data().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(MEL_BINS as u32).to_le_bytes());
    out.extend_from_slice(&(mel.frames() as u32).to_le_bytes());
    out.extend_from_slice(&speaker.map_or(UNLABELLED, |s| s.0).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in mel.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(MelMatrix, Option<SpeakerId>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Integrity(format!(
            "feature file too short for header ({} bytes)",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::invalid("not a feature file (bad magic)"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: u32::from(version),
            expected: u32::from(VERSION),
        });
    }
    let bins = u32_at(8) as usize;
    if bins != MEL_BINS {
        return Err(Error::invalid(format!("feature file has {bins} mel bins, expected {MEL_BINS}")));
    }
    let frames = u32_at(12) as usize;
    let speaker = match u32_at(16) {
        UNLABELLED => None,
        id => Some(SpeakerId(id)),
    };
    let expected = HEADER_LEN + 4 * bins * frames;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "feature file length {} does not match header ({} expected)",
            bytes.len(),
            expected
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((MelMatrix::new(frames, data)?, speaker))
}

pub fn write(path: &Path, mel: &MelMatrix, speaker: Option<SpeakerId>) -> Result<()> {
    fs::write(path, encode(mel, speaker)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(MelMatrix, Option<SpeakerId>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MelMatrix {
        MelMatrix::new(3, (0..240).map(|i| i as f32 * 0.5 - 7.0).collect()).unwrap()
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&sample(), Some(SpeakerId(5)));
        assert_eq!(&bytes[0..4], b"CDMF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[80, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[5, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &[0, 0, 0, 0]);
        assert_eq!(&bytes[24..28], &(-7.0f32).to_le_bytes());
        // second value of the first row is frame 1 of bin 0
        assert_eq!(&bytes[28..32], &(-6.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 24 + 240 * 4);
    }

    #[test]
    fn decode_round_trips_and_validates() {
        let m = sample();
        let bytes = encode(&m, None);
        assert_eq!(decode(&bytes).unwrap(), (m, None));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Integrity(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::UnsupportedVersion { found: 9, .. })));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::InvalidInput(_))));
    }
}
