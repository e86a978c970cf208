//! Mel feature files: a JSON header next to a raw little-endian f32 sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AudioError, MelSpectrogram, LOG_FLOOR};

pub const LOG_CONVENTION: &str = "natural_log_amplitude_floor_1e-5";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelHeader {
    pub n_frames: usize,
    pub n_mels: usize,
    pub hop: usize,
    pub frame_length: usize,
    pub sample_rate: u32,
    pub log_convention: String,
    pub log_floor: f64,
    /// File name of the sidecar, relative to the header.
    pub data: String,
}

fn sidecar_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("f32")
}

/// Writes `<path>` (JSON header) and the same path with extension `.f32`
/// holding the values row-major.
pub fn write_mel(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<(), AudioError> {
    let path = path.as_ref();
    let data_path = sidecar_path(path);
    let header = MelHeader {
        n_frames: mel.n_frames(),
        n_mels: mel.n_mels(),
        hop: mel.frame_hop(),
        frame_length: mel.frame_length(),
        sample_rate: mel.sample_rate(),
        log_convention: LOG_CONVENTION.into(),
        log_floor: LOG_FLOOR,
        data: data_path.file_name().expect("sidecar has a file name").to_string_lossy().into_owned(),
    };
    let bytes: Vec<u8> = mel.values().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(&data_path, bytes)?;
    let json = serde_json::to_string_pretty(&header).map_err(|e| AudioError::MalformedMel(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_mel(path: impl AsRef<Path>) -> Result<MelSpectrogram, AudioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let header: MelHeader = serde_json::from_str(&text).map_err(|e| AudioError::MalformedMel(e.to_string()))?;
    if header.log_convention != LOG_CONVENTION {
        return Err(AudioError::MalformedMel(format!("unknown log convention {:?}", header.log_convention)));
    }
    let data_path = path.parent().unwrap_or(Path::new(".")).join(&header.data);
    let bytes = std::fs::read(&data_path)?;
    let expected = header.n_frames * header.n_mels * 4;
    if bytes.len() != expected {
        return Err(AudioError::MalformedMel(format!("sidecar holds {} bytes, header implies {expected}", bytes.len())));
    }
    let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    MelSpectrogram::new(values, header.n_mels, header.hop, header.frame_length, header.sample_rate)
        .map_err(|e| AudioError::MalformedMel(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{mel_spectrogram, AudioClip};

    #[test]
    fn round_trip_at_f32_precision() {
        let s: Vec<f64> = (0..6000).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect();
        let mel = mel_spectrogram(&AudioClip::new(s, 22050).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("utt.json");
        write_mel(&path, &mel).unwrap();
        assert!(dir.path().join("utt.f32").exists());
        let back = read_mel(&path).unwrap();
        assert_eq!(back.n_frames(), mel.n_frames());
        assert_eq!(back.frame_hop(), 256);
        for (a, b) in mel.values().iter().zip(back.values()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn truncated_sidecar_is_rejected() {
        let mel = MelSpectrogram::new(vec![0.0; 160], 80, 256, 1024, 22050).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        write_mel(&path, &mel).unwrap();
        std::fs::write(dir.path().join("a.f32"), [0u8; 10]).unwrap();
        assert!(matches!(read_mel(&path), Err(AudioError::MalformedMel(_))));
    }
}
