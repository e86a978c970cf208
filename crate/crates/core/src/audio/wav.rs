use std::io::{Cursor, Read, Seek};
use std::path::Path;

use super::{AudioClip, AudioError};

fn map_hound(e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("unsupported WAV format".into()),
        other => AudioError::MalformedWav(other.to_string()),
    }
}

fn read_from<R: Read + Seek>(reader: R) -> Result<AudioClip, AudioError> {
    let mut wav = hound::WavReader::new(reader).map_err(|e| match e {
        hound::Error::IoError(io) => AudioError::MalformedWav(format!("truncated header: {io}")),
        other => map_hound(other),
    })?;
    let spec = wav.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{:?} {}-bit (only 16-bit integer PCM is read)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let mut samples = Vec::with_capacity(wav.len() as usize / channels);
    for (i, s) in wav.samples::<i16>().enumerate() {
        let s = s.map_err(map_hound)?;
        if i % channels == 0 {
            samples.push(s as f64 / 32768.0);
        }
    }
    AudioClip::new(samples, spec.sample_rate)
}

/// Reads a 16-bit PCM RIFF/WAVE file. Multi-channel files yield channel 0.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let file = std::fs::File::open(path.as_ref())?;
    read_from(std::io::BufReader::new(file))
}

pub fn read_wav_bytes(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    read_from(Cursor::new(bytes))
}

/// 16-bit quantization used on write: `round(x·32768)` saturated to i16.
pub fn quantize_i16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes mono 16-bit PCM at the clip's sample rate.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for &s in clip.samples() {
        w.write_sample(quantize_i16(s)).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes(channels: u16, bits: u16, frames: &[Vec<i32>]) -> Vec<u8> {
        let spec = hound::WavSpec { channels, sample_rate: 48000, bits_per_sample: bits, sample_format: hound::SampleFormat::Int };
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
            for frame in frames {
                for &s in frame {
                    if bits == 16 {
                        w.write_sample(s as i16).unwrap();
                    } else {
                        w.write_sample(s).unwrap();
                    }
                }
            }
            w.finalize().unwrap();
        }
        buf.into_inner()
    }

    #[test]
    fn full_scale_negative_is_minus_one() {
        let clip = read_wav_bytes(&wav_bytes(1, 16, &[vec![-32768]])).unwrap();
        assert_eq!(clip.samples(), &[-1.0]);
        assert_eq!(clip.sample_rate(), 48000);
    }

    #[test]
    fn half_scale() {
        let clip = read_wav_bytes(&wav_bytes(1, 16, &[vec![16384]])).unwrap();
        assert_eq!(clip.samples(), &[0.5]);
    }

    #[test]
    fn stereo_takes_channel_zero() {
        let frames: Vec<Vec<i32>> = (0..10).map(|i| vec![i * 100, -i * 7 - 1]).collect();
        let clip = read_wav_bytes(&wav_bytes(2, 16, &frames)).unwrap();
        assert_eq!(clip.len(), 10);
        let expect: Vec<f64> = (0..10).map(|i| (i * 100) as f64 / 32768.0).collect();
        assert_eq!(clip.samples(), expect.as_slice());
    }

    #[test]
    fn rejects_24_bit_and_garbage() {
        let err = read_wav_bytes(&wav_bytes(1, 24, &[vec![1]])).unwrap_err();
        assert!(matches!(err, AudioError::UnsupportedEncoding(_)), "{err:?}");
        let err = read_wav_bytes(b"RIFF\x10\x00\x00\x00WAVEjunkjunk").unwrap_err();
        assert!(matches!(err, AudioError::MalformedWav(_)), "{err:?}");
        let err = read_wav_bytes(b"not a wav").unwrap_err();
        assert!(matches!(err, AudioError::MalformedWav(_)), "{err:?}");
    }

    #[test]
    fn write_read_is_exact_on_the_16_bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let samples: Vec<f64> = (-5..5).map(|k| k as f64 * 3277.0 / 32768.0).chain([-1.0, 32767.0 / 32768.0]).collect();
        let clip = AudioClip::new(samples, 22050).unwrap();
        write_wav(&path, &clip).unwrap();
        assert_eq!(load_wav(&path).unwrap(), clip);
    }
}
