//! RIFF/WAVE decoding into mono [`AudioClip`]s.

use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

const PCM16_SCALE: f32 = 1.0 / 32768.0;

/// Sample encodings accepted by [`decode_wav`] and produced by [`encode_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Decodes a PCM16 or float32 WAV file with one or two channels.
///
/// Stereo frames are averaged into a single channel. The header sample rate
/// is kept as is; resampling is a separate step.
pub fn decode_wav(bytes: &[u8], source_id: &str) -> Result<AudioClip> {
    let reader = WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    let encoding = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => WavEncoding::Pcm16,
        (SampleFormat::Float, 32) => WavEncoding::Float32,
        (fmt, bits) => return Err(Error::UnsupportedFormat(format!("{bits}-bit {fmt:?} samples"))),
    };
    if !(1..=2).contains(&spec.channels) {
        return Err(Error::UnsupportedFormat(format!("{} channels", spec.channels)));
    }
    if spec.sample_rate == 0 {
        return Err(Error::Decode("sample rate is zero".into()));
    }

    let interleaved: Vec<f32> = match encoding {
        WavEncoding::Pcm16 => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 * PCM16_SCALE))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        WavEncoding::Float32 => {
            let raw = reader.into_samples::<f32>().collect::<std::result::Result<Vec<_>, _>>().map_err(map_hound)?;
            if raw.iter().any(|v| !v.is_finite()) {
                return Err(Error::Decode("non-finite float sample".into()));
            }
            raw.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect()
        }
    };

    let channels = spec.channels as usize;
    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(channels).map(|frame| frame.iter().sum::<f32>() / channels as f32).collect()
    };
    if samples.is_empty() {
        return Err(Error::Decode("no sample frames".into()));
    }
    Ok(AudioClip { samples, sample_rate: spec.sample_rate, source_id: source_id.to_string() })
}

/// Reads and decodes a WAV file; the file stem becomes the clip id.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_wav(&bytes, &id)
}

/// Serializes a mono clip as a WAV file in memory.
pub fn encode_wav(clip: &AudioClip, encoding: WavEncoding) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer = WavWriter::new(&mut buf, spec).map_err(map_hound)?;
        for &s in &clip.samples {
            match encoding {
                WavEncoding::Pcm16 => {
                    let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v).map_err(map_hound)?;
                }
                WavEncoding::Float32 => writer.write_sample(s).map_err(map_hound)?,
            }
        }
        writer.finalize().map_err(map_hound)?;
    }
    Ok(buf.into_inner())
}

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::Unsupported => Error::UnsupportedFormat("encoding not supported".into()),
        hound::Error::IoError(e) => Error::Decode(e.to_string()),
        other => Error::Decode(other.to_string()),
    }
}
