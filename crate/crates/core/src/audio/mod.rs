//! Audio front end: WAV decoding, resampling to 16 kHz and the log-mel
//! spectrogram used as network input.
//!
//! The constants follow the VGGish convention: 25 ms Hann frames with a
//! 10 ms hop, a 512-point FFT, 64 mel bands between 125 Hz and 7500 Hz,
//! natural log with a 0.01 offset, and 96-frame (0.96 s) patches.

mod mel;
mod resample;
mod spectrogram;
mod wav;

pub use mel::{build_mel_filterbank, hz_to_mel, mel_to_hz, MelFilterbank};
pub use resample::resample_to_16k;
pub use spectrogram::{extract_patches, log_mel_spectrogram, LogMelFrontend, LogMelPatch, LogMelSpectrogram};
pub use wav::{decode_wav, encode_wav, read_wav, WavEncoding};

use crate::error::{Error, Result};

pub const TARGET_SAMPLE_RATE: u32 = 16_000;
/// Samples per analysis frame (25 ms at 16 kHz).
pub const FRAME_LEN: usize = 400;
/// Samples between frame starts (10 ms at 16 kHz).
pub const FRAME_HOP: usize = 160;
pub const FFT_LEN: usize = 512;
pub const NUM_MEL_BANDS: usize = 64;
pub const MEL_FMIN_HZ: f64 = 125.0;
pub const MEL_FMAX_HZ: f64 = 7500.0;
/// Added to mel energies before the logarithm.
pub const LOG_OFFSET: f64 = 0.01;
/// Frames per network patch (0.96 s).
pub const PATCH_FRAMES: usize = 96;

/// Identifies the front-end convention above. Weight bundles and caches
/// carry this tag so features from a different front end are rejected.
pub const FRONTEND_TAG: &str =
    "logmel/v1:sr16000,win400,hop160,fft512,hann-periodic,mel64@125-7500htk,ln(x+0.01),patch96";

/// Mono audio at a known sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain("audio samples must be finite".into()));
        }
        Ok(Self { samples, sample_rate, source_id: source_id.into() })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
