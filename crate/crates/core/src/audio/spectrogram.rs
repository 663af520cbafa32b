use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::{
    build_mel_filterbank, AudioClip, MelFilterbank, FFT_LEN, FRAME_HOP, FRAME_LEN, LOG_OFFSET, MEL_FMAX_HZ,
    MEL_FMIN_HZ, NUM_MEL_BANDS, PATCH_FRAMES, TARGET_SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Natural-log mel energies, `num_frames` rows of 64 bands.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    /// Row-major `[num_frames, 64]`.
    pub frames: Vec<f32>,
    pub frame_hop_s: f64,
    pub frame_len_s: f64,
}

impl LogMelSpectrogram {
    pub fn from_frames(frames: Vec<f32>) -> Result<Self> {
        if frames.is_empty() || !frames.len().is_multiple_of(NUM_MEL_BANDS) {
            return Err(Error::Shape(format!("{} values do not form whole {NUM_MEL_BANDS}-band frames", frames.len())));
        }
        Ok(Self {
            frames,
            frame_hop_s: FRAME_HOP as f64 / TARGET_SAMPLE_RATE as f64,
            frame_len_s: FRAME_LEN as f64 / TARGET_SAMPLE_RATE as f64,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / NUM_MEL_BANDS
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * NUM_MEL_BANDS..(t + 1) * NUM_MEL_BANDS]
    }

    /// `[frames, 64]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_frames(), NUM_MEL_BANDS], self.frames.clone())
            .expect("frame buffer is a whole number of rows")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] != NUM_MEL_BANDS {
            return Err(Error::Shape(format!("log-mel tensor must be [frames, {NUM_MEL_BANDS}], got {:?}", t.shape())));
        }
        Self::from_frames(t.data().to_vec())
    }
}

/// A 96 × 64 window of a spectrogram, the network's input unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelPatch {
    values: Vec<f32>,
    /// Start time of the first frame in the source clip, seconds.
    pub origin_s: f64,
}

impl LogMelPatch {
    pub fn new(values: Vec<f32>, origin_s: f64) -> Result<Self> {
        if values.len() != PATCH_FRAMES * NUM_MEL_BANDS {
            return Err(Error::Shape(format!(
                "patch must hold {PATCH_FRAMES}x{NUM_MEL_BANDS} values, got {}",
                values.len()
            )));
        }
        Ok(Self { values, origin_s })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `[1, 96, 64]` network input.
    pub fn to_input(&self) -> Tensor {
        Tensor::new(vec![1, PATCH_FRAMES, NUM_MEL_BANDS], self.values.clone())
            .expect("patch size checked at construction")
    }
}

/// Reusable STFT + mel state for the 16 kHz front end.
pub struct LogMelFrontend {
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Default for LogMelFrontend {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMelFrontend {
    pub fn new() -> Self {
        let filterbank =
            build_mel_filterbank(FFT_LEN / 2 + 1, NUM_MEL_BANDS, MEL_FMIN_HZ, MEL_FMAX_HZ, TARGET_SAMPLE_RATE)
                .expect("front-end constants form a valid filterbank");
        // Periodic Hann: denominator N, not N - 1.
        let window = (0..FRAME_LEN).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / FRAME_LEN as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(FFT_LEN);
        Self { filterbank, window, fft }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Hann-weighted copy of the `FRAME_LEN` samples starting at `start`.
    pub fn windowed_frame(&self, samples: &[f32], start: usize) -> Vec<f64> {
        samples[start..start + FRAME_LEN].iter().zip(&self.window).map(|(&s, w)| s as f64 * w).collect()
    }

    /// Full `FFT_LEN`-point spectrum of a windowed frame, zero padded.
    pub fn frame_spectrum(&self, windowed: &[f64]) -> Vec<Complex<f64>> {
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
        for (slot, &v) in buf.iter_mut().zip(windowed) {
            slot.re = v;
        }
        self.fft.process(&mut buf);
        buf
    }

    pub fn spectrogram(&self, clip: &AudioClip) -> Result<LogMelSpectrogram> {
        if clip.sample_rate != TARGET_SAMPLE_RATE {
            return Err(Error::Config(format!(
                "log-mel input must be {TARGET_SAMPLE_RATE} Hz, got {} Hz",
                clip.sample_rate
            )));
        }
        let n = clip.samples.len();
        if n < FRAME_LEN {
            return Err(Error::TooShort(format!("{n} samples, need at least {FRAME_LEN}")));
        }
        let num_frames = 1 + (n - FRAME_LEN) / FRAME_HOP;
        let bins = FFT_LEN / 2 + 1;
        let mut frames = Vec::with_capacity(num_frames * NUM_MEL_BANDS);
        let mut power = vec![0.0; bins];
        let mut mel = vec![0.0; NUM_MEL_BANDS];
        for t in 0..num_frames {
            let spectrum = self.frame_spectrum(&self.windowed_frame(&clip.samples, t * FRAME_HOP));
            for (p, c) in power.iter_mut().zip(&spectrum[..bins]) {
                *p = c.norm_sqr();
            }
            self.filterbank.apply(&power, &mut mel);
            frames.extend(mel.iter().map(|&e| (e + LOG_OFFSET).ln() as f32));
        }
        LogMelSpectrogram::from_frames(frames)
    }
}

/// One-shot log-mel spectrogram of a 16 kHz clip.
pub fn log_mel_spectrogram(clip: &AudioClip) -> Result<LogMelSpectrogram> {
    LogMelFrontend::new().spectrogram(clip)
}

/// Slices 96-frame patches every `hop_frames` frames; a trailing remainder
/// shorter than a patch is dropped.
///
/// With `pad` set, a spectrogram shorter than one patch is extended by
/// repeating its last frame and yields exactly one patch.
pub fn extract_patches(spec: &LogMelSpectrogram, hop_frames: usize, pad: bool) -> Result<Vec<LogMelPatch>> {
    if hop_frames == 0 {
        return Err(Error::Config("patch hop must be at least one frame".into()));
    }
    let frames = spec.num_frames();
    if frames < PATCH_FRAMES {
        if !pad {
            return Err(Error::TooShort(format!("{frames} frames, need {PATCH_FRAMES} for one patch")));
        }
        let mut values = spec.frames.clone();
        let last = spec.frame(frames - 1).to_vec();
        for _ in frames..PATCH_FRAMES {
            values.extend_from_slice(&last);
        }
        return Ok(vec![LogMelPatch::new(values, 0.0)?]);
    }
    let count = (frames - PATCH_FRAMES) / hop_frames + 1;
    (0..count)
        .map(|i| {
            let start = i * hop_frames;
            LogMelPatch::new(
                spec.frames[start * NUM_MEL_BANDS..(start + PATCH_FRAMES) * NUM_MEL_BANDS].to_vec(),
                start as f64 * spec.frame_hop_s,
            )
        })
        .collect()
}
