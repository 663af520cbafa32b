use std::f64::consts::PI;

use super::{AudioClip, TARGET_SAMPLE_RATE};

/// Fraction of the target Nyquist frequency kept by the anti-alias filter.
const CUTOFF_FRACTION: f64 = 0.95;
/// Filter half-length in output sample periods.
const HALF_TAPS_PER_OUTPUT: f64 = 16.0;

/// Converts a clip to 16 kHz.
///
/// Downsampling first applies a windowed-sinc low-pass at the target
/// Nyquist frequency; both directions then interpolate linearly between
/// neighbouring source samples. Clips already at 16 kHz are returned as is.
pub fn resample_to_16k(clip: &AudioClip) -> AudioClip {
    if clip.sample_rate == TARGET_SAMPLE_RATE {
        return clip.clone();
    }
    let src_rate = clip.sample_rate as f64;
    let dst_rate = TARGET_SAMPLE_RATE as f64;
    let mut source: Vec<f64> = clip.samples.iter().map(|&s| s as f64).collect();
    if clip.sample_rate > TARGET_SAMPLE_RATE {
        source = lowpass(&source, CUTOFF_FRACTION * 0.5 * dst_rate / src_rate, src_rate / dst_rate);
    }

    let out_len = ((source.len() as f64 * dst_rate / src_rate).round() as usize).max(1);
    let step = src_rate / dst_rate;
    let last = source.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let idx = pos.floor() as usize;
            if idx >= last {
                return source[last] as f32;
            }
            let frac = pos - idx as f64;
            (source[idx] * (1.0 - frac) + source[idx + 1] * frac) as f32
        })
        .collect();

    AudioClip { samples, sample_rate: TARGET_SAMPLE_RATE, source_id: clip.source_id.clone() }
}

/// Blackman-windowed sinc low-pass with unit DC gain. `cutoff` is in cycles
/// per sample. Edges are extended by replication so constants pass unchanged.
fn lowpass(signal: &[f64], cutoff: f64, ratio: f64) -> Vec<f64> {
    let half = (HALF_TAPS_PER_OUTPUT * ratio).ceil() as isize;
    let len = (2 * half + 1) as usize;
    let mut taps: Vec<f64> = (0..len)
        .map(|i| {
            let n = i as isize - half;
            let sinc = if n == 0 { 2.0 * cutoff } else { (2.0 * PI * cutoff * n as f64).sin() / (PI * n as f64) };
            let w = i as f64 / (len - 1) as f64;
            let window = 0.42 - 0.5 * (2.0 * PI * w).cos() + 0.08 * (4.0 * PI * w).cos();
            sinc * window
        })
        .collect();
    let gain: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= gain);

    let n = signal.len() as isize;
    let at = |i: isize| signal[i.clamp(0, n - 1) as usize];
    (0..n).map(|i| taps.iter().enumerate().map(|(k, t)| t * at(i + k as isize - half)).sum()).collect()
}
