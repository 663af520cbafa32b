use crate::error::{Error, Result};

const MEL_BREAK_HZ: f64 = 700.0;
const MEL_HIGH_Q: f64 = 1127.0;

/// HTK mel scale, `1127 ln(1 + f/700)`.
pub fn hz_to_mel(hz: f64) -> Result<f64> {
    if !hz.is_finite() || hz < 0.0 {
        return Err(Error::Domain(format!("frequency must be finite and >= 0, got {hz}")));
    }
    Ok(MEL_HIGH_Q * (hz / MEL_BREAK_HZ).ln_1p())
}

/// Inverse of [`hz_to_mel`].
pub fn mel_to_hz(mel: f64) -> Result<f64> {
    if !mel.is_finite() || mel < 0.0 {
        return Err(Error::Domain(format!("mel value must be finite and >= 0, got {mel}")));
    }
    Ok(MEL_BREAK_HZ * (mel / MEL_HIGH_Q).exp_m1())
}

/// Triangular mel filters over the non-negative half of an FFT spectrum.
///
/// `weights` is row-major `[num_bands, num_fft_bins]`. Triangle apexes have
/// height 1.0; FFT bins rarely land on an apex exactly, so observed row
/// maxima are usually a little below it.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub num_bands: usize,
    pub num_fft_bins: usize,
    pub weights: Vec<f64>,
    /// `num_bands + 2` corner frequencies in Hz, equally spaced in mel.
    pub corners_hz: Vec<f64>,
    pub bin_hz: f64,
}

impl MelFilterbank {
    pub fn row(&self, band: usize) -> &[f64] {
        &self.weights[band * self.num_fft_bins..(band + 1) * self.num_fft_bins]
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.corners_hz[band + 1]
    }

    /// Inclusive range of FFT bins whose frequency lies within the band's
    /// lower and upper corner.
    pub fn band_support(&self, band: usize) -> (usize, usize) {
        let lo = self.corners_hz[band];
        let hi = self.corners_hz[band + 2];
        let first = (0..self.num_fft_bins).find(|&k| k as f64 * self.bin_hz >= lo).unwrap_or(self.num_fft_bins);
        let last = (0..self.num_fft_bins).rev().find(|&k| k as f64 * self.bin_hz <= hi).unwrap_or(0);
        (first, last)
    }

    /// Multiplies a power spectrum of `num_fft_bins` values by the filters.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.num_fft_bins);
        for (band, slot) in out.iter_mut().enumerate().take(self.num_bands) {
            *slot = self.row(band).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Builds `num_bands` triangular filters between `fmin` and `fmax` for a
/// spectrum of `num_fft_bins` bins spanning 0 Hz to `sample_rate / 2`.
pub fn build_mel_filterbank(
    num_fft_bins: usize,
    num_bands: usize,
    fmin: f64,
    fmax: f64,
    sample_rate: u32,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if num_bands == 0 {
        return Err(Error::Config("need at least one mel band".into()));
    }
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(Error::Config(format!("need 0 <= fmin < fmax <= {nyquist} Hz, got {fmin}..{fmax}")));
    }
    if num_fft_bins < 2 {
        return Err(Error::Config("need at least two FFT bins".into()));
    }

    let bin_hz = nyquist / (num_fft_bins - 1) as f64;
    let mel_lo = hz_to_mel(fmin)?;
    let mel_hi = hz_to_mel(fmax)?;
    let step = (mel_hi - mel_lo) / (num_bands + 1) as f64;
    let corners_mel: Vec<f64> = (0..num_bands + 2).map(|i| mel_lo + step * i as f64).collect();
    let bin_mel: Vec<f64> = (0..num_fft_bins).map(|k| hz_to_mel(k as f64 * bin_hz)).collect::<Result<_>>()?;

    let mut weights = vec![0.0; num_bands * num_fft_bins];
    for band in 0..num_bands {
        let (lo, center, hi) = (corners_mel[band], corners_mel[band + 1], corners_mel[band + 2]);
        let row = &mut weights[band * num_fft_bins..(band + 1) * num_fft_bins];
        // Bin 0 (DC) never contributes.
        for (k, w) in row.iter_mut().enumerate().skip(1) {
            let rising = (bin_mel[k] - lo) / (center - lo);
            let falling = (hi - bin_mel[k]) / (hi - center);
            *w = rising.min(falling).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "{num_fft_bins} FFT bins cannot resolve mel band {band} ({:.1}..{:.1} Hz)",
                mel_to_hz(lo)?,
                mel_to_hz(hi)?
            )));
        }
    }

    let corners_hz = corners_mel.iter().map(|&m| mel_to_hz(m)).collect::<Result<_>>()?;
    Ok(MelFilterbank { num_bands, num_fft_bins, weights, corners_hz, bin_hz })
}
