use std::f64::consts::PI;

use ndarray::Array2;

use super::framing::{fft_size_for, frame_signal, power_spectrum};
use super::{AudioSignal, FeatureKind, FrontendConfig};
use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-10;

pub fn mel_scale(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn inverse_mel(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular filters equally spaced on the mel scale between the cutoffs.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// num_bins x (fft_size / 2 + 1)
    pub weights: Array2<f64>,
    pub center_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(num_bins: usize, fft_size: usize, sample_rate: u32, low_hz: f64, high_hz: f64) -> Self {
        let low = mel_scale(low_hz);
        let high = mel_scale(high_hz);
        let delta = (high - low) / (num_bins + 1) as f64;
        let fft_bins = fft_size / 2 + 1;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut weights = Array2::zeros((num_bins, fft_bins));
        let mut center_hz = Vec::with_capacity(num_bins);
        for m in 0..num_bins {
            let left = low + m as f64 * delta;
            let center = left + delta;
            let right = center + delta;
            center_hz.push(inverse_mel(center));
            for k in 0..fft_bins {
                let mel = mel_scale(k as f64 * bin_hz);
                let w = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                weights[[m, k]] = w;
            }
        }
        MelFilterbank { weights, center_hz }
    }

    pub fn for_config(config: &FrontendConfig, sample_rate: u32) -> Self {
        let fft_size = fft_size_for(config.frame_samples(sample_rate));
        MelFilterbank::new(
            config.num_mel_bins,
            fft_size,
            sample_rate,
            config.low_cutoff_hz,
            config.resolved_high_cutoff(sample_rate),
        )
    }
}

pub fn mel_center_frequencies(config: &FrontendConfig, sample_rate: u32) -> Vec<f64> {
    MelFilterbank::for_config(config, sample_rate).center_hz
}

/// Orthonormal DCT-II basis, `num_ceps` rows by `num_bins` columns.
pub fn dct_matrix(num_ceps: usize, num_bins: usize) -> Array2<f64> {
    let n = num_bins as f64;
    Array2::from_shape_fn((num_ceps, num_bins), |(i, m)| {
        let scale = if i == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (PI * i as f64 * (m as f64 + 0.5) / n).cos()
    })
}

/// Floored log mel filterbank energies, frames x bins.
pub fn log_mel_energies(signal: &AudioSignal, config: &FrontendConfig) -> Result<Array2<f64>> {
    let frames = frame_signal(signal, config)?;
    let fft_size = fft_size_for(frames.ncols());
    let power = power_spectrum(&frames, fft_size);
    let bank = MelFilterbank::for_config(config, signal.sample_rate);
    let mut energies = power.dot(&bank.weights.t());
    energies.mapv_inplace(|e| e.max(LOG_FLOOR).ln());
    Ok(energies)
}

pub fn mfcc(signal: &AudioSignal, config: &FrontendConfig) -> Result<Array2<f64>> {
    if !matches!(config.feature_kind, FeatureKind::Mfcc | FeatureKind::MfccHires) {
        return Err(Error::Config(format!(
            "mfcc called with feature kind {:?}",
            config.feature_kind
        )));
    }
    let log_mel = log_mel_energies(signal, config)?;
    let dct = dct_matrix(config.num_ceps, config.num_mel_bins);
    Ok(log_mel.dot(&dct.t()))
}
