//! Perceptual linear prediction: Bark-scale critical-band integration,
//! equal-loudness pre-emphasis, cube-root compression, an all-pole fit by
//! Levinson-Durbin and conversion of the predictor to cepstra.

use std::f64::consts::PI;

use ndarray::Array2;

use super::framing::{fft_size_for, frame_signal, power_spectrum};
use super::{AudioSignal, FeatureKind, FrontendConfig};
use crate::error::{Error, Result};

const BAND_FLOOR: f64 = 1e-10;

pub fn bark_scale(hz: f64) -> f64 {
    6.0 * (hz / 600.0).asinh()
}

/// Equal-loudness weight at `hz` (approximate 40 dB curve).
pub fn equal_loudness(hz: f64) -> f64 {
    let w2 = (2.0 * PI * hz).powi(2);
    (w2 + 56.8e6) * w2 * w2 / ((w2 + 6.3e6).powi(2) * (w2 + 0.38e9))
}

/// Critical-band masking curve as a function of Bark distance from the band
/// center.
fn critical_band(dz: f64) -> f64 {
    if !(-1.3..=2.5).contains(&dz) {
        0.0
    } else if dz < -0.5 {
        10f64.powf(2.5 * (dz + 0.5))
    } else if dz <= 0.5 {
        1.0
    } else {
        10f64.powf(-(dz - 0.5))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpcFit {
    /// a_1..a_p of A(z) = 1 + sum_k a_k z^-k
    pub coeffs: Vec<f64>,
    pub reflection: Vec<f64>,
    /// Final prediction error power.
    pub error: f64,
}

/// Solves the Yule-Walker equations for autocorrelation `r[0..=order]`.
/// Returns `None` when the Toeplitz system is numerically singular.
pub fn levinson_durbin(r: &[f64], order: usize) -> Option<LpcFit> {
    if r.len() <= order || !(r[0] > 0.0) || r.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut a = vec![0.0; order];
    let mut reflection = Vec::with_capacity(order);
    let mut err = r[0];
    for i in 1..=order {
        let mut acc = r[i];
        for j in 1..i {
            acc += a[j - 1] * r[i - j];
        }
        let k = -acc / err;
        let prev = a.clone();
        for j in 1..i {
            a[j - 1] = prev[j - 1] + k * prev[i - j - 1];
        }
        a[i - 1] = k;
        reflection.push(k);
        err *= 1.0 - k * k;
        if !(err > r[0] * 1e-12) {
            return None;
        }
    }
    Some(LpcFit {
        coeffs: a,
        reflection,
        error: err,
    })
}

/// Cepstrum of the all-pole model `error / |A(e^jw)|^2`; `c[0] = ln(error)`.
pub fn cepstra_from_lpc(coeffs: &[f64], error: f64, num_ceps: usize) -> Vec<f64> {
    let p = coeffs.len();
    let mut c = vec![0.0; num_ceps];
    if num_ceps == 0 {
        return c;
    }
    c[0] = error.ln();
    for n in 1..num_ceps {
        let mut acc = if n <= p { -coeffs[n - 1] } else { 0.0 };
        for k in 1..n {
            let idx = n - k;
            if idx <= p {
                acc -= (k as f64 / n as f64) * c[k] * coeffs[idx - 1];
            }
        }
        c[n] = acc;
    }
    c
}

/// Autocorrelation of an even spectrum sampled at the band midpoints of
/// [0, pi]; positive semi-definite whenever the spectrum is nonnegative.
fn autocorrelation(spectrum: &[f64], lags: usize) -> Vec<f64> {
    let m = spectrum.len() as f64;
    (0..=lags)
        .map(|j| {
            spectrum
                .iter()
                .enumerate()
                .map(|(i, &p)| p * (j as f64 * PI * (i as f64 + 0.5) / m).cos())
                .sum::<f64>()
                / m
        })
        .collect()
}

/// PLP cepstra (order + 1 values) from a compressed auditory spectrum.
pub fn plp_from_auditory_spectrum(spectrum: &[f64], order: usize) -> Option<Vec<f64>> {
    let r = autocorrelation(spectrum, order);
    let fit = levinson_durbin(&r, order)?;
    Some(cepstra_from_lpc(&fit.coeffs, fit.error, order + 1))
}

struct PlpAnalyzer {
    /// bands x fft bins
    band_weights: Array2<f64>,
    loudness: Vec<f64>,
    order: usize,
}

impl PlpAnalyzer {
    fn new(config: &FrontendConfig, sample_rate: u32) -> Self {
        let fft_size = fft_size_for(config.frame_samples(sample_rate));
        let bins = fft_size / 2 + 1;
        let bands = config.num_mel_bins;
        let low_hz = config.low_cutoff_hz;
        let high_hz = config.resolved_high_cutoff(sample_rate);
        let low = bark_scale(low_hz);
        let high = bark_scale(high_hz);
        let step = (high - low) / (bands + 1) as f64;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut band_weights = Array2::zeros((bands, bins));
        let mut loudness = Vec::with_capacity(bands);
        for b in 0..bands {
            let center = low + (b + 1) as f64 * step;
            let center_hz = 600.0 * (center / 6.0).sinh();
            loudness.push(equal_loudness(center_hz));
            for k in 0..bins {
                let hz = k as f64 * bin_hz;
                if hz < low_hz || hz > high_hz {
                    continue;
                }
                band_weights[[b, k]] = critical_band(bark_scale(hz) - center);
            }
        }
        PlpAnalyzer {
            band_weights,
            loudness,
            order: config.plp_order,
        }
    }

    fn auditory_spectrum(&self, power: &Array2<f64>) -> Array2<f64> {
        let mut bands = power.dot(&self.band_weights.t());
        for mut row in bands.rows_mut() {
            for (v, w) in row.iter_mut().zip(&self.loudness) {
                *v = (*v * w).max(BAND_FLOOR).cbrt();
            }
        }
        bands
    }

    fn cepstra(&self, power: &Array2<f64>) -> Result<Array2<f64>> {
        let auditory = self.auditory_spectrum(power);
        let mut out = Array2::zeros((power.nrows(), self.order + 1));
        for (t, (row, mut dst)) in auditory.rows().into_iter().zip(out.rows_mut()).enumerate() {
            let spectrum: Vec<f64> = row.to_vec();
            let ceps = plp_from_auditory_spectrum(&spectrum, self.order)
                .ok_or(Error::DegenerateFrame { index: t })?;
            dst.iter_mut().zip(ceps).for_each(|(d, c)| *d = c);
        }
        Ok(out)
    }
}

/// PLP cepstra for power-spectrum rows (fft_size / 2 + 1 bins each).
pub fn plp_from_power_spectrum(
    power: &Array2<f64>,
    config: &FrontendConfig,
    sample_rate: u32,
) -> Result<Array2<f64>> {
    config.validate(sample_rate)?;
    let analyzer = PlpAnalyzer::new(config, sample_rate);
    if power.ncols() != analyzer.band_weights.ncols() {
        return Err(Error::shape(
            format!("{} spectrum bins", analyzer.band_weights.ncols()),
            power.ncols(),
        ));
    }
    analyzer.cepstra(power)
}

pub fn plp(signal: &AudioSignal, config: &FrontendConfig) -> Result<Array2<f64>> {
    if config.feature_kind != FeatureKind::Plp {
        return Err(Error::Config(format!(
            "plp called with feature kind {:?}",
            config.feature_kind
        )));
    }
    let frames = frame_signal(signal, config)?;
    let power = power_spectrum(&frames, fft_size_for(frames.ncols()));
    PlpAnalyzer::new(config, signal.sample_rate).cepstra(&power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Dense Gaussian elimination on the Toeplitz normal equations.
    fn yule_walker_direct(r: &[f64], p: usize) -> Vec<f64> {
        let mut m = vec![vec![0.0; p + 1]; p];
        for i in 0..p {
            for j in 0..p {
                m[i][j] = r[(i as isize - j as isize).unsigned_abs()];
            }
            m[i][p] = -r[i + 1];
        }
        for col in 0..p {
            let pivot = (col..p).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
            m.swap(col, pivot);
            for row in 0..p {
                if row != col {
                    let f = m[row][col] / m[col][col];
                    for k in col..=p {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
        }
        (0..p).map(|i| m[i][p] / m[i][i]).collect()
    }

    #[test]
    fn white_autocorrelation_has_zero_reflections() {
        let mut r = vec![0.0; 13];
        r[0] = 1.0;
        let fit = levinson_durbin(&r, 12).unwrap();
        assert!(fit.reflection.iter().all(|&k| k == 0.0));
        assert!(fit.coeffs.iter().all(|&a| a == 0.0));
        assert_eq!(fit.error, 1.0);
    }

    #[test]
    fn ar1_autocorrelation() {
        let rho: f64 = 0.8;
        let r: Vec<f64> = (0..5).map(|k| rho.powi(k)).collect();
        let fit = levinson_durbin(&r, 4).unwrap();
        assert!((fit.coeffs[0] + rho).abs() < 1e-12);
        assert!(fit.coeffs[1..].iter().all(|a| a.abs() < 1e-12));
        assert!((fit.error - (1.0 - rho * rho)).abs() < 1e-12);
    }

    #[test]
    fn levinson_matches_direct_solve() {
        let spectrum: Vec<f64> = (0..23).map(|i| 1.0 + (i as f64 * 0.7).sin().abs() * 3.0).collect();
        let r = autocorrelation(&spectrum, 12);
        let fit = levinson_durbin(&r, 12).unwrap();
        let direct = yule_walker_direct(&r, 12);
        for (a, b) in fit.coeffs.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn singular_autocorrelation_is_rejected() {
        assert!(levinson_durbin(&[0.0, 0.0, 0.0], 2).is_none());
        // a pure sinusoid is perfectly predictable at order 2
        let r: Vec<f64> = (0..4).map(|k| (0.3 * k as f64).cos()).collect();
        assert!(levinson_durbin(&r, 3).is_none());
    }

    #[test]
    fn cepstrum_of_single_pole() {
        // 1/(1 - rho z^-1) has c_n = rho^n / n
        let rho: f64 = 0.5;
        let c = cepstra_from_lpc(&[-rho], 2.0, 6);
        assert!((c[0] - 2f64.ln()).abs() < 1e-15);
        for n in 1..6 {
            assert!((c[n] - rho.powi(n as i32) / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_auditory_spectrum_gives_zero_cepstra() {
        let ceps = plp_from_auditory_spectrum(&[2.5; 23], 12).unwrap();
        assert_eq!(ceps.len(), 13);
        assert!((ceps[0] - 2.5f64.ln()).abs() < 1e-12);
        assert!(ceps[1..].iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn white_noise_matches_flat_spectrum_oracle() {
        let cfg = FrontendConfig { pre_emphasis: 0.0, ..FrontendConfig::plp() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..32000)
            .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let noise = AudioSignal::new(samples, 16000).unwrap();
        let ceps = plp(&noise, &cfg).unwrap();
        assert_eq!(ceps.ncols(), 13);
        let mean = ceps.mean_axis(ndarray::Axis(0)).unwrap();

        // Flat power spectrum pushed through the same band integration and
        // loudness weighting: the only shaping a white input should see.
        let flat = Array2::from_elem((1, 257), 1.0);
        let oracle = plp_from_power_spectrum(&flat, &cfg, 16000).unwrap();
        for i in 1..13 {
            let bound = 0.1 + 0.1 * oracle[[0, i]].abs();
            assert!(
                (mean[i] - oracle[[0, i]]).abs() < bound,
                "c{i}: {} vs oracle {}",
                mean[i],
                oracle[[0, i]]
            );
        }
    }

    #[test]
    fn zeros_give_finite_plp() {
        let zeros = AudioSignal::new(vec![0.0; 4000], 16000).unwrap();
        let ceps = plp(&zeros, &FrontendConfig::plp()).unwrap();
        assert!(ceps.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn masking_curve_shape() {
        assert_eq!(critical_band(0.0), 1.0);
        assert_eq!(critical_band(-2.0), 0.0);
        assert_eq!(critical_band(3.0), 0.0);
        assert!((critical_band(1.5) - 0.1).abs() < 1e-12);
        assert!(equal_loudness(1000.0) > equal_loudness(100.0));
    }
}
