//! Procedural augmentation: additive babble, music and noise beds mixed at a
//! target SNR, and reverberation by convolution with a synthetic
//! exponentially decaying room impulse response.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::AudioSignal;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Babble,
    Music,
    Noise,
    Reverb,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::Babble,
        AugmentKind::Music,
        AugmentKind::Noise,
        AugmentKind::Reverb,
    ];

    pub fn is_additive(self) -> bool {
        self != AugmentKind::Reverb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Signal-to-noise ratio for additive kinds, in [0, 30] dB.
    pub snr_db: f64,
    /// 60 dB decay time of the synthetic room, seconds.
    pub rt60_s: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            snr_db: 10.0,
            rt60_s: 0.3,
        }
    }
}

impl AugmentParams {
    fn validate(&self, kind: AugmentKind) -> Result<()> {
        if kind.is_additive() && !(0.0..=30.0).contains(&self.snr_db) {
            return Err(Error::Parameter(format!(
                "SNR must lie in [0, 30] dB, got {}",
                self.snr_db
            )));
        }
        if kind == AugmentKind::Reverb && !(self.rt60_s > 0.0 && self.rt60_s.is_finite()) {
            return Err(Error::Parameter(format!(
                "reverb decay must be positive, got {}",
                self.rt60_s
            )));
        }
        Ok(())
    }
}

pub fn augment(
    signal: &AudioSignal,
    kind: AugmentKind,
    params: &AugmentParams,
    seed: u64,
) -> Result<AudioSignal> {
    let (speech, noise) = components(signal, kind, params, seed)?;
    let mut mixed: Vec<f64> = speech.iter().zip(&noise).map(|(s, n)| s + n).collect();
    normalize_peak(&mut mixed);
    Ok(AudioSignal {
        samples: mixed,
        sample_rate: signal.sample_rate,
    })
}

/// The speech and noise parts of an augmentation before mixing and peak
/// normalization.
pub(crate) fn components(
    signal: &AudioSignal,
    kind: AugmentKind,
    params: &AugmentParams,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = signal.len();
    let rate = signal.sample_rate;
    let bed = match kind {
        AugmentKind::Babble => babble(n, rate, &mut rng),
        AugmentKind::Music => music(n, rate, &mut rng),
        AugmentKind::Noise => broadband_noise(n, &mut rng),
        AugmentKind::Reverb => {
            let ir = impulse_response(rate, params.rt60_s, &mut rng);
            return Ok((convolve_truncated(&signal.samples, &ir), vec![0.0; n]));
        }
    };
    let signal_power = mean_power(&signal.samples);
    let bed_power = mean_power(&bed);
    let scale = if bed_power > 0.0 {
        (signal_power / (bed_power * 10f64.powf(params.snr_db / 10.0))).sqrt()
    } else {
        0.0
    };
    Ok((signal.samples.clone(), bed.iter().map(|b| b * scale).collect()))
}

pub(crate) fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

fn normalize_peak(x: &mut [f64]) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
}

/// White or pink Gaussian noise, chosen at random.
fn broadband_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pink = rng.random_bool(0.5);
    let mut white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    if pink {
        // Kellet's economy pink filter
        let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
        for v in white.iter_mut() {
            b0 = 0.99765 * b0 + *v * 0.0990460;
            b1 = 0.96300 * b1 + *v * 0.2965164;
            b2 = 0.57000 * b2 + *v * 1.0526913;
            *v = b0 + b1 + b2 + *v * 0.1848;
        }
    }
    white
}

/// Several overlapping harmonic "talkers" with syllable-rate envelopes.
fn babble(n: usize, rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = rate as f64;
    let talkers = rng.random_range(3..=6);
    let mut out = vec![0.0; n];
    for _ in 0..talkers {
        let f0 = rng.random_range(90.0..250.0);
        let drift = rng.random_range(0.5..2.0);
        let syllable_hz = rng.random_range(3.0..6.0);
        let env_phase = rng.random_range(0.0..2.0 * PI);
        let harmonics = ((3500.0 / f0) as usize).max(1);
        let mut phase = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / fs;
            let f = f0 * (1.0 + 0.05 * (2.0 * PI * drift * t).sin());
            phase += 2.0 * PI * f / fs;
            let env = (PI * syllable_hz * t + env_phase).sin().abs();
            let mut s = 0.0;
            for h in 1..=harmonics {
                s += (h as f64 * phase).sin() / h as f64;
            }
            *o += env * s;
        }
    }
    out
}

/// A slowly changing chord of tonal notes with vibrato.
fn music(n: usize, rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = rate as f64;
    let note_len = (rng.random_range(0.25..0.5) * fs) as usize;
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let end = (start + note_len.max(1)).min(n);
        for _ in 0..3 {
            let semitone = rng.random_range(-12..24) as f64;
            let freq = 440.0 * 2f64.powf(semitone / 12.0);
            let amp = rng.random_range(0.3..1.0);
            for (i, o) in out[start..end].iter_mut().enumerate() {
                let t = i as f64 / fs;
                let vib = 1.0 + 0.003 * (2.0 * PI * 5.0 * t).sin();
                let fade = ((i as f64 / (0.01 * fs)).min(1.0)) * (((end - start - i) as f64 / (0.01 * fs)).min(1.0));
                let base = 2.0 * PI * freq * vib * t;
                *o += amp * fade * (base.sin() + 0.4 * (2.0 * base).sin() + 0.2 * (3.0 * base).sin());
            }
        }
        start = end;
    }
    out
}

fn impulse_response(rate: u32, rt60: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = rate as f64;
    let len = ((rt60 * fs).ceil() as usize).max(1);
    let decay = 1000f64.ln() / (rt60 * fs);
    let mut ir = Vec::with_capacity(len);
    ir.push(1.0);
    for i in 1..len {
        let tail: f64 = StandardNormal.sample(rng);
        ir.push(0.3 * tail * (-decay * i as f64).exp());
    }
    ir
}

/// The impulse response `augment` would use for a reverb with this seed.
pub fn reverb_impulse_response(sample_rate: u32, rt60_s: f64, seed: u64) -> Result<Vec<f64>> {
    AugmentParams {
        rt60_s,
        ..AugmentParams::default()
    }
    .validate(AugmentKind::Reverb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(impulse_response(sample_rate, rt60_s, &mut rng))
}

/// Linear convolution via FFT, truncated to the length of `x`.
fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let size = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(size);
    let inverse = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut buf = vec![Complex::new(0.0, 0.0); size];
        for (b, &s) in buf.iter_mut().zip(v) {
            b.re = s;
        }
        buf
    };
    let mut a = pad(x);
    let mut b = pad(h);
    forward.process(&mut a);
    forward.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inverse.process(&mut a);
    a[..x.len()].iter().map(|c| c.re / size as f64).collect()
}
