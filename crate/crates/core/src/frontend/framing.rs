use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioSignal, FrontendConfig};
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32768.0;
const ENERGY_FLOOR: f64 = 1e-10;

/// `floor((num_samples - frame) / hop) + 1`, or 0 when the signal is shorter
/// than one frame.
pub fn frame_count(num_samples: usize, frame: usize, hop: usize) -> usize {
    if num_samples < frame || hop == 0 {
        0
    } else {
        (num_samples - frame) / hop + 1
    }
}

pub fn hamming_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / denom).cos())
        .collect()
}

fn frame_geometry(signal: &AudioSignal, config: &FrontendConfig) -> Result<(usize, usize, usize)> {
    config.validate(signal.sample_rate)?;
    let frame = config.frame_samples(signal.sample_rate);
    let hop = config.hop_samples(signal.sample_rate);
    let count = frame_count(signal.len(), frame, hop);
    if count == 0 {
        return Err(Error::EmptyOutput {
            samples: signal.len(),
            needed: frame,
        });
    }
    Ok((frame, hop, count))
}

/// Splits the signal into overlapping frames, each pre-emphasized and then
/// Hamming-windowed. Rows are frames.
pub fn frame_signal(signal: &AudioSignal, config: &FrontendConfig) -> Result<Array2<f64>> {
    let (frame, hop, count) = frame_geometry(signal, config)?;
    let window = hamming_window(frame);
    let coef = config.pre_emphasis;
    let mut out = Array2::zeros((count, frame));
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        let src = &signal.samples[t * hop..t * hop + frame];
        let mut buf = src.to_vec();
        for i in (1..frame).rev() {
            buf[i] -= coef * buf[i - 1];
        }
        buf[0] -= coef * buf[0];
        for (dst, (b, w)) in row.iter_mut().zip(buf.iter().zip(&window)) {
            *dst = b * w;
        }
    }
    Ok(out)
}

/// Natural-log energy of each raw frame on the 16-bit PCM amplitude scale,
/// floored at 1e-10.
pub fn frame_log_energies(signal: &AudioSignal, config: &FrontendConfig) -> Result<Vec<f64>> {
    let (frame, hop, count) = frame_geometry(signal, config)?;
    Ok((0..count)
        .map(|t| {
            let energy: f64 = signal.samples[t * hop..t * hop + frame]
                .iter()
                .map(|s| (s * PCM_SCALE).powi(2))
                .sum();
            energy.max(ENERGY_FLOOR).ln()
        })
        .collect())
}

/// Power spectrum |X(k)|^2 for k = 0..=fft_size/2 of each row, zero-padded
/// to `fft_size`.
pub fn power_spectrum(frames: &Array2<f64>, fft_size: usize) -> Array2<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let bins = fft_size / 2 + 1;
    let mut out = Array2::zeros((frames.nrows(), bins));
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for (row, mut dst) in frames.rows().into_iter().zip(out.rows_mut()) {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (c, &v) in buf.iter_mut().zip(row.iter()) {
            c.re = v;
        }
        fft.process(&mut buf);
        for (d, c) in dst.iter_mut().zip(&buf) {
            *d = c.norm_sqr();
        }
    }
    out
}

pub(crate) fn fft_size_for(frame: usize) -> usize {
    frame.next_power_of_two()
}
