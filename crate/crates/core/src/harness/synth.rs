//! Deterministic stand-in corpus: harmonic-plus-noise "speech" from
//! synthetic speakers, recorded once plainly and once through a mask-like
//! low-pass channel.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::frontend::{write_wav, AudioSignal};

pub const MASK_LABEL: &str = "mask";
pub const CLEAR_LABEL: &str = "no-mask";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub utterances_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Corner of the mask channel's second-order low-pass.
    pub mask_cutoff_hz: f64,
    /// Extra attenuation of the mask channel above the cutoff.
    pub mask_attenuation_db: f64,
    /// RMS of the additive white recording noise, dB re full scale.
    pub noise_floor_db: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_speakers: 8,
            utterances_per_class: 10,
            duration_s: 1.0,
            sample_rate: 16000,
            mask_cutoff_hz: 2500.0,
            mask_attenuation_db: 12.0,
            noise_floor_db: -60.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 3 || self.utterances_per_class == 0 {
            return Err(Error::Parameter(
                "need at least 3 speakers (one per split) and a positive utterance count".into(),
            ));
        }
        if !(self.duration_s >= 0.1 && self.duration_s.is_finite()) || self.sample_rate < 8000 {
            return Err(Error::Parameter("duration must be at least 0.1 s at 8 kHz or more".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.mask_cutoff_hz > 0.0 && self.mask_cutoff_hz < nyquist) {
            return Err(Error::Parameter(format!(
                "mask cutoff must lie in (0, {nyquist}) Hz, got {}",
                self.mask_cutoff_hz
            )));
        }
        if !(self.mask_attenuation_db >= 0.0) || !self.noise_floor_db.is_finite() || self.noise_floor_db > -10.0 {
            return Err(Error::Parameter("attenuation must be >= 0 dB and the noise floor below -10 dBFS".into()));
        }
        Ok(())
    }

    /// Split of a speaker: the first half train, the next quarter devel, the
    /// rest test (each at least one speaker).
    pub fn split_of(&self, speaker: usize) -> Split {
        let n = self.num_speakers;
        let train = (n / 2).max(1);
        let devel = (n / 4).max(1);
        if speaker < train {
            Split::Train
        } else if speaker < train + devel {
            Split::Devel
        } else {
            Split::Test
        }
    }

    pub fn speaker_name(speaker: usize) -> String {
        format!("spk{speaker:02}")
    }

    pub fn utterance_id(speaker: usize, label: &str, index: usize) -> String {
        format!("{}_{label}_{index:02}", Self::speaker_name(speaker))
    }
}

/// Voice characteristics fixed per speaker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerProfile {
    pub f0_hz: f64,
    /// Multiplies all formant frequencies (vocal tract length).
    pub formant_scale: f64,
    /// Aspiration noise level relative to the harmonic part.
    pub breathiness: f64,
}

impl SpeakerProfile {
    pub fn draw(corpus_seed: u64, speaker: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(speaker as u64 + 1)));
        SpeakerProfile {
            f0_hz: rng.random_range(95.0..230.0),
            formant_scale: rng.random_range(0.88..1.14),
            breathiness: rng.random_range(0.03..0.08),
        }
    }
}

const VOWELS: [[f64; 4]; 5] = [
    [730.0, 1090.0, 2440.0, 3400.0],
    [270.0, 2290.0, 3010.0, 3700.0],
    [300.0, 870.0, 2240.0, 3300.0],
    [530.0, 1840.0, 2480.0, 3500.0],
    [570.0, 840.0, 2410.0, 3300.0],
];
const BANDWIDTHS: [f64; 4] = [90.0, 110.0, 170.0, 250.0];
const SPEECH_RMS: f64 = 0.1;

fn resonance_gain(f: f64, formants: &[f64; 4]) -> f64 {
    formants
        .iter()
        .zip(BANDWIDTHS)
        .map(|(&fc, bw)| 1.0 / (1.0 + ((f - fc) / (0.5 * bw)).powi(2)).sqrt())
        .sum::<f64>()
        + 0.02
}

/// Clean source signal of one utterance; both class versions share it.
pub fn synth_source(spec: &CorpusSpec, profile: &SpeakerProfile, seed: u64) -> Vec<f64> {
    let fs = spec.sample_rate as f64;
    let n = (spec.duration_s * fs).round() as usize;
    let nyquist = fs / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; n];
    let mut pos = (rng.random_range(0.02..0.08) * fs) as usize;
    while pos < n {
        let len = ((rng.random_range(0.12..0.28) * fs) as usize).min(n - pos);
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
        let formants = vowel.map(|f| f * profile.formant_scale * rng.random_range(0.95..1.05));
        let f0 = profile.f0_hz * rng.random_range(0.92..1.08);
        let harmonics = ((0.95 * nyquist) / f0) as usize;
        let amps: Vec<f64> = (1..=harmonics)
            .map(|h| resonance_gain(h as f64 * f0, &formants) / h as f64)
            .collect();
        let mut phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        for i in 0..len {
            let progress = i as f64 / len as f64;
            let envelope = (PI * progress).sin().powf(0.6);
            let inst_f0 = f0 * (1.04 - 0.08 * progress);
            let mut voiced = 0.0;
            for (h, (a, ph)) in amps.iter().zip(phases.iter_mut()).enumerate() {
                let fh = (h + 1) as f64 * inst_f0;
                if fh < 0.97 * nyquist {
                    voiced += a * ph.sin();
                }
                *ph += 2.0 * PI * fh / fs;
            }
            let aspiration: f64 = StandardNormal.sample(&mut rng);
            out[pos + i] = envelope * (voiced + profile.breathiness * 4.0 * aspiration);
        }
        pos += len + (rng.random_range(0.04..0.12) * fs) as usize;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v *= SPEECH_RMS / rms);
    }
    out
}

/// Magnitude response of the mask channel at `f` Hz.
pub fn mask_gain(spec: &CorpusSpec, f: f64) -> f64 {
    let lowpass = 1.0 / (1.0 + (f / spec.mask_cutoff_hz).powi(4)).sqrt();
    // Linear-in-dB shelf over one octave above the cutoff.
    let ramp = ((f - spec.mask_cutoff_hz) / spec.mask_cutoff_hz).clamp(0.0, 1.0);
    lowpass * 10f64.powf(-spec.mask_attenuation_db * ramp / 20.0)
}

/// Zero-phase filtering through the mask channel, via one FFT of the whole
/// signal.
pub fn apply_mask_channel(spec: &CorpusSpec, signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let size = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(size);
    let inverse = planner.plan_fft_inverse(size);
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    forward.process(&mut buf);
    let fs = spec.sample_rate as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(size - k);
        *v *= mask_gain(spec, bin as f64 * fs / size as f64);
    }
    inverse.process(&mut buf);
    buf.iter().take(n).map(|c| c.re / size as f64).collect()
}

/// One finished recording: source, optional mask channel, recording noise.
pub fn synth_utterance(spec: &CorpusSpec, speaker: usize, index: usize, masked: bool) -> Result<AudioSignal> {
    let profile = SpeakerProfile::draw(spec.seed, speaker);
    let content_seed = spec
        .seed
        .wrapping_mul(1_000_003)
        .wrapping_add((speaker * 10_007 + index) as u64);
    let source = synth_source(spec, &profile, content_seed);
    let mut samples = if masked { apply_mask_channel(spec, &source) } else { source };
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed.wrapping_add(if masked { 0x6d61 } else { 0x636c }));
    let noise_rms = 10f64.powf(spec.noise_floor_db / 20.0);
    for v in &mut samples {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = (*v + noise_rms * n).clamp(-1.0, 1.0);
    }
    AudioSignal::new(samples, spec.sample_rate)
}

/// Manifests written by [`synth_corpus`]: class labels and, over the same
/// ids and paths, speaker labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub speakers: Manifest,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPEAKER_MANIFEST_FILE: &str = "speakers.csv";

/// Writes `audio/<id>.wav`, `manifest.csv` and `speakers.csv` under `out`.
pub fn synth_corpus(spec: &CorpusSpec, out: &Path) -> Result<Corpus> {
    spec.validate()?;
    let audio_dir = out.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut records = Vec::new();
    let mut speaker_records = Vec::new();
    for speaker in 0..spec.num_speakers {
        for index in 0..spec.utterances_per_class {
            for (label, masked) in [(MASK_LABEL, true), (CLEAR_LABEL, false)] {
                let id = CorpusSpec::utterance_id(speaker, label, index);
                let rel = Path::new("audio").join(format!("{id}.wav"));
                write_wav(&out.join(&rel), &synth_utterance(spec, speaker, index, masked)?)?;
                let record = ManifestRecord {
                    id,
                    path: rel,
                    label: label.into(),
                    split: spec.split_of(speaker),
                };
                speaker_records.push(ManifestRecord {
                    label: CorpusSpec::speaker_name(speaker),
                    ..record.clone()
                });
                records.push(record);
            }
        }
    }
    let manifest = Manifest::new(records, out)?;
    let speakers = Manifest::new(speaker_records, out)?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    speakers.save(&out.join(SPEAKER_MANIFEST_FILE))?;
    Ok(Corpus { manifest, speakers })
}
