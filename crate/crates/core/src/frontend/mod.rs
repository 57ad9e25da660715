//! Frame-level acoustic features: framing, MFCC, PLP, energy VAD and the
//! augmentation primitives used to build the x-vector training pool.

mod augment;
mod framing;
mod mfcc;
mod plp;
mod vad;
mod wav;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmx::MatrixKind;

pub use augment::{augment, reverb_impulse_response, AugmentKind, AugmentParams};
pub use framing::{frame_count, frame_log_energies, frame_signal, hamming_window, power_spectrum};
pub use mfcc::{dct_matrix, log_mel_energies, mel_center_frequencies, mel_scale, mfcc, MelFilterbank};
pub use plp::{
    bark_scale, cepstra_from_lpc, equal_loudness, levinson_durbin, plp, plp_from_power_spectrum,
    plp_from_auditory_spectrum, LpcFit,
};
pub use vad::{apply_vad, energy_vad, VadMask, VAD_MEAN_SCALE, VAD_THRESHOLD_OFFSET};
pub use wav::{read_wav, write_wav};

/// Mono audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Parameter("audio contains non-finite samples".into()));
        }
        Ok(AudioSignal {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Mfcc,
    MfccHires,
    Plp,
}

impl FeatureKind {
    pub fn matrix_kind(self) -> MatrixKind {
        match self {
            FeatureKind::Mfcc => MatrixKind::Mfcc,
            FeatureKind::MfccHires => MatrixKind::MfccHires,
            FeatureKind::Plp => MatrixKind::Plp,
        }
    }

    pub fn from_matrix_kind(kind: MatrixKind) -> Option<Self> {
        match kind {
            MatrixKind::Mfcc => Some(FeatureKind::Mfcc),
            MatrixKind::MfccHires => Some(FeatureKind::MfccHires),
            MatrixKind::Plp => Some(FeatureKind::Plp),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::MfccHires => "mfcc-hires",
            FeatureKind::Plp => "plp",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfcc" => Ok(FeatureKind::Mfcc),
            "mfcc-hires" | "hires" | "mfcc_hires" => Ok(FeatureKind::MfccHires),
            "plp" => Ok(FeatureKind::Plp),
            other => Err(Error::Config(format!("unknown feature kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub num_ceps: usize,
    pub num_mel_bins: usize,
    pub low_cutoff_hz: f64,
    /// Values `<= 0` are offsets from Nyquist: `-400` at 16 kHz means 7600 Hz.
    pub high_cutoff_hz: f64,
    pub pre_emphasis: f64,
    pub feature_kind: FeatureKind,
    pub plp_order: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig::mfcc()
    }
}

impl FrontendConfig {
    /// 13 cepstra from 23 mel bins spanning 20 Hz to Nyquist.
    pub fn mfcc() -> Self {
        FrontendConfig {
            frame_len_ms: 25.0,
            hop_ms: 3.0,
            num_ceps: 13,
            num_mel_bins: 23,
            low_cutoff_hz: 20.0,
            high_cutoff_hz: 0.0,
            pre_emphasis: 0.97,
            feature_kind: FeatureKind::Mfcc,
            plp_order: 12,
        }
    }

    /// 40 cepstra from 40 mel bins between 20 Hz and Nyquist - 400 Hz.
    pub fn mfcc_hires() -> Self {
        FrontendConfig {
            num_ceps: 40,
            num_mel_bins: 40,
            high_cutoff_hz: -400.0,
            feature_kind: FeatureKind::MfccHires,
            ..FrontendConfig::mfcc()
        }
    }

    /// Order-12 PLP, giving 13 cepstra.
    pub fn plp() -> Self {
        FrontendConfig {
            feature_kind: FeatureKind::Plp,
            ..FrontendConfig::mfcc()
        }
    }

    pub fn for_kind(kind: FeatureKind) -> Self {
        match kind {
            FeatureKind::Mfcc => FrontendConfig::mfcc(),
            FeatureKind::MfccHires => FrontendConfig::mfcc_hires(),
            FeatureKind::Plp => FrontendConfig::plp(),
        }
    }

    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.frame_len_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn resolved_high_cutoff(&self, sample_rate: u32) -> f64 {
        let nyquist = sample_rate as f64 / 2.0;
        if self.high_cutoff_hz <= 0.0 {
            nyquist + self.high_cutoff_hz
        } else {
            self.high_cutoff_hz
        }
    }

    /// Number of output coefficients per frame.
    pub fn output_dim(&self) -> usize {
        match self.feature_kind {
            FeatureKind::Plp => self.plp_order + 1,
            _ => self.num_ceps,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(self.hop_ms > 0.0 && self.frame_len_ms > self.hop_ms) {
            return Err(Error::Config(format!(
                "need frame_len_ms > hop_ms > 0, got {} / {}",
                self.frame_len_ms, self.hop_ms
            )));
        }
        if self.hop_samples(sample_rate) == 0 {
            return Err(Error::Config("hop rounds to zero samples".into()));
        }
        if self.num_ceps == 0 || self.num_ceps > self.num_mel_bins {
            return Err(Error::Config(format!(
                "need 0 < num_ceps <= num_mel_bins, got {} / {}",
                self.num_ceps, self.num_mel_bins
            )));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(Error::Config("pre_emphasis must lie in [0, 1)".into()));
        }
        let high = self.resolved_high_cutoff(sample_rate);
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.low_cutoff_hz >= 0.0 && high > self.low_cutoff_hz && high <= nyquist) {
            return Err(Error::Config(format!(
                "cutoffs must satisfy 0 <= low < high <= nyquist, got {} / {high}",
                self.low_cutoff_hz
            )));
        }
        if self.feature_kind == FeatureKind::Plp && self.plp_order == 0 {
            return Err(Error::Config("plp_order must be positive".into()));
        }
        Ok(())
    }
}

/// T x D frame-level features of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub data: Array2<f64>,
    pub kind: FeatureKind,
    pub utterance_id: String,
}

impl FrameMatrix {
    pub fn new(data: Array2<f64>, kind: FeatureKind, utterance_id: impl Into<String>) -> Self {
        FrameMatrix {
            data,
            kind,
            utterance_id: utterance_id.into(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Features of `signal` according to `config.feature_kind`.
pub fn extract(signal: &AudioSignal, config: &FrontendConfig, utterance_id: &str) -> Result<FrameMatrix> {
    let data = match config.feature_kind {
        FeatureKind::Mfcc | FeatureKind::MfccHires => mfcc(signal, config)?,
        FeatureKind::Plp => plp(signal, config)?,
    };
    Ok(FrameMatrix::new(data, config.feature_kind, utterance_id))
}

/// Features followed by energy VAD with the default thresholds.
pub fn extract_with_vad(
    signal: &AudioSignal,
    config: &FrontendConfig,
    utterance_id: &str,
) -> Result<FrameMatrix> {
    let features = extract(signal, config, utterance_id)?;
    let energies = frame_log_energies(signal, config)?;
    let mask = energy_vad(&energies, VAD_THRESHOLD_OFFSET, VAD_MEAN_SCALE);
    apply_vad(&features, &mask)
}
