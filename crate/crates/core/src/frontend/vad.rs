use ndarray::Array2;

use super::FrameMatrix;
use crate::error::{Error, Result};

pub const VAD_THRESHOLD_OFFSET: f64 = 5.5;
pub const VAD_MEAN_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VadMask(pub Vec<bool>);

impl VadMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn speech_frames(&self) -> usize {
        self.0.iter().filter(|&&s| s).count()
    }
}

/// Frame t is speech iff `log_energy[t] > offset + mean_scale * mean(log_energy)`.
pub fn energy_vad(log_energies: &[f64], threshold_offset: f64, mean_scale: f64) -> VadMask {
    if log_energies.is_empty() {
        return VadMask(Vec::new());
    }
    let mean = log_energies.iter().sum::<f64>() / log_energies.len() as f64;
    let threshold = threshold_offset + mean_scale * mean;
    VadMask(log_energies.iter().map(|&e| e > threshold).collect())
}

pub fn apply_vad(frames: &FrameMatrix, mask: &VadMask) -> Result<FrameMatrix> {
    if mask.len() != frames.num_frames() {
        return Err(Error::shape(
            format!("mask of length {}", frames.num_frames()),
            mask.len(),
        ));
    }
    let keep: Vec<usize> = (0..mask.len()).filter(|&t| mask.0[t]).collect();
    if keep.is_empty() {
        return Err(Error::EmptyUtterance {
            id: frames.utterance_id.clone(),
        });
    }
    let mut data = Array2::zeros((keep.len(), frames.dim()));
    for (dst, &t) in keep.iter().enumerate() {
        data.row_mut(dst).assign(&frames.data.row(t));
    }
    Ok(FrameMatrix::new(data, frames.kind, frames.utterance_id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{frame_log_energies, AudioSignal, FeatureKind, FrontendConfig};
    use ndarray::array;
    use proptest::prelude::*;

    fn matrix() -> FrameMatrix {
        FrameMatrix::new(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], FeatureKind::Mfcc, "utt")
    }

    #[test]
    fn constant_signal_is_all_speech() {
        let sig = AudioSignal::new(vec![0.3; 4000], 16000).unwrap();
        let energies = frame_log_energies(&sig, &FrontendConfig::mfcc()).unwrap();
        let mask = energy_vad(&energies, 0.0, 0.5);
        assert!(mask.0.iter().all(|&s| s));
    }

    #[test]
    fn digital_silence_around_a_burst_is_dropped() {
        let mut samples = vec![0.0; 16000];
        for (i, s) in samples.iter_mut().enumerate().skip(6000).take(4000) {
            *s = 0.5 * (i as f64 * 0.2).sin();
        }
        let sig = AudioSignal::new(samples, 16000).unwrap();
        let cfg = FrontendConfig::mfcc();
        let energies = frame_log_energies(&sig, &cfg).unwrap();
        let mask = energy_vad(&energies, VAD_THRESHOLD_OFFSET, VAD_MEAN_SCALE);
        let (frame, hop) = (cfg.frame_samples(16000), cfg.hop_samples(16000));
        for (t, &speech) in mask.0.iter().enumerate() {
            let (start, end) = (t * hop, t * hop + frame);
            if end <= 6000 || start >= 10000 {
                assert!(!speech, "silent frame {t} marked as speech");
            }
            if start >= 6000 && end <= 10000 {
                assert!(speech, "burst frame {t} marked as silence");
            }
        }
    }

    #[test]
    fn single_frame_is_judged_against_its_own_energy() {
        assert_eq!(energy_vad(&[12.0], 5.5, 0.5).0, vec![true]);
        assert_eq!(energy_vad(&[12.0], 6.5, 0.5).0, vec![false]);
    }

    #[test]
    fn apply_keeps_masked_rows_in_order() {
        let m = matrix();
        assert_eq!(apply_vad(&m, &VadMask(vec![true; 3])).unwrap(), m);
        let kept = apply_vad(&m, &VadMask(vec![true, false, true])).unwrap();
        assert_eq!(kept.data, array![[1.0, 2.0], [5.0, 6.0]]);
    }

    #[test]
    fn all_false_mask_is_an_error() {
        let err = apply_vad(&matrix(), &VadMask(vec![false; 3])).unwrap_err();
        assert!(matches!(err, Error::EmptyUtterance { id } if id == "utt"));
        assert!(apply_vad(&matrix(), &VadMask(vec![true; 2])).is_err());
    }

    proptest! {
        #[test]
        fn louder_never_loses_speech_frames(seed in 0u64..1000, gain in 1.0f64..8.0, thr in 0.0f64..40.0) {
            let samples: Vec<f64> = (0..2000)
                .map(|i| 0.1 * (((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5))
                .collect();
            let cfg = FrontendConfig::mfcc();
            let quiet = AudioSignal::new(samples.clone(), 16000).unwrap();
            let loud = AudioSignal::new(samples.iter().map(|s| s * gain).collect(), 16000).unwrap();
            let mq = energy_vad(&frame_log_energies(&quiet, &cfg).unwrap(), thr, 0.0);
            let ml = energy_vad(&frame_log_energies(&loud, &cfg).unwrap(), thr, 0.0);
            for (q, l) in mq.0.iter().zip(&ml.0) {
                prop_assert!(!q || *l);
            }
        }
    }
}
