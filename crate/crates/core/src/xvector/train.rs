use ndarray::{s, Array1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{accumulate_backward, forward_rows, Gradients};
use super::{TdnnConfig, TdnnParams, MIN_FRAMES};
use crate::error::{Error, Result};
use crate::frontend::{augment, extract_with_vad, AudioSignal, AugmentKind, AugmentParams, FrameMatrix, FrontendConfig};

/// Raw audio with a class index (a speaker, for x-vector training).
#[derive(Debug, Clone)]
pub struct LabeledAudio {
    pub id: String,
    pub audio: AudioSignal,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub features: FrameMatrix,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPlan {
    /// Target pool size as a multiple of the clean set (clean copy included).
    pub pool_factor: usize,
    pub kinds: Vec<AugmentKind>,
    pub noise_snr_db: (f64, f64),
    pub music_snr_db: (f64, f64),
    pub babble_snr_db: (f64, f64),
    pub rt60_s: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        AugmentationPlan {
            pool_factor: 4,
            kinds: AugmentKind::ALL.to_vec(),
            noise_snr_db: (0.0, 15.0),
            music_snr_db: (5.0, 15.0),
            babble_snr_db: (13.0, 20.0),
            rt60_s: (0.2, 0.8),
            seed: 0,
        }
    }
}

impl AugmentationPlan {
    fn draw(&self, rng: &mut ChaCha8Rng) -> (AugmentKind, AugmentParams) {
        let kind = self.kinds[rng.random_range(0..self.kinds.len())];
        let range = |(lo, hi): (f64, f64), rng: &mut ChaCha8Rng| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let params = match kind {
            AugmentKind::Noise => AugmentParams { snr_db: range(self.noise_snr_db, rng), ..Default::default() },
            AugmentKind::Music => AugmentParams { snr_db: range(self.music_snr_db, rng), ..Default::default() },
            AugmentKind::Babble => AugmentParams { snr_db: range(self.babble_snr_db, rng), ..Default::default() },
            AugmentKind::Reverb => AugmentParams { rt60_s: range(self.rt60_s, rng), ..Default::default() },
        };
        (kind, params)
    }
}

/// Clean features of every utterance plus `pool_factor - 1` augmented copies
/// each, with kinds drawn uniformly from the plan. Copies left with fewer
/// than the network's context after VAD are dropped.
pub fn build_training_pool(
    utterances: &[LabeledAudio],
    frontend: &FrontendConfig,
    plan: &AugmentationPlan,
) -> Result<Vec<TrainingExample>> {
    if plan.pool_factor == 0 || (plan.pool_factor > 1 && plan.kinds.is_empty()) {
        return Err(Error::Config("augmentation plan needs a positive pool factor and kinds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut pool = Vec::with_capacity(utterances.len() * plan.pool_factor);
    for utt in utterances {
        for copy in 0..plan.pool_factor {
            let (audio, tag) = if copy == 0 {
                (utt.audio.clone(), "clean".to_string())
            } else {
                let (kind, params) = plan.draw(&mut rng);
                let seed = rng.next_u64();
                (augment(&utt.audio, kind, &params, seed)?, format!("{kind:?}").to_lowercase())
            };
            let id = format!("{}-{tag}{copy}", utt.id);
            match extract_with_vad(&audio, frontend, &id) {
                Ok(f) if f.num_frames() >= MIN_FRAMES => pool.push(TrainingExample { features: f, label: utt.label }),
                Ok(f) => log::debug!("dropping {id}: {} frames after VAD", f.num_frames()),
                Err(Error::EmptyUtterance { .. }) => log::debug!("dropping {id}: no speech frames"),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(pool)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TdnnParams,
    /// Mean per-segment loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn input_normalization(examples: &[TrainingExample], dim: usize) -> (Array1<f64>, Array1<f64>) {
    let mut count = 0.0;
    let mut sum = Array1::<f64>::zeros(dim);
    for ex in examples {
        sum += &ex.features.data.sum_axis(Axis(0));
        count += ex.features.num_frames() as f64;
    }
    let mean = sum / count;
    let mut sq = Array1::<f64>::zeros(dim);
    for ex in examples {
        for row in ex.features.data.rows() {
            for ((s, x), m) in sq.iter_mut().zip(row).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
    }
    let scale = sq.mapv(|v| 1.0 / (v / count).sqrt().max(1e-8));
    (mean, scale)
}

/// Minibatch SGD with momentum on the summed cross entropy, one random
/// segment per example per epoch.
pub fn train_tdnn(examples: &[TrainingExample], config: &TdnnConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut seen = vec![false; config.num_classes];
    for ex in examples {
        if ex.features.dim() != config.input_dim {
            return Err(Error::shape(format!("{} feature columns", config.input_dim), ex.features.dim()));
        }
        if ex.features.num_frames() < MIN_FRAMES {
            return Err(Error::TooShort {
                id: ex.features.utterance_id.clone(),
                frames: ex.features.num_frames(),
                needed: MIN_FRAMES,
            });
        }
        *seen
            .get_mut(ex.label)
            .ok_or_else(|| Error::Label(format!("label {} with {} classes", ex.label, config.num_classes)))? = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!("class {missing} has no usable training utterance")));
    }

    let mut params = TdnnParams::init(config)?;
    let (mean, scale) = input_normalization(examples, config.input_dim);
    params.input_mean = mean;
    params.input_scale = scale;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut grads = Gradients::zeros_like(&params);
    let mut velocity = Gradients::zeros_like(&params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate * 0.5f64.powi((epoch / config.halve_every.max(1)) as i32);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.reset();
            for &idx in batch {
                let ex = &examples[idx];
                let t = ex.features.num_frames();
                let len = config.segment_frames.min(t);
                let start = rng.random_range(0..=t - len);
                let segment = ex.features.data.slice(s![start..start + len, ..]);
                let acts = forward_rows(&params, segment, &ex.features.utterance_id)?;
                epoch_loss += accumulate_backward(&params, &acts, ex.label, &mut grads)?;
            }
            let mut step = lr / batch.len() as f64;
            if config.max_grad_norm > 0.0 {
                let norm = grads.norm() / batch.len() as f64;
                if norm > config.max_grad_norm {
                    step *= config.max_grad_norm / norm;
                }
            }
            for ((p, v), g) in params.layers.iter_mut().zip(&mut velocity.layers).zip(&grads.layers) {
                v.weight.zip_mut_with(&g.weight, |v, &g| *v = config.momentum * *v - step * g);
                v.bias.zip_mut_with(&g.bias, |v, &g| *v = config.momentum * *v - step * g);
                p.weight += &v.weight;
                p.bias += &v.bias;
            }
        }
        let mean_loss = epoch_loss / examples.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Data(format!("training diverged in epoch {epoch}")));
        }
        log::info!("tdnn epoch {epoch}: lr {lr:.5}, mean loss {mean_loss:.4}");
        epoch_losses.push(mean_loss);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

/// Builds the augmented pool and trains the network on it.
pub fn train_xvec(
    utterances: &[LabeledAudio],
    frontend: &FrontendConfig,
    plan: &AugmentationPlan,
    config: &TdnnConfig,
) -> Result<TrainOutcome> {
    let mut classes: Vec<usize> = utterances.iter().map(|u| u.label).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data("x-vector training needs at least two classes".into()));
    }
    let pool = build_training_pool(utterances, frontend, plan)?;
    for c in 0..config.num_classes {
        let clean = pool.iter().any(|ex| ex.label == c && ex.features.utterance_id.ends_with("-clean0"));
        if !clean {
            return Err(Error::Data(format!("class {c} has no utterance with {MIN_FRAMES} speech frames")));
        }
    }
    train_tdnn(&pool, config)
}
