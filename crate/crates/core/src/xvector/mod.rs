//! TDNN x-vector network: five time-delay frame layers, mean + standard
//! deviation statistics pooling, two segment layers and a softmax output,
//! trained with multi-class cross entropy. Embeddings are read from a
//! segment layer's affine output.

mod network;
mod train;

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fisher::sidecar_path;
use crate::fmx::{self, MatrixKind};

pub use network::{
    cross_entropy_loss, extract_embedding, pad_by_repetition, splice, stats_pooling, tdnn_backward,
    tdnn_forward, Activations, Gradients, POOL_VARIANCE_FLOOR,
};
pub use train::{
    build_training_pool, train_tdnn, train_xvec, AugmentationPlan, LabeledAudio, TrainOutcome,
    TrainingExample,
};

/// Frame offsets spliced by each frame-level layer.
pub const FRAME_CONTEXTS: [&[isize]; 5] = [&[-2, -1, 0, 1, 2], &[-2, 0, 2], &[-3, 0, 3], &[0], &[0]];

/// Frames consumed on each side of a frame5 output.
pub const CONTEXT_LEFT: usize = 7;
pub const CONTEXT_RIGHT: usize = 7;
/// Shortest utterance that yields at least one frame5 output.
pub const MIN_FRAMES: usize = CONTEXT_LEFT + CONTEXT_RIGHT + 1;

pub const NUM_LAYERS: usize = 8;
pub const LAYER_NAMES: [&str; NUM_LAYERS] = [
    "frame1", "frame2", "frame3", "frame4", "frame5", "segment6", "segment7", "softmax",
];
const SEGMENT6: usize = 5;
const SEGMENT7: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLayer {
    #[default]
    Segment6,
    Segment7,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdnnConfig {
    pub input_dim: usize,
    /// Output widths of frame1..frame5.
    pub frame_widths: [usize; 5],
    /// Output widths of segment6 and segment7.
    pub segment_widths: [usize; 2],
    pub num_classes: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// The learning rate halves after every this many epochs.
    pub halve_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub segment_frames: usize,
    /// Cap on the L2 norm of each batch-mean gradient; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for TdnnConfig {
    fn default() -> Self {
        TdnnConfig {
            input_dim: 40,
            frame_widths: [512, 512, 512, 512, 1500],
            segment_widths: [512, 512],
            num_classes: 2,
            seed: 0,
            learning_rate: 0.01,
            momentum: 0.9,
            halve_every: 10,
            epochs: 30,
            batch_size: 16,
            segment_frames: 150,
            max_grad_norm: 5.0,
        }
    }
}

impl TdnnConfig {
    /// (rows, cols) of each affine layer's weight matrix.
    pub fn layer_shapes(&self) -> [(usize, usize); NUM_LAYERS] {
        let fw = self.frame_widths;
        let sw = self.segment_widths;
        let mut shapes = [(0, 0); NUM_LAYERS];
        let mut prev = self.input_dim;
        for i in 0..5 {
            shapes[i] = (fw[i], FRAME_CONTEXTS[i].len() * prev);
            prev = fw[i];
        }
        shapes[5] = (sw[0], 2 * fw[4]);
        shapes[6] = (sw[1], sw[0]);
        shapes[7] = (self.num_classes, sw[1]);
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.frame_widths.contains(&0)
            || self.segment_widths.contains(&0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two output classes".into()));
        }
        if self.batch_size == 0 || self.segment_frames < MIN_FRAMES {
            return Err(Error::Config(format!(
                "batch size must be positive and segments at least {MIN_FRAMES} frames"
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("need learning_rate > 0 and momentum in [0, 1)".into()));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::Config("max_grad_norm must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// out x in
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Affine {
            weight: Array2::zeros((rows, cols)),
            bias: Array1::zeros(rows),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdnnParams {
    pub layers: Vec<Affine>,
    /// Per-dimension input standardization applied before frame1.
    pub input_mean: Array1<f64>,
    pub input_scale: Array1<f64>,
}

impl TdnnParams {
    /// He-initialized weights for the ReLU layers, zero biases.
    pub fn init(config: &TdnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_shapes()
            .iter()
            .enumerate()
            .map(|(i, &(rows, cols))| {
                let gain = if i == NUM_LAYERS - 1 { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / cols as f64).sqrt()).expect("finite std");
                Affine {
                    weight: Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng)),
                    bias: Array1::zeros(rows),
                }
            })
            .collect();
        Ok(TdnnParams {
            layers,
            input_mean: Array1::zeros(config.input_dim),
            input_scale: Array1::ones(config.input_dim),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[NUM_LAYERS - 1].bias.len()
    }

    pub fn embedding_dim(&self, layer: EmbeddingLayer) -> usize {
        match layer {
            EmbeddingLayer::Segment6 => self.layers[SEGMENT6].bias.len(),
            EmbeddingLayer::Segment7 => self.layers[SEGMENT7].bias.len(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Affine::num_params).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.layers.len() != NUM_LAYERS {
            return Err(Error::Format(format!("expected {NUM_LAYERS} layers, got {}", self.layers.len())));
        }
        let f = self.input_dim();
        if self.input_scale.len() != f {
            return Err(Error::Format("input normalization length mismatch".into()));
        }
        let mut prev = f;
        for (i, layer) in self.layers.iter().enumerate() {
            let expected_in = match i {
                0..=4 => FRAME_CONTEXTS[i].len() * prev,
                5 => 2 * prev,
                _ => prev,
            };
            if layer.weight.ncols() != expected_in || layer.bias.len() != layer.weight.nrows() {
                return Err(Error::Format(format!(
                    "layer {} has shape {:?}, expected input width {expected_in}",
                    LAYER_NAMES[i],
                    layer.weight.dim()
                )));
            }
            prev = layer.weight.nrows();
        }
        let all_finite = self
            .layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::Format("non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = TdnnDocument {
            format: TDNN_FORMAT.into(),
            input_mean: self.input_mean.to_vec(),
            input_scale: self.input_scale.to_vec(),
            layers: self
                .layers
                .iter()
                .zip(LAYER_NAMES)
                .map(|(l, name)| LayerDocument {
                    name: name.into(),
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&doc).expect("plain numeric document")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TdnnDocument = serde_json::from_str(text)?;
        if doc.format != TDNN_FORMAT {
            return Err(Error::Format(format!("expected format {TDNN_FORMAT}, got {}", doc.format)));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let weight = Array2::from_shape_vec((l.rows, l.cols), l.weight)
                    .map_err(|_| Error::Format(format!("layer {} weight size mismatch", l.name)))?;
                Ok(Affine {
                    weight,
                    bias: Array1::from(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = TdnnParams {
            layers,
            input_mean: Array1::from(doc.input_mean),
            input_scale: Array1::from(doc.input_scale),
        };
        params.validate()?;
        Ok(params)
    }
}

const TDNN_FORMAT: &str = "tdnn-v1";
const EMBEDDING_SET_FORMAT: &str = "embedding-set-v1";

impl TdnnParams {
    /// SHA-256 of the JSON document, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sidecar metadata stored next to an FMX1 matrix of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSetInfo {
    pub format: String,
    pub model_hash: String,
    pub layer: EmbeddingLayer,
    pub ids: Vec<String>,
}

pub fn write_embedding_set(
    path: &Path,
    ids: &[String],
    embeddings: &Array2<f64>,
    model_hash: &str,
    layer: EmbeddingLayer,
) -> Result<()> {
    if ids.len() != embeddings.nrows() {
        return Err(Error::shape(format!("{} ids", embeddings.nrows()), ids.len()));
    }
    fmx::write(path, embeddings, MatrixKind::Embeddings)?;
    let info = EmbeddingSetInfo {
        format: EMBEDDING_SET_FORMAT.into(),
        model_hash: model_hash.into(),
        layer,
        ids: ids.to_vec(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&side, e))
}

pub fn read_embedding_set(path: &Path) -> Result<(Array2<f64>, EmbeddingSetInfo)> {
    let (matrix, kind) = fmx::read(path)?;
    if kind != MatrixKind::Embeddings {
        return Err(Error::Format(format!("{} does not hold embeddings", path.display())));
    }
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let info: EmbeddingSetInfo = serde_json::from_str(&text)?;
    if info.format != EMBEDDING_SET_FORMAT {
        return Err(Error::UnsupportedFormat(format!("expected {EMBEDDING_SET_FORMAT}, got {}", info.format)));
    }
    if info.ids.len() != matrix.nrows() {
        return Err(Error::Format("sidecar ids do not match matrix rows".into()));
    }
    Ok((matrix, info))
}

#[derive(Serialize, Deserialize)]
struct TdnnDocument {
    format: String,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    layers: Vec<LayerDocument>,
}

#[derive(Serialize, Deserialize)]
struct LayerDocument {
    name: String,
    rows: usize,
    cols: usize,
    /// row-major
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_shapes() {
        let cfg = TdnnConfig { input_dim: 24, num_classes: 7, ..Default::default() };
        let shapes = cfg.layer_shapes();
        assert_eq!(shapes[0], (512, 120));
        assert_eq!(shapes[1], (512, 1536));
        assert_eq!(shapes[2], (512, 1536));
        assert_eq!(shapes[3], (512, 512));
        assert_eq!(shapes[4], (1500, 512));
        assert_eq!(shapes[5], (512, 3000));
        assert_eq!(shapes[6], (512, 512));
        assert_eq!(shapes[7], (7, 512));
    }

    #[test]
    fn receptive_field_is_fifteen_frames() {
        let left: isize = FRAME_CONTEXTS.iter().map(|c| -c[0]).sum();
        let right: isize = FRAME_CONTEXTS.iter().map(|c| *c.last().unwrap()).sum();
        assert_eq!((left, right), (CONTEXT_LEFT as isize, CONTEXT_RIGHT as isize));
        assert_eq!(MIN_FRAMES, 15);
    }

    #[test]
    fn json_roundtrip() {
        let cfg = TdnnConfig {
            input_dim: 3,
            frame_widths: [4, 4, 4, 4, 5],
            segment_widths: [4, 3],
            num_classes: 2,
            ..Default::default()
        };
        let params = TdnnParams::init(&cfg).unwrap();
        let text = params.to_json();
        assert!(text.starts_with("{\"format\":\"tdnn-v1\""));
        assert_eq!(TdnnParams::from_json(&text).unwrap(), params);
        let mut broken = params.clone();
        broken.layers[2].weight = Array2::zeros((4, 11));
        assert!(TdnnParams::from_json(&broken.to_json()).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = TdnnConfig { input_dim: 5, frame_widths: [6; 5], segment_widths: [6, 6], ..Default::default() };
        assert_eq!(TdnnParams::init(&cfg).unwrap(), TdnnParams::init(&cfg).unwrap());
        let other = TdnnConfig { seed: 1, ..cfg.clone() };
        assert_ne!(TdnnParams::init(&cfg).unwrap(), TdnnParams::init(&other).unwrap());
    }
}
