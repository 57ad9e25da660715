//! Fisher-vector encoding of a variable-length frame sequence under a
//! diagonal GMM.
//!
//! With gamma_t(k) the posterior of component k for frame x_t, sigma_k the
//! per-dimension standard deviation and T the frame count, the blocks are
//!
//! * weights:   (1/sqrt(w_k)) (1/T) sum_t (gamma_t(k) - w_k)
//! * means:     (1/sqrt(w_k)) (1/T) sum_t gamma_t(k) (x_t - mu_k) / sigma_k
//! * variances: (1/sqrt(2 w_k)) (1/T) sum_t gamma_t(k) ((x_t - mu_k)^2 / sigma_k^2 - 1)
//!
//! i.e. the log-likelihood gradient with respect to (softmax weight logits,
//! means, standard deviations) scaled by the diagonal approximation of the
//! inverse Fisher information. Vectors are laid out as
//! `[weights (K) | means (K x D) | variances (K x D)]`, component-major.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmx::{self, MatrixKind};
use crate::frontend::FrameMatrix;
use crate::gmm::GmmModel;

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormState {
    Raw,
    PowerNormalized,
    PowerThenL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FvLayout {
    pub num_components: usize,
    pub dim: usize,
    pub include_weights: bool,
}

impl FvLayout {
    pub fn len(&self) -> usize {
        let per = if self.include_weights { 2 * self.dim + 1 } else { 2 * self.dim };
        per * self.num_components
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn mean_offset(&self) -> usize {
        if self.include_weights {
            self.num_components
        } else {
            0
        }
    }

    fn variance_offset(&self) -> usize {
        self.mean_offset() + self.num_components * self.dim
    }

    pub fn weight_block(&self) -> std::ops::Range<usize> {
        0..self.mean_offset()
    }

    pub fn mean_block(&self) -> std::ops::Range<usize> {
        self.mean_offset()..self.variance_offset()
    }

    pub fn variance_block(&self) -> std::ops::Range<usize> {
        self.variance_offset()..self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    values: Array1<f64>,
    layout: FvLayout,
    state: NormState,
}

impl FisherVector {
    pub fn from_parts(values: Array1<f64>, layout: FvLayout, state: NormState) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape(format!("{} values", layout.len()), values.len()));
        }
        Ok(FisherVector { values, layout, state })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array1<f64> {
        self.values
    }

    pub fn layout(&self) -> FvLayout {
        self.layout
    }

    pub fn state(&self) -> NormState {
        self.state
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn weight_block(&self) -> &[f64] {
        &self.values.as_slice().unwrap()[self.layout.weight_block()]
    }

    pub fn mean_block(&self) -> &[f64] {
        &self.values.as_slice().unwrap()[self.layout.mean_block()]
    }

    pub fn variance_block(&self) -> &[f64] {
        &self.values.as_slice().unwrap()[self.layout.variance_block()]
    }
}

pub fn encode_fv(model: &GmmModel, frames: &FrameMatrix, include_weight_block: bool) -> Result<FisherVector> {
    if frames.num_frames() == 0 {
        return Err(Error::EmptyUtterance {
            id: frames.utterance_id.clone(),
        });
    }
    encode_rows(model, frames.data.view(), include_weight_block)
}

/// [`encode_fv`] over a bare frame matrix.
pub fn encode_rows(model: &GmmModel, frames: ArrayView2<f64>, include_weight_block: bool) -> Result<FisherVector> {
    let (t_count, d) = frames.dim();
    if t_count == 0 {
        return Err(Error::EmptyUtterance { id: String::new() });
    }
    if d != model.dim() {
        return Err(Error::shape(format!("{} feature columns", model.dim()), d));
    }
    let k = model.num_components();
    let layout = FvLayout {
        num_components: k,
        dim: d,
        include_weights: include_weight_block,
    };
    let std_dev = model.variances().mapv(f64::sqrt);
    let means = model.means();

    let mut occupancy = vec![0.0; k];
    let mut first = Array2::<f64>::zeros((k, d));
    let mut second = Array2::<f64>::zeros((k, d));
    let mut gamma = vec![0.0; k];
    for row in frames.rows() {
        model.posteriors_into(row, &mut gamma);
        for (c, &g) in gamma.iter().enumerate() {
            occupancy[c] += g;
            if g == 0.0 {
                continue;
            }
            for j in 0..d {
                let z = (row[j] - means[[c, j]]) / std_dev[[c, j]];
                first[[c, j]] += g * z;
                second[[c, j]] += g * (z * z - 1.0);
            }
        }
    }

    let inv_t = 1.0 / t_count as f64;
    let mut values = Array1::zeros(layout.len());
    let weights = model.weights();
    if include_weight_block {
        for c in 0..k {
            values[c] = (occupancy[c] * inv_t - weights[c]) / weights[c].sqrt();
        }
    }
    let (mo, vo) = (layout.mean_offset(), layout.variance_offset());
    for c in 0..k {
        let mean_scale = inv_t / weights[c].sqrt();
        let var_scale = inv_t / (2.0 * weights[c]).sqrt();
        for j in 0..d {
            values[mo + c * d + j] = mean_scale * first[[c, j]];
            values[vo + c * d + j] = var_scale * second[[c, j]];
        }
    }
    Ok(FisherVector {
        values,
        layout,
        state: NormState::Raw,
    })
}

/// Signed power normalization `sign(z) |z|^alpha`.
pub fn power_normalize(v: &FisherVector, alpha: f64) -> Result<FisherVector> {
    if v.state != NormState::Raw {
        return Err(Error::State(format!("power normalization needs a raw vector, got {:?}", v.state)));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(FisherVector {
        values: v.values.mapv(|z| z.signum() * z.abs().powf(alpha) * (z != 0.0) as u8 as f64),
        layout: v.layout,
        state: NormState::PowerNormalized,
    })
}

/// Scales to unit Euclidean norm; the zero vector is passed through.
pub fn l2_normalize(v: &FisherVector) -> Result<FisherVector> {
    if v.state != NormState::PowerNormalized {
        return Err(Error::State(format!("L2 normalization needs a power-normalized vector, got {:?}", v.state)));
    }
    let norm = v.values.dot(&v.values).sqrt();
    let values = if norm > 0.0 { &v.values / norm } else { v.values.clone() };
    Ok(FisherVector {
        values,
        layout: v.layout,
        state: NormState::PowerThenL2,
    })
}

/// Power normalization with `alpha` followed by L2 normalization.
pub fn normalize(v: &FisherVector, alpha: f64) -> Result<FisherVector> {
    l2_normalize(&power_normalize(v, alpha)?)
}

/// Inner product of two fully normalized Fisher vectors.
pub fn fisher_kernel(a: &FisherVector, b: &FisherVector) -> Result<f64> {
    if a.state != NormState::PowerThenL2 || b.state != NormState::PowerThenL2 {
        return Err(Error::Contract("Fisher kernel needs PN + L2 normalized vectors".into()));
    }
    if a.layout != b.layout {
        return Err(Error::Contract(format!("layouts differ: {:?} vs {:?}", a.layout, b.layout)));
    }
    Ok(a.values.dot(&b.values))
}

/// Sidecar metadata stored next to an FMX1 matrix of Fisher vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvSetInfo {
    pub format: String,
    pub model_hash: String,
    pub layout: FvLayout,
    pub block_order: Vec<String>,
    pub alpha: f64,
    pub state: NormState,
    pub ids: Vec<String>,
}

pub fn sidecar_path(matrix_path: &Path) -> std::path::PathBuf {
    matrix_path.with_extension("json")
}

/// Writes the vectors as FMX1 rows plus a JSON sidecar at
/// [`sidecar_path`].
pub fn write_fv_set(
    path: &Path,
    ids: &[String],
    vectors: &[FisherVector],
    model: &GmmModel,
    alpha: f64,
) -> Result<()> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Data("no Fisher vectors to write".into()))?;
    if ids.len() != vectors.len() {
        return Err(Error::shape(format!("{} ids", vectors.len()), ids.len()));
    }
    if vectors.iter().any(|v| v.layout != first.layout || v.state != first.state) {
        return Err(Error::Contract("mixed layouts or normalization states in one set".into()));
    }
    let mut matrix = Array2::zeros((vectors.len(), first.len()));
    for (mut row, v) in matrix.rows_mut().into_iter().zip(vectors) {
        row.assign(&v.values);
    }
    fmx::write(path, &matrix, MatrixKind::FisherVectors)?;
    let info = FvSetInfo {
        format: "fv-set-v1".into(),
        model_hash: model.fingerprint(),
        layout: first.layout,
        block_order: if first.layout.include_weights {
            vec!["weights".into(), "means".into(), "variances".into()]
        } else {
            vec!["means".into(), "variances".into()]
        },
        alpha,
        state: first.state,
        ids: ids.to_vec(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&side, e))
}

pub fn read_fv_set(path: &Path) -> Result<(Array2<f64>, FvSetInfo)> {
    let (matrix, kind) = fmx::read(path)?;
    if kind != MatrixKind::FisherVectors {
        return Err(Error::Format(format!("{} does not hold Fisher vectors", path.display())));
    }
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let info: FvSetInfo = serde_json::from_str(&text)?;
    if info.ids.len() != matrix.nrows() || info.layout.len() != matrix.ncols() {
        return Err(Error::Format("sidecar does not match matrix shape".into()));
    }
    Ok((matrix, info))
}
