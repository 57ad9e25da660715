use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{Affine, EmbeddingLayer, TdnnParams, FRAME_CONTEXTS, MIN_FRAMES, NUM_LAYERS, SEGMENT6, SEGMENT7};
use crate::error::{Error, Result};
use crate::frontend::FrameMatrix;

/// Variance floor inside statistics pooling, applied before the square root.
pub const POOL_VARIANCE_FLOOR: f64 = 1e-10;

/// Concatenates, for every valid center frame, the rows at `offsets` from it.
/// Output row `i` is centered on input row `i - offsets[0]`.
pub fn splice(h: ArrayView2<f64>, offsets: &[isize]) -> Array2<f64> {
    let left = (-offsets[0]) as usize;
    let right = *offsets.last().unwrap() as usize;
    let (t, w) = h.dim();
    let out_t = t.saturating_sub(left + right);
    let mut out = Array2::zeros((out_t, offsets.len() * w));
    for (j, &o) in offsets.iter().enumerate() {
        let start = (left as isize + o) as usize;
        out.slice_mut(s![.., j * w..(j + 1) * w])
            .assign(&h.slice(s![start..start + out_t, ..]));
    }
    out
}

/// Adjoint of [`splice`]: scatters spliced-row gradients back onto the
/// `t x width` input.
fn unsplice(grad: ArrayView2<f64>, offsets: &[isize], t: usize, width: usize) -> Array2<f64> {
    let left = (-offsets[0]) as usize;
    let out_t = grad.nrows();
    let mut out = Array2::zeros((t, width));
    for (j, &o) in offsets.iter().enumerate() {
        let start = (left as isize + o) as usize;
        let mut dst = out.slice_mut(s![start..start + out_t, ..]);
        dst += &grad.slice(s![.., j * width..(j + 1) * width]);
    }
    out
}

struct Pooled {
    mean: Array1<f64>,
    variance: Array1<f64>,
    std: Array1<f64>,
}

fn pool(h: ArrayView2<f64>) -> Pooled {
    let t = h.nrows() as f64;
    let mean = h.sum_axis(Axis(0)) / t;
    let mut variance = Array1::zeros(h.ncols());
    for row in h.rows() {
        for ((v, x), m) in variance.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    variance /= t;
    let std = variance.mapv(|v: f64| v.max(POOL_VARIANCE_FLOOR).sqrt());
    Pooled { mean, variance, std }
}

/// Column means followed by column population standard deviations, with
/// the variance floored at [`POOL_VARIANCE_FLOOR`].
pub fn stats_pooling(h: ArrayView2<f64>) -> Result<Array1<f64>> {
    if h.nrows() == 0 {
        return Err(Error::Data("statistics pooling over zero frames".into()));
    }
    let p = pool(h);
    Ok(concat(&p.mean, &p.std))
}

fn concat(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(a.len() + b.len());
    out.slice_mut(s![..a.len()]).assign(a);
    out.slice_mut(s![a.len()..]).assign(b);
    out
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn affine_vec(layer: &Affine, x: &Array1<f64>) -> Array1<f64> {
    layer.weight.dot(x) + &layer.bias
}

fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

/// Everything the forward pass computes, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Activations {
    /// Spliced input of each frame layer.
    pub spliced: Vec<Array2<f64>>,
    /// Post-ReLU output of each frame layer.
    pub frame_outputs: Vec<Array2<f64>>,
    pub pool_variance: Array1<f64>,
    pub pooled: Array1<f64>,
    pub segment6_pre: Array1<f64>,
    pub segment6: Array1<f64>,
    pub segment7_pre: Array1<f64>,
    pub segment7: Array1<f64>,
    pub log_probs: Array1<f64>,
}

impl Activations {
    pub fn frame5(&self) -> &Array2<f64> {
        &self.frame_outputs[4]
    }
}

fn check_input(params: &TdnnParams, x: ArrayView2<f64>, id: &str) -> Result<()> {
    if x.ncols() != params.input_dim() {
        return Err(Error::shape(format!("{} feature columns", params.input_dim()), x.ncols()));
    }
    if x.nrows() < MIN_FRAMES {
        return Err(Error::TooShort {
            id: id.to_string(),
            frames: x.nrows(),
            needed: MIN_FRAMES,
        });
    }
    Ok(())
}

fn normalized_input(params: &TdnnParams, x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for ((v, m), s) in row.iter_mut().zip(&params.input_mean).zip(&params.input_scale) {
            *v = (*v - m) * s;
        }
    }
    out
}

/// Runs the frame layers, returning (spliced inputs, outputs); spliced
/// inputs are only retained when `keep` is set.
fn frame_layers(params: &TdnnParams, x: ArrayView2<f64>, keep: bool) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let mut h = normalized_input(params, x);
    let mut spliced = Vec::new();
    let mut outputs = Vec::with_capacity(5);
    for (i, offsets) in FRAME_CONTEXTS.iter().enumerate() {
        let layer = &params.layers[i];
        let input = splice(h.view(), offsets);
        let mut z = input.dot(&layer.weight.t());
        z += &layer.bias;
        z.mapv_inplace(relu);
        if keep {
            spliced.push(input);
        }
        h = z;
        if keep || i == 4 {
            outputs.push(h.clone());
        }
    }
    (spliced, outputs)
}

pub(crate) fn forward_rows(params: &TdnnParams, x: ArrayView2<f64>, id: &str) -> Result<Activations> {
    check_input(params, x, id)?;
    let (spliced, frame_outputs) = frame_layers(params, x, true);
    let p = pool(frame_outputs[4].view());
    let pooled = concat(&p.mean, &p.std);
    let segment6_pre = affine_vec(&params.layers[SEGMENT6], &pooled);
    let segment6 = segment6_pre.mapv(relu);
    let segment7_pre = affine_vec(&params.layers[SEGMENT7], &segment6);
    let segment7 = segment7_pre.mapv(relu);
    let logits = affine_vec(&params.layers[NUM_LAYERS - 1], &segment7);
    Ok(Activations {
        spliced,
        frame_outputs,
        pool_variance: p.variance,
        pooled,
        segment6_pre,
        segment6,
        segment7_pre,
        segment7,
        log_probs: log_softmax(&logits),
    })
}

pub fn tdnn_forward(params: &TdnnParams, frames: &FrameMatrix) -> Result<Activations> {
    forward_rows(params, frames.data.view(), &frames.utterance_id)
}

/// Cross-entropy summed over the batch: `-sum_n ln P(label_n | segment_n)`.
pub fn cross_entropy_loss(log_probs: &[Array1<f64>], labels: &[usize]) -> Result<f64> {
    if log_probs.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", log_probs.len()), labels.len()));
    }
    let mut total = 0.0;
    for (lp, &label) in log_probs.iter().zip(labels) {
        if label >= lp.len() {
            return Err(Error::Label(format!("label {label} with {} classes", lp.len())));
        }
        total -= lp[label];
    }
    Ok(total)
}

/// Parameter gradients, shaped like [`TdnnParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Affine>,
}

impl Gradients {
    pub fn zeros_like(params: &TdnnParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| Affine::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    /// Global L2 norm over every parameter gradient.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn reset(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }
}

fn add_outer(dst: &mut Array2<f64>, left: &Array1<f64>, right: &Array1<f64>) {
    let l = left.view().insert_axis(Axis(1));
    let r = right.view().insert_axis(Axis(0));
    general_mat_mul(1.0, &l, &r, 1.0, dst);
}

fn relu_mask(grad: Array1<f64>, pre: ArrayView1<f64>) -> Array1<f64> {
    let mut g = grad;
    g.iter_mut().zip(pre).for_each(|(g, &p)| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    g
}

/// Backpropagates the loss of one labeled segment into `grads`; returns the
/// loss.
pub(crate) fn accumulate_backward(
    params: &TdnnParams,
    acts: &Activations,
    label: usize,
    grads: &mut Gradients,
) -> Result<f64> {
    let n_cls = acts.log_probs.len();
    if label >= n_cls {
        return Err(Error::Label(format!("label {label} with {n_cls} classes")));
    }
    let loss = -acts.log_probs[label];
    let mut d_logits = acts.log_probs.mapv(f64::exp);
    d_logits[label] -= 1.0;

    let out = NUM_LAYERS - 1;
    add_outer(&mut grads.layers[out].weight, &d_logits, &acts.segment7);
    grads.layers[out].bias += &d_logits;
    let d7 = relu_mask(params.layers[out].weight.t().dot(&d_logits), acts.segment7_pre.view());

    add_outer(&mut grads.layers[SEGMENT7].weight, &d7, &acts.segment6);
    grads.layers[SEGMENT7].bias += &d7;
    let d6 = relu_mask(params.layers[SEGMENT7].weight.t().dot(&d7), acts.segment6_pre.view());

    add_outer(&mut grads.layers[SEGMENT6].weight, &d6, &acts.pooled);
    grads.layers[SEGMENT6].bias += &d6;
    let d_pooled = params.layers[SEGMENT6].weight.t().dot(&d6);

    let h = acts.frame5();
    let (t, w) = h.dim();
    let tf = t as f64;
    let mean = h.sum_axis(Axis(0)) / tf;
    let mut d_h = Array2::zeros((t, w));
    for j in 0..w {
        let d_mean = d_pooled[j] / tf;
        let var = acts.pool_variance[j];
        let std_coef = if var > POOL_VARIANCE_FLOOR {
            d_pooled[w + j] / (tf * var.sqrt())
        } else {
            0.0
        };
        for r in 0..t {
            d_h[[r, j]] = d_mean + std_coef * (h[[r, j]] - mean[j]);
        }
    }

    for i in (0..5).rev() {
        let mut d_z = d_h;
        d_z.zip_mut_with(&acts.frame_outputs[i], |g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        general_mat_mul(1.0, &d_z.t(), &acts.spliced[i], 1.0, &mut grads.layers[i].weight);
        grads.layers[i].bias += &d_z.sum_axis(Axis(0));
        if i == 0 {
            break;
        }
        let d_s = d_z.dot(&params.layers[i].weight);
        let prev_t = acts.frame_outputs[i - 1].nrows();
        let prev_w = acts.frame_outputs[i - 1].ncols();
        d_h = unsplice(d_s.view(), FRAME_CONTEXTS[i], prev_t, prev_w);
    }
    Ok(loss)
}

/// Cross-entropy loss and exact gradients for one labeled utterance.
pub fn tdnn_backward(params: &TdnnParams, frames: &FrameMatrix, label: usize) -> Result<(f64, Gradients)> {
    let acts = tdnn_forward(params, frames)?;
    let mut grads = Gradients::zeros_like(params);
    let loss = accumulate_backward(params, &acts, label, &mut grads)?;
    Ok((loss, grads))
}

/// Fixed-length utterance embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XVector {
    pub values: Vec<f64>,
    pub layer: EmbeddingLayer,
}

/// Affine (pre-activation) output of the chosen segment layer.
pub fn extract_embedding(params: &TdnnParams, frames: &FrameMatrix, layer: EmbeddingLayer) -> Result<XVector> {
    let x = frames.data.view();
    check_input(params, x, &frames.utterance_id)?;
    let (_, outputs) = frame_layers(params, x, false);
    let p = pool(outputs[0].view());
    let pooled = concat(&p.mean, &p.std);
    let seg6 = affine_vec(&params.layers[SEGMENT6], &pooled);
    let values = match layer {
        EmbeddingLayer::Segment6 => seg6,
        EmbeddingLayer::Segment7 => affine_vec(&params.layers[SEGMENT7], &seg6.mapv(relu)),
    };
    Ok(XVector {
        values: values.to_vec(),
        layer,
    })
}

/// Repeats the frame sequence cyclically until it has at least `min_frames`
/// rows.
pub fn pad_by_repetition(frames: &FrameMatrix, min_frames: usize) -> Result<FrameMatrix> {
    let t = frames.num_frames();
    if t == 0 {
        return Err(Error::EmptyUtterance {
            id: frames.utterance_id.clone(),
        });
    }
    if t >= min_frames {
        return Ok(frames.clone());
    }
    let data = Array2::from_shape_fn((min_frames, frames.dim()), |(r, c)| frames.data[[r % t, c]]);
    Ok(FrameMatrix::new(data, frames.kind, frames.utterance_id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FeatureKind;
    use crate::xvector::TdnnConfig;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> TdnnConfig {
        TdnnConfig {
            input_dim: 3,
            frame_widths: [4; 5],
            segment_widths: [4, 4],
            num_classes: 3,
            seed: 17,
            ..Default::default()
        }
    }

    fn random_frames(t: usize, f: usize, seed: u64) -> FrameMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameMatrix::new(
            Array2::from_shape_fn((t, f), |_| rng.random_range(-1.0..1.0)),
            FeatureKind::MfccHires,
            "utt",
        )
    }

    fn randomize_biases(params: &mut TdnnParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut params.layers {
            l.bias.mapv_inplace(|_| rng.random_range(-0.1..0.3));
        }
    }

    #[test]
    fn splice_and_unsplice_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Array2::from_shape_fn((12, 3), |_| rng.random_range(-1.0..1.0));
        for offsets in FRAME_CONTEXTS {
            let s = splice(h.view(), offsets);
            let g = Array2::from_shape_fn(s.dim(), |_| rng.random_range(-1.0..1.0));
            let lhs = (&s * &g).sum();
            let back = unsplice(g.view(), offsets, 12, 3);
            let rhs = (&h * &back).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_examples() {
        let p = stats_pooling(array![[0.0], [2.0]].view()).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 1.0]);
        let single = stats_pooling(array![[3.0, -1.0]].view()).unwrap();
        assert_eq!(single.to_vec(), vec![3.0, -1.0, 1e-5, 1e-5]);
        let a = stats_pooling(array![[1.0, 2.0], [3.0, 5.0], [-1.0, 0.5]].view()).unwrap();
        let b = stats_pooling(array![[-1.0, 0.5], [1.0, 2.0], [3.0, 5.0]].view()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(stats_pooling(Array2::<f64>::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn loss_examples() {
        let certain = vec![array![0.0, f64::NEG_INFINITY], array![f64::NEG_INFINITY, 0.0]];
        assert_eq!(cross_entropy_loss(&certain, &[0, 1]).unwrap(), 0.0);
        let uniform = vec![Array1::from_elem(4, -(4f64.ln()))];
        assert!((cross_entropy_loss(&uniform, &[2]).unwrap() - 1.38629).abs() < 1e-5);
        let batch = vec![array![-0.2, -1.7], array![-2.0, -0.14]];
        let once = cross_entropy_loss(&batch, &[0, 1]).unwrap();
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        assert!((cross_entropy_loss(&doubled, &[0, 1, 0, 1]).unwrap() - 2.0 * once).abs() < 1e-15);
        assert!(matches!(cross_entropy_loss(&batch, &[0, 2]), Err(Error::Label(_))));
    }

    #[test]
    fn too_short_utterances_are_rejected() {
        let params = TdnnParams::init(&tiny_config()).unwrap();
        let err = tdnn_forward(&params, &random_frames(14, 3, 1)).unwrap_err();
        assert!(matches!(err, Error::TooShort { frames: 14, needed: 15, .. }));
        assert!(tdnn_forward(&params, &random_frames(15, 3, 1)).is_ok());
        let padded = pad_by_repetition(&random_frames(4, 3, 1), 15).unwrap();
        assert_eq!(padded.num_frames(), 15);
        assert_eq!(padded.data.row(13), padded.data.row(1));
    }

    #[test]
    fn softmax_gradient_identity() {
        let mut params = TdnnParams::init(&tiny_config()).unwrap();
        params.layers[NUM_LAYERS - 1].weight.fill(0.0);
        params.layers[NUM_LAYERS - 1].bias.fill(0.0);
        let frames = random_frames(20, 3, 2);
        let (loss, grads) = tdnn_backward(&params, &frames, 1).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        let expected = array![1.0 / 3.0, 1.0 / 3.0 - 1.0, 1.0 / 3.0];
        for (g, e) in grads.layers[NUM_LAYERS - 1].bias.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
        // zero output weights block everything upstream
        assert!(grads.layers[0].weight.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn pooled_mean_gradient_for_constant_input() {
        // A constant sequence gives constant frame5 rows, so the std branch is
        // floored and each row receives 1/T' of the upstream mean gradient.
        let mut params = TdnnParams::init(&tiny_config()).unwrap();
        randomize_biases(&mut params, 3);
        let frames = FrameMatrix::new(Array2::from_elem((20, 3), 0.4), FeatureKind::MfccHires, "c");
        let acts = tdnn_forward(&params, &frames).unwrap();
        assert!(acts.pooled.slice(s![4..]).iter().all(|&s| s == POOL_VARIANCE_FLOOR.sqrt()));
        let (_, grads) = tdnn_backward(&params, &frames, 0).unwrap();

        // upstream gradient of the pooled mean, by hand
        let mut d_logits = acts.log_probs.mapv(f64::exp);
        d_logits[0] -= 1.0;
        let d7 = relu_mask(params.layers[7].weight.t().dot(&d_logits), acts.segment7_pre.view());
        let d6 = relu_mask(params.layers[6].weight.t().dot(&d7), acts.segment6_pre.view());
        let d_pooled = params.layers[5].weight.t().dot(&d6);
        let t5 = acts.frame5().nrows() as f64;
        assert_eq!(t5, 6.0);
        // frame5 bias gradient = sum over rows of (d_mean / T') where active
        for j in 0..4 {
            let active = acts.frame5()[[0, j]] > 0.0;
            let expected = if active { d_pooled[j] } else { 0.0 };
            assert!((grads.layers[4].bias[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn embeddings_ignore_frame_order_and_softmax() {
        let mut params = TdnnParams::init(&tiny_config()).unwrap();
        randomize_biases(&mut params, 9);
        let frames = random_frames(30, 3, 5);
        let e6 = extract_embedding(&params, &frames, EmbeddingLayer::Segment6).unwrap();
        assert_eq!(e6.values.len(), 4);
        let acts = tdnn_forward(&params, &frames).unwrap();
        assert_eq!(e6.values, acts.segment6_pre.to_vec());
        let e7 = extract_embedding(&params, &frames, EmbeddingLayer::Segment7).unwrap();
        assert_eq!(e7.values, acts.segment7_pre.to_vec());

        let mut other = params.clone();
        other.layers[7].weight.mapv_inplace(|w| w * 3.0 + 1.0);
        assert_eq!(extract_embedding(&other, &frames, EmbeddingLayer::Segment6).unwrap(), e6);

        // a constant utterance is the same multiset under any repetition order
        let a = FrameMatrix::new(Array2::from_elem((20, 3), 0.2), FeatureKind::MfccHires, "a");
        let b = FrameMatrix::new(Array2::from_elem((25, 3), 0.2), FeatureKind::MfccHires, "b");
        let ea = extract_embedding(&params, &a, EmbeddingLayer::Segment6).unwrap();
        let eb = extract_embedding(&params, &b, EmbeddingLayer::Segment6).unwrap();
        for (x, y) in ea.values.iter().zip(&eb.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_covariance() {
        let mut params = TdnnParams::init(&tiny_config()).unwrap();
        randomize_biases(&mut params, 1);
        let x = random_frames(30, 3, 8);
        let shifted = FrameMatrix::new(x.data.slice(s![1.., ..]).to_owned(), x.kind, "s");
        let a = tdnn_forward(&params, &x).unwrap();
        let b = tdnn_forward(&params, &shifted).unwrap();
        assert_eq!(a.frame5().nrows(), 16);
        assert_eq!(b.frame5().nrows(), 15);
        for r in 0..15 {
            for c in 0..4 {
                assert!((a.frame5()[[r + 1, c]] - b.frame5()[[r, c]]).abs() < 1e-12);
            }
        }
    }
}
