//! Diagonal-covariance Gaussian mixture (the UBM behind Fisher-vector
//! encoding), trained by EM from a k-means++ initialization.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;
const ABS_VARIANCE_FLOOR: f64 = 1e-10;
const EMPTY_COMPONENT: f64 = 1e-8;
const MAX_LLOYD_ITERS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Array1<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
    /// ln w_k - 0.5 * sum_d ln(2 pi var_kd)
    log_consts: Array1<f64>,
}

impl GmmModel {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Parameter("a mixture needs at least one component".into()));
        }
        if means.nrows() != k || variances.dim() != means.dim() {
            return Err(Error::shape(
                format!("{k} x D means and variances"),
                format!("{:?} / {:?}", means.dim(), variances.dim()),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || (weights.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter("weights must form a probability simplex".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Parameter("means must be finite and variances positive".into()));
        }
        let log_consts = Array1::from_iter((0..k).map(|c| {
            weights[c].ln() - 0.5 * variances.row(c).iter().map(|v| LN_2PI + v.ln()).sum::<f64>()
        }));
        Ok(GmmModel {
            weights,
            means,
            variances,
            log_consts,
        })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    fn check_dim(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!("vector of length {}", self.dim()), x.len()));
        }
        Ok(())
    }

    /// ln(w_k N(x; mu_k, var_k)) for every component.
    fn log_joint_into(&self, x: ArrayView1<f64>, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mut q = 0.0;
            for ((xi, mu), var) in x.iter().zip(self.means.row(c)).zip(self.variances.row(c)) {
                let d = xi - mu;
                q += d * d / var;
            }
            *o = self.log_consts[c] - 0.5 * q;
        }
    }

    /// Log-density of the mixture at `x`, via log-sum-exp.
    pub fn log_likelihood(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let mut buf = vec![0.0; self.num_components()];
        self.log_joint_into(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    /// Component posteriors at `x`.
    pub fn responsibilities(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_dim(x)?;
        let mut buf = vec![0.0; self.num_components()];
        self.log_joint_into(x, &mut buf);
        let total = log_sum_exp(&buf);
        let mut gamma = Array1::from_iter(buf.iter().map(|l| (l - total).exp()));
        let sum = gamma.sum();
        gamma.mapv_inplace(|g| g / sum);
        Ok(gamma)
    }

    /// Writes posteriors into `gamma` and returns the log-likelihood. No
    /// dimension check; callers validate once per batch.
    pub(crate) fn posteriors_into(&self, x: ArrayView1<f64>, gamma: &mut [f64]) -> f64 {
        self.log_joint_into(x, gamma);
        let total = log_sum_exp(gamma);
        gamma.iter_mut().for_each(|g| *g = (*g - total).exp());
        let sum: f64 = gamma.iter().sum();
        gamma.iter_mut().for_each(|g| *g /= sum);
        total
    }

    /// Mean per-frame log-likelihood of `frames`.
    pub fn mean_log_likelihood(&self, frames: ArrayView2<f64>) -> Result<f64> {
        if frames.ncols() != self.dim() {
            return Err(Error::shape(format!("{} columns", self.dim()), frames.ncols()));
        }
        if frames.nrows() == 0 {
            return Err(Error::Data("no frames".into()));
        }
        let mut buf = vec![0.0; self.num_components()];
        let mut total = 0.0;
        for row in frames.rows() {
            self.log_joint_into(row, &mut buf);
            total += log_sum_exp(&buf);
        }
        Ok(total / frames.nrows() as f64)
    }

    /// The same mixture with components reordered: new component `i` is old
    /// component `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.num_components();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Parameter("not a permutation of the components".into()));
        }
        GmmModel::new(
            self.weights.select(Axis(0), perm),
            self.means.select(Axis(0), perm),
            self.variances.select(Axis(0), perm),
        )
    }

    pub fn to_json(&self) -> String {
        let doc = GmmDocument {
            format: GMM_FORMAT.to_string(),
            k: self.num_components(),
            d: self.dim(),
            weights: self.weights.to_vec(),
            means: self.means.rows().into_iter().map(|r| r.to_vec()).collect(),
            variances: self.variances.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_string(&doc).expect("plain numeric document")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GmmDocument = serde_json::from_str(text)?;
        if doc.format != GMM_FORMAT {
            return Err(Error::Format(format!("expected format {GMM_FORMAT}, got {}", doc.format)));
        }
        let to_matrix = |rows: Vec<Vec<f64>>, what: &str| -> Result<Array2<f64>> {
            if rows.len() != doc.k || rows.iter().any(|r| r.len() != doc.d) {
                return Err(Error::Format(format!("{what} must be {} x {}", doc.k, doc.d)));
            }
            Ok(Array2::from_shape_vec((doc.k, doc.d), rows.concat()).expect("checked"))
        };
        if doc.weights.len() != doc.k {
            return Err(Error::Format(format!("weights must have length {}", doc.k)));
        }
        GmmModel::new(
            Array1::from(doc.weights),
            to_matrix(doc.means, "means")?,
            to_matrix(doc.variances, "variances")?,
        )
    }

    /// SHA-256 of the canonical JSON document, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

const GMM_FORMAT: &str = "gmm-v1";

#[derive(Serialize, Deserialize)]
struct GmmDocument {
    format: String,
    k: usize,
    d: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub num_components: usize,
    pub max_iters: usize,
    /// Stop once the mean per-frame log-likelihood improves by less than this.
    pub tol: f64,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            num_components: 8,
            max_iters: 100,
            tol: 1e-4,
            variance_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GmmModel,
    /// Mean per-frame log-likelihood of each model visited, starting with the
    /// initialization.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeds: usize,
}

fn validate_frames(frames: ArrayView2<f64>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    if frames.ncols() == 0 {
        return Err(Error::Data("frames have zero dimensions".into()));
    }
    if frames.nrows() < k {
        return Err(Error::DegenerateInit(format!(
            "{} frames cannot seed {k} components",
            frames.nrows()
        )));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("frames contain non-finite values".into()));
    }
    Ok(())
}

fn global_variance_floor(frames: ArrayView2<f64>, factor: f64) -> Array1<f64> {
    frames
        .var_axis(Axis(0), 0.0)
        .mapv(|v| (factor * v).max(ABS_VARIANCE_FLOOR))
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding followed by at most 20 Lloyd iterations. Variances are
/// floored at 1e-3 of the global variance.
pub fn kmeans_init(frames: ArrayView2<f64>, k: usize, seed: u64) -> Result<GmmModel> {
    kmeans_init_floored(frames, k, seed, EmConfig::default().variance_floor)
}

fn kmeans_init_floored(frames: ArrayView2<f64>, k: usize, seed: u64, floor_factor: f64) -> Result<GmmModel> {
    validate_frames(frames, k)?;
    let n = frames.nrows();
    let mut distinct = HashSet::new();
    for row in frames.rows() {
        distinct.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
        if distinct.len() >= k {
            break;
        }
    }
    if distinct.len() < k {
        return Err(Error::DegenerateInit(format!(
            "only {} distinct frames for {k} components",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::zeros((k, frames.ncols()));
    let first = ((rng.random::<f64>() * n as f64) as usize).min(n - 1);
    centers.row_mut(0).assign(&frames.row(first));
    let mut nearest: Vec<f64> = frames.rows().into_iter().map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in nearest.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc > target {
                pick = Some(i);
                break;
            }
        }
        // rounding can leave target beyond the final partial sum
        let pick = pick.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).expect("k distinct frames"));
        centers.row_mut(c).assign(&frames.row(pick));
        for (i, row) in frames.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(row, centers.row(c)));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (i, row) in frames.rows().into_iter().enumerate() {
            let best = (0..k)
                .map(|c| sq_dist(row, centers.row(c)))
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (c, d)| if d < acc.1 { (c, d) } else { acc })
                .0;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, row) in frames.rows().into_iter().enumerate() {
            sums.row_mut(assign[i]).scaled_add(1.0, &row);
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // empty cluster takes the frame worst served by its center
                let far = (0..n)
                    .map(|i| sq_dist(frames.row(i), centers.row(assign[i])))
                    .enumerate()
                    .fold((0, -1.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc })
                    .0;
                centers.row_mut(c).assign(&frames.row(far));
                assign[far] = c;
            }
        }
    }

    let floor = global_variance_floor(frames, floor_factor);
    let mut counts = vec![0usize; k];
    let mut variances = Array2::<f64>::zeros(centers.dim());
    for (i, row) in frames.rows().into_iter().enumerate() {
        let c = assign[i];
        counts[c] += 1;
        for ((v, x), m) in variances.row_mut(c).iter_mut().zip(row).zip(centers.row(c)) {
            *v += (x - m).powi(2);
        }
    }
    for c in 0..k {
        let count = counts[c].max(1) as f64;
        for (v, f) in variances.row_mut(c).iter_mut().zip(&floor) {
            *v = (*v / count).max(*f);
        }
    }
    let weights = Array1::from_iter(counts.iter().map(|&c| c as f64 / n as f64));
    GmmModel::new(weights, centers, variances)
}

/// EM for a diagonal GMM, initialized by [`kmeans_init`].
pub fn em_fit(frames: ArrayView2<f64>, config: &EmConfig) -> Result<EmFit> {
    let k = config.num_components;
    if config.max_iters == 0 {
        return Err(Error::Parameter("max_iters must be at least 1".into()));
    }
    if !(config.variance_floor > 0.0) {
        return Err(Error::Parameter("variance floor must be positive".into()));
    }
    let mut model = kmeans_init_floored(frames, k, config.seed, config.variance_floor)?;
    let floor = global_variance_floor(frames, config.variance_floor);
    let global_var = frames.var_axis(Axis(0), 0.0).mapv(|v| v.max(ABS_VARIANCE_FLOOR));
    let n = frames.nrows();
    let d = frames.ncols();

    let mut trace = Vec::new();
    let mut reseeds = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut gamma = vec![0.0; k];
    let mut frame_ll = vec![0.0; n];
    loop {
        // E-step against the current model, accumulating statistics centered
        // on its means for numerical stability.
        let mut occ = Array1::<f64>::zeros(k);
        let mut first = Array2::<f64>::zeros((k, d));
        let mut second = Array2::<f64>::zeros((k, d));
        let mut total_ll = 0.0;
        for (t, row) in frames.rows().into_iter().enumerate() {
            let ll = model.posteriors_into(row, &mut gamma);
            frame_ll[t] = ll;
            total_ll += ll;
            for (c, &g) in gamma.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                occ[c] += g;
                let mean = model.means.row(c);
                let mut f = first.row_mut(c);
                let mut s = second.row_mut(c);
                for j in 0..d {
                    let dev = row[j] - mean[j];
                    f[j] += g * dev;
                    s[j] += g * dev * dev;
                }
            }
        }
        let mean_ll = total_ll / n as f64;
        let improved = trace.last().map(|&prev: &f64| mean_ll - prev);
        trace.push(mean_ll);
        if let Some(delta) = improved {
            if delta < config.tol {
                converged = true;
                break;
            }
        }
        if iterations == config.max_iters {
            break;
        }
        iterations += 1;

        // M-step
        let mut weights = Array1::<f64>::zeros(k);
        let mut means = model.means.clone();
        let mut variances = Array2::<f64>::zeros((k, d));
        let mut worst: Option<Vec<usize>> = None;
        for c in 0..k {
            if occ[c] < EMPTY_COMPONENT {
                reseeds += 1;
                if reseeds > k {
                    return Err(Error::Convergence(format!(
                        "components emptied {reseeds} times for K = {k}"
                    )));
                }
                let order = worst.get_or_insert_with(|| {
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.sort_by(|&a, &b| frame_ll[a].total_cmp(&frame_ll[b]).then(a.cmp(&b)));
                    idx
                });
                let frame = order[(reseeds - 1) % n];
                log::warn!("GMM component {c} is empty; re-seeding at frame {frame}");
                means.row_mut(c).assign(&frames.row(frame));
                variances.row_mut(c).assign(&global_var);
                weights[c] = 1.0 / n as f64;
                continue;
            }
            weights[c] = occ[c] / n as f64;
            for j in 0..d {
                let shift = first[[c, j]] / occ[c];
                means[[c, j]] = model.means[[c, j]] + shift;
                let var = second[[c, j]] / occ[c] - shift * shift;
                variances[[c, j]] = var.max(floor[j]);
            }
        }
        let total: f64 = weights.sum();
        weights.mapv_inplace(|w| w / total);
        model = GmmModel::new(weights, means, variances)?;
    }
    Ok(EmFit {
        model,
        log_likelihoods: trace,
        iterations,
        converged,
        reseeds,
    })
}
