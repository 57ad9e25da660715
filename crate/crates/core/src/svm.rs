//! Binary linear SVM back-end: column standardization, balanced class
//! weights, a dual coordinate descent solver for the L1 (hinge) loss, and
//! Platt-scaled posteriors.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-12;

/// Per-column standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Population mean and standard deviation of each column. Columns whose
    /// deviation falls under the floor map to zero.
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Data("cannot fit a scaler on zero rows".into()));
        }
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::<f64>::zeros(x.ncols());
        for row in x.rows() {
            for ((v, &xi), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (xi - m) * (xi - m);
            }
        }
        let std = var.mapv(|v| (v / n).sqrt());
        Ok(Scaler {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::shape(format!("{} columns", self.dim()), x.ncols()));
        }
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = if s < STD_FLOOR { 0.0 } else { (*v - m) / s };
            }
        }
        Ok(out)
    }
}

/// Weight n / (k * n_c) for each class index in `0..num_classes`.
pub fn balanced_class_weights(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::Label(format!("label {l} outside {num_classes} classes")))? += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 || present < num_classes {
        return Err(Error::Data(format!(
            "balanced weights need every class present, got counts {counts:?}"
        )));
    }
    let n = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| n / (num_classes as f64 * c as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Stop once the largest projected-gradient violation of an epoch is below this.
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-4,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    /// Dual objective 0.5*|w|^2 - sum(alpha) after each epoch (minimized).
    pub dual_objectives: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
    pub max_violation: f64,
    pub primal_objective: f64,
    /// Primal minus negated dual objective; non-negative up to rounding.
    pub duality_gap: f64,
    pub alpha: Vec<f64>,
    pub upper_bounds: Vec<f64>,
}

/// Hinge-loss linear SVM by dual coordinate descent. `y` holds +-1 and
/// `weights` is (weight of -1, weight of +1). The bias is learned as the
/// coefficient of a constant unit feature and is therefore regularized.
pub fn dcd_train(
    x: ArrayView2<f64>,
    y: &[f64],
    c: f64,
    weights: (f64, f64),
    config: &SolverConfig,
) -> Result<(Array1<f64>, f64, SolverReport)> {
    let (n, d) = x.dim();
    if y.len() != n {
        return Err(Error::shape(format!("{n} labels"), y.len()));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Parameter(format!("C must be positive, got {c}")));
    }
    if !(weights.0 > 0.0 && weights.1 > 0.0) {
        return Err(Error::Parameter("class weights must be positive".into()));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Label("SVM targets must be +1 or -1".into()));
    }
    if !y.contains(&1.0) || !y.contains(&-1.0) {
        return Err(Error::Data("SVM training needs both classes".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }

    let upper: Vec<f64> = y
        .iter()
        .map(|&t| c * if t > 0.0 { weights.1 } else { weights.0 })
        .collect();
    let qii: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dual_objectives = Vec::new();
    let mut converged = false;
    let mut max_violation = f64::INFINITY;
    let mut epochs = 0;

    while epochs < config.max_epochs {
        order.shuffle(&mut rng);
        max_violation = 0.0f64;
        for &i in &order {
            let xi = x.row(i);
            let g = y[i] * (w.dot(&xi) + b) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= upper[i] {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, upper[i]);
                let delta = (alpha[i] - old) * y[i];
                if delta != 0.0 {
                    w.scaled_add(delta, &xi);
                    b += delta;
                }
            }
        }
        epochs += 1;
        dual_objectives.push(0.5 * (w.dot(&w) + b * b) - alpha.iter().sum::<f64>());
        if max_violation < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("dual coordinate descent stopped at the epoch cap with violation {max_violation:.3e}");
    }

    let hinge: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .zip(&upper)
        .map(|((r, &t), &u)| u * (1.0 - t * (w.dot(&r) + b)).max(0.0))
        .sum();
    let reg = 0.5 * (w.dot(&w) + b * b);
    let primal_objective = reg + hinge;
    let dual = *dual_objectives.last().unwrap_or(&0.0);
    let report = SolverReport {
        dual_objectives,
        epochs,
        converged,
        max_violation,
        primal_objective,
        duality_gap: primal_objective + dual,
        alpha,
        upper_bounds: upper,
    };
    Ok((w, b, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Platt {
    pub a: f64,
    pub b: f64,
}

impl Platt {
    /// P(class +1 | f) = 1 / (1 + exp(a f + b)), evaluated without overflow.
    pub fn positive_posterior(&self, f: f64) -> f64 {
        let z = self.a * f + self.b;
        if z >= 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        }
    }
}

const PLATT_MAX_ITERS: usize = 100;
const PLATT_MIN_STEP: f64 = 1e-10;
const PLATT_SIGMA: f64 = 1e-12;
const PLATT_EPS: f64 = 1e-5;

/// Regularized maximum-likelihood sigmoid fit with smoothed targets, by
/// Newton's method with backtracking line search.
pub fn platt_fit(decisions: &[f64], positive: &[bool]) -> Result<Platt> {
    if decisions.len() != positive.len() {
        return Err(Error::shape(format!("{} labels", decisions.len()), positive.len()));
    }
    let prior1 = positive.iter().filter(|&&p| p).count() as f64;
    let prior0 = positive.len() as f64 - prior1;
    if prior1 == 0.0 || prior0 == 0.0 {
        return Err(Error::Data("Platt scaling needs both classes".into()));
    }
    if decisions.iter().any(|f| !f.is_finite()) {
        return Err(Error::Data("non-finite decision value".into()));
    }
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let t: Vec<f64> = positive.iter().map(|&p| if p { hi } else { lo }).collect();

    // Negative log-likelihood written to avoid overflow in exp.
    let objective = |a: f64, b: f64| -> f64 {
        decisions
            .iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = f * a + b;
                if z >= 0.0 {
                    ti * z + (1.0 + (-z).exp()).ln()
                } else {
                    (ti - 1.0) * z + (1.0 + z.exp()).ln()
                }
            })
            .sum()
    };

    let mut a = 0.0;
    let mut b = ((prior0 + 1.0) / (prior1 + 1.0)).ln();
    let mut fval = objective(a, b);
    for _ in 0..PLATT_MAX_ITERS {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (PLATT_SIGMA, PLATT_SIGMA, 0.0, 0.0, 0.0);
        for (&f, &ti) in decisions.iter().zip(&t) {
            let z = f * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < PLATT_EPS && g2.abs() < PLATT_EPS {
            return Ok(Platt { a, b });
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        loop {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
            if step < PLATT_MIN_STEP {
                return Err(Error::Calibration("line search failed to decrease the objective".into()));
            }
        }
    }
    Err(Error::Calibration(format!(
        "Newton iteration did not converge in {PLATT_MAX_ITERS} steps"
    )))
}

/// A trained binary classifier over raw (unstandardized) features. Class
/// index 1 is the SVM's +1 side.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub w: Array1<f64>,
    pub b: f64,
    pub classes: [String; 2],
    pub c: f64,
    pub class_weights: [f64; 2],
    pub scaler: Scaler,
    pub platt: Option<Platt>,
}

#[derive(Serialize, Deserialize)]
struct SvmJson {
    format: String,
    w: Vec<f64>,
    b: f64,
    classes: Vec<String>,
    c: f64,
    class_weights: Vec<f64>,
    platt: Option<Platt>,
    scaler: Scaler,
}

const SVM_FORMAT: &str = "svm-v1";

impl SvmModel {
    /// Standardizes `x`, derives balanced weights from `labels` (0 or 1) and
    /// solves the dual. Returns the solver report alongside the model.
    pub fn fit(
        x: ArrayView2<f64>,
        labels: &[usize],
        classes: [String; 2],
        c: f64,
        solver: &SolverConfig,
    ) -> Result<(Self, SolverReport)> {
        if classes[0] == classes[1] {
            return Err(Error::Label("class labels must be distinct".into()));
        }
        if labels.len() != x.nrows() {
            return Err(Error::shape(format!("{} labels", x.nrows()), labels.len()));
        }
        let scaler = Scaler::fit(x)?;
        let z = scaler.transform(x)?;
        let cw = balanced_class_weights(labels, 2)?;
        let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let (w, b, report) = dcd_train(z.view(), &y, c, (cw[0], cw[1]), solver)?;
        let model = SvmModel {
            w,
            b,
            classes,
            c,
            class_weights: [cw[0], cw[1]],
            scaler,
            platt: None,
        };
        Ok((model, report))
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// w . standardize(x) + b for each row.
    pub fn decision_values(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let z = self.scaler.transform(x)?;
        Ok(z.dot(&self.w) + self.b)
    }

    pub fn decision_value(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(self.decision_values(x.insert_axis(Axis(0)))?[0])
    }

    /// Class index per row; f = 0 goes to class 1.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(self
            .decision_values(x)?
            .iter()
            .map(|&f| usize::from(f >= 0.0))
            .collect())
    }

    pub fn with_platt(mut self, platt: Platt) -> Self {
        self.platt = Some(platt);
        self
    }

    /// Rows of (p_class0, p_class1); needs a fitted calibration.
    pub fn predict_posteriors(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let platt = self
            .platt
            .ok_or_else(|| Error::Calibration("model has no Platt calibration".into()))?;
        let f = self.decision_values(x)?;
        let mut out = Array2::zeros((f.len(), 2));
        for (mut row, &fi) in out.rows_mut().into_iter().zip(&f) {
            let p1 = platt.positive_posterior(fi);
            row[1] = p1;
            row[0] = 1.0 - p1;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let doc = SvmJson {
            format: SVM_FORMAT.into(),
            w: self.w.to_vec(),
            b: self.b,
            classes: self.classes.to_vec(),
            c: self.c,
            class_weights: self.class_weights.to_vec(),
            platt: self.platt,
            scaler: self.scaler.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("svm model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SvmJson = serde_json::from_str(text)?;
        if doc.format != SVM_FORMAT {
            return Err(Error::UnsupportedFormat(format!("expected {SVM_FORMAT}, got {}", doc.format)));
        }
        let classes: [String; 2] = doc
            .classes
            .try_into()
            .map_err(|_| Error::Format("an SVM model has exactly two classes".into()))?;
        let class_weights: [f64; 2] = doc
            .class_weights
            .try_into()
            .map_err(|_| Error::Format("expected two class weights".into()))?;
        if doc.w.len() != doc.scaler.dim() || doc.scaler.std.len() != doc.scaler.dim() {
            return Err(Error::Format("weight and scaler dimensions disagree".into()));
        }
        if classes[0] == classes[1] {
            return Err(Error::Format("class labels must be distinct".into()));
        }
        if doc.w.iter().chain([&doc.b, &doc.c]).any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite model parameter".into()));
        }
        Ok(SvmModel {
            w: Array1::from(doc.w),
            b: doc.b,
            classes,
            c: doc.c,
            class_weights,
            scaler: doc.scaler,
            platt: doc.platt,
        })
    }
}
