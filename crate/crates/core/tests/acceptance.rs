//! Acceptance suite: one PASS/FAIL line per criterion, run in order. The
//! lines go straight to the process stdout so they survive test capture.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use paraling::fisher::{encode_rows, normalize, power_normalize, FisherVector, FvLayout, NormState};
use paraling::frontend::{FeatureKind, FrameMatrix};
use paraling::gmm::{em_fit, EmConfig, GmmModel};
use paraling::harness::{
    class_indices, grid_search_c, late_fuse, run_pipeline, stratified_kfold, synth_corpus, uar, Branch, Corpus,
    CorpusSpec, Manifest, PipelineConfig, PosteriorSet, Report, Split, DEFAULT_C_GRID, SPEAKER_MANIFEST_FILE,
};
use paraling::svm::{dcd_train, Scaler, SolverConfig, SvmModel};
use paraling::xvector::{
    extract_embedding, stats_pooling, tdnn_backward, tdnn_forward, EmbeddingLayer, TdnnConfig, TdnnParams,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_gmm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GmmModel {
    let mut w = Array1::from_shape_fn(k, |_| rng.random_range(0.2..1.0));
    w /= w.sum();
    GmmModel::new(
        w,
        Array2::from_shape_fn((k, d), |_| rng.random_range(-1.5..1.5)),
        Array2::from_shape_fn((k, d), |_| rng.random_range(0.4..2.0)),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// 1. Fisher vector against numeric gradients of the mean log-likelihood.

/// Mean per-frame log-likelihood under weights softmax(logits), means and
/// standard deviations, written independently of the library.
fn mean_ll(logits: &[f64], mu: &Array2<f64>, sigma: &Array2<f64>, x: &Array2<f64>) -> f64 {
    let lmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
    let mut total = 0.0;
    for row in x.rows() {
        let terms: Vec<f64> = (0..logits.len())
            .map(|k| {
                let mut s = logits[k] - lz;
                for d in 0..row.len() {
                    let z = (row[d] - mu[[k, d]]) / sigma[[k, d]];
                    s -= 0.5 * z * z + sigma[[k, d]].ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
                }
                s
            })
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    }
    total / x.nrows() as f64
}

/// Central differences of `mean_ll`, scaled by the diagonal Fisher
/// normalizers 1/sqrt(w), sigma/sqrt(w), sigma/sqrt(2w).
fn numeric_fv(model: &GmmModel, x: &Array2<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (k, d) = (model.num_components(), model.dim());
    let w = model.weights();
    let logits: Vec<f64> = w.iter().map(|v| v.ln()).collect();
    let mu = model.means().clone();
    let sigma = model.variances().mapv(f64::sqrt);
    let h = 1e-5;
    let mut gw = Vec::new();
    for c in 0..k {
        let (mut p, mut m) = (logits.clone(), logits.clone());
        p[c] += h;
        m[c] -= h;
        let g = (mean_ll(&p, &mu, &sigma, x) - mean_ll(&m, &mu, &sigma, x)) / (2.0 * h);
        gw.push(g / w[c].sqrt());
    }
    let (mut gm, mut gv) = (Vec::new(), Vec::new());
    for c in 0..k {
        for j in 0..d {
            let (mut p, mut m) = (mu.clone(), mu.clone());
            p[[c, j]] += h;
            m[[c, j]] -= h;
            let g = (mean_ll(&logits, &p, &sigma, x) - mean_ll(&logits, &m, &sigma, x)) / (2.0 * h);
            gm.push(g * sigma[[c, j]] / w[c].sqrt());
            let (mut p, mut m) = (sigma.clone(), sigma.clone());
            p[[c, j]] += h;
            m[[c, j]] -= h;
            let g = (mean_ll(&logits, &mu, &p, x) - mean_ll(&logits, &mu, &m, x)) / (2.0 * h);
            gv.push(g * sigma[[c, j]] / (2.0 * w[c]).sqrt());
        }
    }
    (gw, gm, gv)
}

fn block_error(got: &[f64], want: &[f64]) -> f64 {
    let diff: Vec<f64> = got.iter().zip(want).map(|(a, b)| a - b).collect();
    // A block that is zero analytically (K = 1 weights) is compared absolutely.
    norm(&diff) / norm(want).max(1e-6)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let instances = 60;
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let k = rng.random_range(1..=3);
        let d = rng.random_range(1..=2);
        let t = rng.random_range(1..=5);
        let model = random_gmm(&mut rng, k, d);
        let x = Array2::from_shape_fn((t, d), |_| rng.random_range(-2.5..2.5));
        let fv = encode_rows(&model, x.view(), true).map_err(|e| e.to_string())?;
        let (gw, gm, gv) = numeric_fv(&model, &x);
        for (name, got, want) in [
            ("weights", fv.weight_block(), &gw),
            ("means", fv.mean_block(), &gm),
            ("variances", fv.variance_block(), &gv),
        ] {
            let err = block_error(got, want);
            worst = worst.max(err);
            ensure(err < 1e-5, || format!("instance {i} (K={k}, D={d}, T={t}) {name} block error {err:.2e}"))?;
        }
    }
    Ok(format!("{instances} instances, worst blockwise relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 2. Encoded length (2D + 1) K.

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut spot = 0;
    for d in [13usize, 40] {
        for k in (1..=9).map(|e| 1usize << e) {
            let model = random_gmm(&mut rng, k, d);
            let x = Array2::from_shape_fn((3, d), |_| normal(&mut rng));
            let len = encode_rows(&model, x.view(), true).map_err(|e| e.to_string())?.len();
            ensure(len == (2 * d + 1) * k, || format!("K={k}, D={d}: length {len}"))?;
            if (d, k) == (13, 512) {
                spot = len;
            }
        }
    }
    ensure(spot == 13824, || format!("(13, 512) gave {spot}"))?;
    Ok(format!("K in 2..512, D in {{13, 40}}; (13, 512) -> {spot}"))
}

// ---------------------------------------------------------------------------
// 3. PN + L2 unit norm, PN odd and fixing zero.

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let layout = FvLayout {
            num_components: rng.random_range(1..6),
            dim: rng.random_range(1..5),
            include_weights: rng.random_bool(0.5),
        };
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let values = Array1::from_shape_fn(layout.len(), |_| scale * normal(&mut rng));
        let raw = FisherVector::from_parts(values.clone(), layout, NormState::Raw).map_err(|e| e.to_string())?;
        let v = normalize(&raw, 0.5).map_err(|e| e.to_string())?;
        let dev = (norm(v.values().as_slice().unwrap()) - 1.0).abs();
        worst = worst.max(dev);
        ensure(dev < 1e-9, || format!("vector {i}: | |v| - 1 | = {dev:.2e}"))?;
        let neg = FisherVector::from_parts(-&values, layout, NormState::Raw).unwrap();
        let (p, q) = (power_normalize(&raw, 0.5).unwrap(), power_normalize(&neg, 0.5).unwrap());
        ensure(p.values().iter().zip(q.values()).all(|(a, b)| *a == -*b), || {
            format!("vector {i}: PN not odd")
        })?;
    }
    let zero = FisherVector::from_parts(Array1::zeros(5), FvLayout { num_components: 1, dim: 2, include_weights: true }, NormState::Raw)
        .unwrap();
    ensure(power_normalize(&zero, 0.5).unwrap().values().iter().all(|&v| v == 0.0), || "PN(0) != 0".into())?;
    Ok(format!("1000 vectors, worst norm deviation {worst:.1e}; PN odd, PN(0) = 0"))
}

// ---------------------------------------------------------------------------
// 4. EM monotonicity and two-component recovery.

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst_drop: f64 = 0.0;
    for i in 0..100 {
        let d = rng.random_range(1..=3);
        let k_true = rng.random_range(1..=3);
        let n = rng.random_range(60..200);
        let centres = Array2::from_shape_fn((k_true, d), |_| rng.random_range(-4.0..4.0));
        let x = Array2::from_shape_fn((n, d), |(r, c)| centres[[r % k_true, c]] + normal(&mut rng));
        let cfg = EmConfig {
            num_components: rng.random_range(1..=4),
            seed: i,
            ..Default::default()
        };
        let fit = em_fit(x.view(), &cfg).map_err(|e| format!("instance {i}: {e}"))?;
        for w in fit.log_likelihoods.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
            ensure(w[1] >= w[0] - 1e-8, || format!("instance {i}: LL fell {} -> {}", w[0], w[1]))?;
        }
    }
    let mut x = Array2::zeros((2000, 1));
    let noise = Normal::new(0.0, 1.0).unwrap();
    for (i, v) in x.iter_mut().enumerate() {
        *v = if i % 2 == 0 { -5.0 } else { 5.0 } + noise.sample(&mut rng);
    }
    let fit = em_fit(x.view(), &EmConfig { num_components: 2, seed: 7, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut means: Vec<f64> = fit.model.means().iter().copied().collect();
    means.sort_by(f64::total_cmp);
    ensure((means[0] + 5.0).abs() < 0.1 && (means[1] - 5.0).abs() < 0.1, || format!("recovered means {means:?}"))?;
    Ok(format!(
        "100 instances, largest LL decrease {worst_drop:.1e}; recovered means {:.3}, {:.3}",
        means[0], means[1]
    ))
}

// ---------------------------------------------------------------------------
// 5. TDNN analytic gradients against central differences.

fn criterion_5() -> Outcome {
    let cfg = TdnnConfig {
        input_dim: 3,
        frame_widths: [4; 5],
        segment_widths: [4, 4],
        num_classes: 3,
        seed: 105,
        ..Default::default()
    };
    let mut params = TdnnParams::init(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let frames = FrameMatrix::new(Array2::from_shape_fn((20, 3), |_| normal(&mut rng)), FeatureKind::Mfcc, "g");
    let label = 1;
    let acts = tdnn_forward(&params, &frames).map_err(|e| e.to_string())?;
    let live_std = acts.pool_variance.iter().filter(|&&v| v > 1e-10).count();
    ensure(live_std > 0, || "no frame5 unit varies; std branch untested".into())?;
    let (_, grads) = tdnn_backward(&params, &frames, label).map_err(|e| e.to_string())?;
    let loss = |p: &TdnnParams| tdnn_backward(p, &frames, label).unwrap().0;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut report = Vec::new();
    for l in 0..params.layers.len() {
        for part in ["weight", "bias"] {
            let n = if part == "weight" { params.layers[l].weight.len() } else { params.layers[l].bias.len() };
            let mut analytic = Vec::with_capacity(n);
            let mut numeric = Vec::with_capacity(n);
            for idx in 0..n {
                let get = |p: &mut TdnnParams| -> *mut f64 {
                    if part == "weight" {
                        p.layers[l].weight.as_slice_mut().unwrap().as_mut_ptr().wrapping_add(idx)
                    } else {
                        p.layers[l].bias.as_slice_mut().unwrap().as_mut_ptr().wrapping_add(idx)
                    }
                };
                let slot = get(&mut params);
                // SAFETY: `slot` points into `params`, which outlives these writes.
                let orig = unsafe { *slot };
                unsafe { *slot = orig + h };
                let up = loss(&params);
                unsafe { *slot = orig - h };
                let down = loss(&params);
                unsafe { *slot = orig };
                numeric.push((up - down) / (2.0 * h));
                analytic.push(if part == "weight" {
                    grads.layers[l].weight.as_slice().unwrap()[idx]
                } else {
                    grads.layers[l].bias[idx]
                });
            }
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
            let scale = norm(&analytic).max(norm(&numeric));
            let err = if scale < 1e-12 { 0.0 } else { norm(&diff) / scale };
            worst = worst.max(err);
            report.push(format!("L{l}.{part}"));
            ensure(err < 1e-4, || format!("layer {l} {part}: relative error {err:.2e}"))?;
        }
    }
    Ok(format!(
        "{} parameter groups, worst relative error {worst:.2e}, {live_std}/4 std units live",
        report.len()
    ))
}

// ---------------------------------------------------------------------------
// 6. Shapes and receptive field of the full-size network.

fn criterion_6() -> Outcome {
    let cfg = TdnnConfig {
        input_dim: 24,
        seed: 106,
        ..Default::default()
    };
    let params = TdnnParams::init(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let t = 40;
    let x = Array2::from_shape_fn((t, 24), |_| normal(&mut rng));
    let base = tdnn_forward(&params, &FrameMatrix::new(x.clone(), FeatureKind::Mfcc, "a")).map_err(|e| e.to_string())?;
    let f5 = base.frame5();
    ensure(f5.nrows() == t - 14, || format!("frame5 emitted {} frames for T={t}", f5.nrows()))?;
    ensure(base.pooled.len() == 3000, || format!("pooled length {}", base.pooled.len()))?;
    for layer in [EmbeddingLayer::Segment6, EmbeddingLayer::Segment7] {
        let e = extract_embedding(&params, &FrameMatrix::new(x.clone(), FeatureKind::Mfcc, "a"), layer)
            .map_err(|e| e.to_string())?;
        ensure(e.values.len() == 512, || format!("{layer:?} embedding length {}", e.values.len()))?;
    }
    let pooled = stats_pooling(f5.view()).map_err(|e| e.to_string())?;
    ensure(pooled.len() == 3000, || "stats pooling length".into())?;
    for changed in [0usize, 7, 20, 39] {
        let mut y = x.clone();
        y.row_mut(changed).mapv_inplace(|v| v + 1.0);
        let other = tdnn_forward(&params, &FrameMatrix::new(y, FeatureKind::Mfcc, "b")).map_err(|e| e.to_string())?;
        // Output row r is centred on input frame r + 7.
        let mut any_inside = false;
        for r in 0..f5.nrows() {
            let centre = r + 7;
            let differs = f5.row(r) != other.frame5().row(r);
            let inside = centre + 7 >= changed && centre <= changed + 7;
            ensure(!differs || inside, || format!("changing frame {changed} altered position {centre}"))?;
            any_inside |= differs;
        }
        ensure(any_inside, || format!("changing frame {changed} altered nothing"))?;
    }
    Ok("frame5 T-14 rows, pooled 3000, embeddings 512, receptive field +-7".into())
}

// ---------------------------------------------------------------------------
// 7. Linear SVM solver.

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for p in 0..50 {
        let (n, d) = (rng.random_range(6..60), rng.random_range(1..8));
        let x = Array2::from_shape_fn((n, d), |_| normal(&mut rng));
        let mut y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        y[0] = 1.0;
        y[1] = -1.0;
        let c = 10f64.powf(rng.random_range(-3.0..1.0));
        let cfg = SolverConfig { seed: p, ..Default::default() };
        let (_, _, rep) = dcd_train(x.view(), &y, c, (1.0, rng.random_range(0.5..3.0)), &cfg).map_err(|e| e.to_string())?;
        ensure(rep.alpha.iter().zip(&rep.upper_bounds).all(|(a, u)| *a >= 0.0 && a <= u), || {
            format!("problem {p}: infeasible alpha")
        })?;
        for w in rep.dual_objectives.windows(2) {
            ensure(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), || format!("problem {p}: objective rose"))?;
        }
    }
    let n = 60;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let blobs = Array2::from_shape_fn((n, 2), |(i, j)| {
        let centre = if j == 0 { 3.0 * (2.0 * labels[i] as f64 - 1.0) } else { 0.0 };
        centre + 0.5 * normal(&mut rng)
    });
    let names = ["a".to_string(), "b".to_string()];
    let (model, _) = SvmModel::fit(blobs.view(), &labels, names, 1.0, &SolverConfig::default()).map_err(|e| e.to_string())?;
    let pred = model.predict(blobs.view()).map_err(|e| e.to_string())?;
    let acc = pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / n as f64;
    ensure(acc == 1.0, || format!("separable blob accuracy {acc}"))?;

    let tight = SolverConfig { tol: 1e-10, max_epochs: 200_000, seed: 3 };
    let x = Array2::from_shape_fn((30, 3), |_| normal(&mut rng));
    let y: Vec<f64> = (0..30).map(|i| if x[[i, 0]] + 0.5 * normal(&mut rng) > 0.0 { 1.0 } else { -1.0 }).collect();
    let (w1, _, _) = dcd_train(x.view(), &y, 0.4, (1.0, 1.0), &tight).map_err(|e| e.to_string())?;
    let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
    let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
    let (w2, _, _) = dcd_train(x2.view(), &y2, 0.2, (1.0, 1.0), &tight).map_err(|e| e.to_string())?;
    let cos_dist = 1.0 - w1.dot(&w2) / (w1.dot(&w1).sqrt() * w2.dot(&w2).sqrt());
    ensure(cos_dist < 1e-6, || format!("duplicate/half-C cosine distance {cos_dist:.2e}"))?;
    Ok(format!("50 random problems feasible and monotone; blob accuracy 1.0; duplicate cosine distance {cos_dist:.1e}"))
}

// ---------------------------------------------------------------------------
// 8. Folds, leakage and UAR oracles.

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let k = 10;
    for v in 0..100 {
        let n = rng.random_range(20..200);
        let p = rng.random_range(0.1..0.9);
        let labels: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(p))).collect();
        let counts = [labels.iter().filter(|&&l| l == 0).count(), labels.iter().filter(|&&l| l == 1).count()];
        if counts.iter().any(|&c| c < k) {
            continue;
        }
        let plan = stratified_kfold(&labels, k, v).map_err(|e| e.to_string())?;
        let mut seen = vec![0; n];
        for fold in &plan.folds {
            for &i in fold {
                seen[i] += 1;
            }
            for (c, &nc) in counts.iter().enumerate() {
                let in_fold = fold.iter().filter(|&&i| labels[i] == c).count() as f64;
                ensure((in_fold - nc as f64 / k as f64).abs() < 1.0, || format!("vector {v}: class {c} has {in_fold} in a fold"))?;
            }
        }
        ensure(seen.iter().all(|&s| s == 1), || format!("vector {v}: folds not a partition"))?;
    }

    let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
    let x = Array2::from_shape_fn((60, 4), |(i, j)| labels[i] as f64 * (j == 0) as u8 as f64 + normal(&mut rng));
    let plan = stratified_kfold(&labels, k, 1).map_err(|e| e.to_string())?;
    let grid = grid_search_c(x.view(), &labels, &plan, &DEFAULT_C_GRID, &SolverConfig::default()).map_err(|e| e.to_string())?;
    for (g, folds) in grid.folds.iter().enumerate() {
        for (f, outcome) in folds.iter().enumerate() {
            let refit = Scaler::fit(x.select(Axis(0), &plan.train_indices(f)).view()).unwrap();
            ensure(refit == outcome.scaler, || format!("grid {g} fold {f}: scaler saw held-out rows"))?;
        }
    }
    let mixed = uar(&[0, 1, 1, 1], &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    let constant = uar(&[1; 10], &[0, 0, 1, 1, 1, 1, 1, 1, 1, 1]).map_err(|e| e.to_string())?;
    ensure(mixed == 0.75 && constant == 0.5, || format!("UAR oracles gave {mixed}, {constant}"))?;
    Ok("fold bound on random label vectors; scalers refit exactly; UAR 0.75 / 0.5".into())
}

// ---------------------------------------------------------------------------
// 9-11. End-to-end runs on the synthetic corpus.

const CORPUS_SEED: u64 = 2021;
const PIPELINE_SEED: u64 = 7;
/// Epochs for the full-width network within the runtime budget.
const XVEC_EPOCHS: usize = 4;

struct EndToEnd {
    root: PathBuf,
    corpus: Option<Corpus>,
    fv: Option<Report>,
    xvec: Option<Report>,
}

fn pipeline_config(branch: Branch, corpus_dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        branch,
        seed: PIPELINE_SEED,
        ..Default::default()
    };
    cfg.fv.num_components = 8;
    cfg.xvector.tdnn.epochs = XVEC_EPOCHS;
    cfg.xvector.speaker_manifest = Some(corpus_dir.join(SPEAKER_MANIFEST_FILE));
    cfg
}

fn corpus_spec() -> CorpusSpec {
    CorpusSpec {
        num_speakers: 8,
        utterances_per_class: 10,
        seed: CORPUS_SEED,
        ..Default::default()
    }
}

/// Mean over folds of the UAR recomputed from the persisted fold predictions,
/// keyed by the C column as written.
fn cv_from_fold_file(path: &Path) -> Result<BTreeMap<String, f64>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut per: BTreeMap<(String, usize), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    let name_index = |s: &str| usize::from(s != "mask");
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let entry = per.entry((rec[0].to_string(), rec[1].parse().unwrap())).or_default();
        entry.0.push(name_index(&rec[4]));
        entry.1.push(name_index(&rec[3]));
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for ((c, _), (pred, truth)) in &per {
        let e = sums.entry(c.clone()).or_default();
        e.0 += uar(pred, truth).map_err(|e| e.to_string())?;
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect())
}

fn criterion_9(state: &mut EndToEnd) -> Outcome {
    let corpus_dir = state.root.join("corpus");
    let corpus = synth_corpus(&corpus_spec(), &corpus_dir).map_err(|e| e.to_string())?;
    ensure(corpus.manifest.len() == 160, || format!("corpus has {} rows", corpus.manifest.len()))?;
    let out = state.root.join("run1");
    let report = run_pipeline(&corpus.manifest, &pipeline_config(Branch::Fv, &corpus_dir), &out).map_err(|e| e.to_string())?;
    ensure(report.cv.len() == 7, || format!("{} CV entries", report.cv.len()))?;
    let recomputed = cv_from_fold_file(&out.join(report.fold_predictions_path.as_deref().unwrap_or_default()))?;
    for entry in &report.cv {
        let key = recomputed
            .iter()
            .find(|(c, _)| c.parse::<f64>().ok() == Some(entry.c))
            .map(|(_, v)| *v);
        ensure(key.is_some_and(|v| (v - entry.uar).abs() < 1e-12), || {
            format!("C={}: report {} vs fold file {key:?}", entry.c, entry.uar)
        })?;
    }
    let cv = report.cv_uar.unwrap_or(0.0);
    let test = report.test_uar;
    let detail = format!(
        "CV UAR {cv:.4} (C={}), dev {:.4}, test UAR {test:.4}",
        report.best_c.unwrap_or(f64::NAN),
        report.dev_uar.unwrap_or(f64::NAN)
    );
    state.corpus = Some(corpus);
    state.fv = Some(report);
    ensure(cv >= 0.90 && test >= 0.85, || detail.clone())?;
    Ok(detail)
}

fn fused_uar(manifest: &Manifest, out: &Path, reports: &[&Report]) -> Result<(f64, String), String> {
    let sets = reports
        .iter()
        .map(|r| PosteriorSet::read_csv(&out.join(&r.posteriors_path), r.tag.clone()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let fused = late_fuse(&sets).map_err(|e| e.to_string())?;
    let (_, labels) = class_indices(manifest).map_err(|e| e.to_string())?;
    let truth: Vec<usize> = fused
        .ids()
        .iter()
        .map(|id| labels[manifest.records.iter().position(|r| &r.id == id).unwrap()])
        .collect();
    let test_count = manifest.indices(&[Split::Test]).len();
    ensure(truth.len() == test_count, || "fused set does not cover the test split".into())?;
    Ok((uar(&fused.predictions(), &truth).map_err(|e| e.to_string())?, fused.tag))
}

fn criterion_10(state: &mut EndToEnd) -> Outcome {
    let corpus = state.corpus.as_ref().ok_or("criterion 9 did not produce a corpus")?;
    let fv = state.fv.as_ref().ok_or("criterion 9 did not produce a report")?;
    let corpus_dir = state.root.join("corpus");
    let out = state.root.join("run1");
    let report = run_pipeline(&corpus.manifest, &pipeline_config(Branch::Xvector, &corpus_dir), &out)
        .map_err(|e| e.to_string())?;
    let (fused, tag) = fused_uar(&corpus.manifest, &out, &[fv, &report])?;
    let best_single = fv.test_uar.max(report.test_uar);
    let detail = format!(
        "x-vector CV {:.4}, test UAR {:.4}; {tag} test UAR {fused:.4} (best single {best_single:.4})",
        report.cv_uar.unwrap_or(f64::NAN),
        report.test_uar
    );
    let xvec_test = report.test_uar;
    state.xvec = Some(report);
    ensure(xvec_test >= 0.80 && fused >= best_single - 0.02, || detail.clone())?;
    Ok(detail)
}

fn criterion_11(state: &mut EndToEnd) -> Outcome {
    let fv = state.fv.as_ref().ok_or("criterion 9 did not produce a report")?;
    let xvec = state.xvec.as_ref().ok_or("criterion 10 did not produce a report")?;
    let corpus_dir = state.root.join("corpus_rerun");
    let corpus = synth_corpus(&corpus_spec(), &corpus_dir).map_err(|e| e.to_string())?;
    let out = state.root.join("run2");
    let mut compared = 0;
    for (branch, first) in [(Branch::Fv, fv), (Branch::Xvector, xvec)] {
        run_pipeline(&corpus.manifest, &pipeline_config(branch, &corpus_dir), &out).map_err(|e| e.to_string())?;
        let mut files = vec![Report::file_name(&first.tag), first.posteriors_path.clone()];
        files.extend(first.fold_predictions_path.clone());
        files.extend(first.model_path.clone());
        for f in files {
            let a = fs::read(state.root.join("run1").join(&f)).map_err(|e| format!("{f}: {e}"))?;
            let b = fs::read(out.join(&f)).map_err(|e| format!("{f}: {e}"))?;
            ensure(a == b, || format!("{f} differs between runs"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} report/posterior/model files byte-identical across reruns"))
}

// ---------------------------------------------------------------------------

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut state = EndToEnd {
        root: dir.path().to_path_buf(),
        corpus: None,
        fv: None,
        xvec: None,
    };
    type Criterion<'a> = Box<dyn FnMut(&mut EndToEnd) -> Outcome + 'a>;
    let criteria: Vec<(u32, &str, u64, Criterion)> = vec![
        (1, "FV matches finite-difference oracle", 10, Box::new(|_| criterion_1())),
        (2, "FV dimension law", 1, Box::new(|_| criterion_2())),
        (3, "PN + L2 normalization contract", 1, Box::new(|_| criterion_3())),
        (4, "EM monotonicity and recovery", 30, Box::new(|_| criterion_4())),
        (5, "TDNN gradient check", 30, Box::new(|_| criterion_5())),
        (6, "TDNN shape and context laws", 10, Box::new(|_| criterion_6())),
        (7, "SVM solver", 30, Box::new(|_| criterion_7())),
        (8, "protocol integrity", 10, Box::new(|_| criterion_8())),
        (9, "end-to-end FV branch", 300, Box::new(criterion_9)),
        (10, "end-to-end x-vector branch and fusion", 900, Box::new(criterion_10)),
        (11, "determinism of end-to-end reports", 1200, Box::new(criterion_11)),
    ];
    let mut stdout = std::io::stdout();
    let mut failures = 0;
    for (id, name, limit_s, mut run) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| run(&mut state)))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))));
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > Duration::from_secs(limit_s) => {
                Err(format!("{detail}; took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()))
            }
            other => other,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => {
                failures += 1;
                ("FAIL", d.as_str())
            }
        };
        writeln!(stdout, "criterion {id:>2} {tag} {name} [{:.1} s]: {detail}", elapsed.as_secs_f64()).unwrap();
        stdout.flush().unwrap();
    }
    writeln!(stdout, "acceptance: {} of 11 criteria passed", 11 - failures).unwrap();
    if failures > 0 {
        std::process::exit(1);
    }
}
