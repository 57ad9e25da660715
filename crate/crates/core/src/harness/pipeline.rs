use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::fusion::{late_fuse, PosteriorSet};
use super::manifest::{Manifest, Split};
use super::protocol::{grid_search_c, stratified_kfold, uar, CvEntry, GridSearch, DEFAULT_C_GRID};
use crate::error::{Error, Result, StageExt};
use crate::fisher::{encode_fv, normalize, write_fv_set, FisherVector, DEFAULT_ALPHA};
use crate::frontend::{extract_with_vad, read_wav, FrameMatrix, FrontendConfig};
use crate::gmm::{em_fit, EmConfig, EmFit};
use crate::svm::{platt_fit, SolverConfig, SvmModel};
use crate::xvector::{
    extract_embedding, pad_by_repetition, train_xvec, write_embedding_set, AugmentationPlan, EmbeddingLayer,
    LabeledAudio, TdnnConfig, TdnnParams, MIN_FRAMES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    #[default]
    Fv,
    Xvector,
    Fusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FvBranchConfig {
    pub frontend: FrontendConfig,
    pub num_components: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub variance_floor: f64,
    pub include_weights: bool,
    pub alpha: f64,
}

impl Default for FvBranchConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        FvBranchConfig {
            frontend: FrontendConfig::mfcc(),
            num_components: 8,
            max_iters: em.max_iters,
            tol: em.tol,
            variance_floor: em.variance_floor,
            include_weights: true,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XvecBranchConfig {
    pub frontend: FrontendConfig,
    /// `input_dim` and `num_classes` are set from the data.
    pub tdnn: TdnnConfig,
    pub augmentation: AugmentationPlan,
    pub layer: EmbeddingLayer,
    /// Manifest over the same ids whose labels are the network's targets
    /// (speakers). Without it the class labels are used. Relative paths
    /// resolve against the main manifest's directory.
    pub speaker_manifest: Option<PathBuf>,
}

impl Default for XvecBranchConfig {
    fn default() -> Self {
        XvecBranchConfig {
            frontend: FrontendConfig::mfcc_hires(),
            tdnn: TdnnConfig::default(),
            augmentation: AugmentationPlan::default(),
            layer: EmbeddingLayer::Segment6,
            speaker_manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub folds: usize,
    pub c_grid: Vec<f64>,
    pub solver: SolverConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            folds: 10,
            c_grid: DEFAULT_C_GRID.to_vec(),
            solver: SolverConfig::default(),
        }
    }
}

/// Everything `run_pipeline` needs besides the manifest. Component seeds
/// are derived from `seed`; the seed fields inside sub-configs are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub branch: Branch,
    pub seed: u64,
    pub fv: FvBranchConfig,
    pub xvector: XvecBranchConfig,
    pub protocol: ProtocolConfig,
}

/// Per-stage seeds; each stage gets its own stream.
pub mod stage_seed {
    pub const UBM: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const TDNN: u64 = 3;
    pub const FOLDS: u64 = 4;
    pub const SOLVER: u64 = 5;

    pub fn derive(seed: u64, stage: u64) -> u64 {
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub tag: String,
    pub branch: Branch,
    pub seed: u64,
    pub classes: Vec<String>,
    pub systems: Vec<String>,
    pub cv: Vec<CvEntry>,
    pub best_c: Option<f64>,
    pub cv_uar: Option<f64>,
    pub dev_uar: Option<f64>,
    pub test_uar: f64,
    /// File names relative to the output directory.
    pub posteriors_path: String,
    pub fold_predictions_path: Option<String>,
    pub model_path: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<Report>,
}

pub const REPORT_FORMAT: &str = "report-v1";

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn file_name(tag: &str) -> String {
        format!("{tag}_report.json")
    }
}

/// Frame features of the given records, with VAD applied.
pub fn extract_features(manifest: &Manifest, indices: &[usize], frontend: &FrontendConfig) -> Result<Vec<FrameMatrix>> {
    indices
        .iter()
        .map(|&i| {
            let r = &manifest.records[i];
            let audio = read_wav(&manifest.audio_path(r))?;
            extract_with_vad(&audio, frontend, &r.id)
        })
        .collect()
}

/// Fits the background GMM on the pooled frames of `features`.
pub fn train_ubm(features: &[&FrameMatrix], config: &FvBranchConfig, seed: u64) -> Result<EmFit> {
    let views: Vec<ArrayView2<f64>> = features.iter().map(|f| f.data.view()).collect();
    if views.is_empty() {
        return Err(Error::Data("no frames to train the background model".into()));
    }
    let frames = ndarray::concatenate(Axis(0), &views).map_err(|_| Error::shape("equal feature widths", "mixed"))?;
    let em = EmConfig {
        num_components: config.num_components,
        max_iters: config.max_iters,
        tol: config.tol,
        variance_floor: config.variance_floor,
        seed,
    };
    em_fit(frames.view(), &em)
}

/// Power- then L2-normalized Fisher vectors, one per utterance.
pub fn encode_fv_rows(
    model: &crate::gmm::GmmModel,
    features: &[FrameMatrix],
    include_weights: bool,
    alpha: f64,
) -> Result<Vec<FisherVector>> {
    features
        .iter()
        .map(|f| normalize(&encode_fv(model, f, include_weights)?, alpha))
        .collect()
}

/// Embeddings of every utterance; short ones are padded by repetition.
pub fn embed_rows(params: &TdnnParams, features: &[FrameMatrix], layer: EmbeddingLayer) -> Result<Array2<f64>> {
    let dim = params.embedding_dim(layer);
    let mut out = Array2::zeros((features.len(), dim));
    for (mut row, f) in out.rows_mut().into_iter().zip(features) {
        let padded = pad_by_repetition(f, MIN_FRAMES)?;
        let x = extract_embedding(params, &padded, layer)?;
        row.assign(&ndarray::ArrayView1::from(&x.values));
    }
    Ok(out)
}

fn stack(rows: &[FisherVector]) -> Array2<f64> {
    let cols = rows.first().map_or(0, FisherVector::len);
    let mut out = Array2::zeros((rows.len(), cols));
    for (mut r, v) in out.rows_mut().into_iter().zip(rows) {
        r.assign(v.values());
    }
    out
}

/// Result of running the SVM protocol on one feature matrix.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: Report,
    pub grid: GridSearch,
    pub pool_indices: Vec<usize>,
    pub model: SvmModel,
    pub test_posteriors: PosteriorSet,
}

#[derive(Serialize)]
struct FoldPrediction<'a> {
    c: f64,
    fold: usize,
    id: &'a str,
    label: &'a str,
    prediction: &'a str,
}

/// Binary class names (sorted) of the train+devel pool and each record's index
/// into them.
pub fn class_indices(manifest: &Manifest) -> Result<(Vec<String>, Vec<usize>)> {
    let pool = manifest.indices(&[Split::Train, Split::Devel]);
    let classes = manifest.labels_of(&pool);
    if classes.len() != 2 {
        return Err(Error::Label(format!("expected two classes in train+devel, found {classes:?}")));
    }
    let labels = manifest
        .records
        .iter()
        .map(|r| {
            classes
                .iter()
                .position(|c| *c == r.label)
                .ok_or_else(|| Error::Label(format!("{} has label {} unseen in training", r.id, r.label)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((classes, labels))
}

/// Grid search by stratified CV over train+devel, a devel score from a
/// train-only fit, then a final train+devel fit with Platt scaling on the
/// out-of-fold decisions, scored on test. `features` has one row per
/// manifest record.
pub fn evaluate_features(
    manifest: &Manifest,
    features: ArrayView2<f64>,
    protocol: &ProtocolConfig,
    seed: u64,
    tag: &str,
    out: &Path,
) -> Result<Evaluation> {
    if features.nrows() != manifest.len() {
        return Err(Error::shape(format!("{} feature rows", manifest.len()), features.nrows()));
    }
    let (classes, labels) = class_indices(manifest)?;
    let names: [String; 2] = [classes[0].clone(), classes[1].clone()];
    let solver = SolverConfig {
        seed: stage_seed::derive(seed, stage_seed::SOLVER),
        ..protocol.solver.clone()
    };
    let pool = manifest.indices(&[Split::Train, Split::Devel]);
    let y_pool: Vec<usize> = pool.iter().map(|&i| labels[i]).collect();
    let x_pool = features.select(Axis(0), &pool);

    let grid = (|| {
        let plan = stratified_kfold(&y_pool, protocol.folds, stage_seed::derive(seed, stage_seed::FOLDS))?;
        grid_search_c(x_pool.view(), &y_pool, &plan, &protocol.c_grid, &solver)
    })()
    .stage("cv")?;
    let folds_file = format!("{tag}_cv_folds.csv");
    write_fold_predictions(&out.join(&folds_file), manifest, &pool, &y_pool, &grid, &names)?;
    let best_c = grid.best_c();

    let train = manifest.indices(&[Split::Train]);
    let devel = manifest.indices(&[Split::Devel]);
    let dev_uar = if train.is_empty() || devel.is_empty() {
        None
    } else {
        (|| {
            let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let (model, _) =
                SvmModel::fit(features.select(Axis(0), &train).view(), &y_train, names.clone(), best_c, &solver)?;
            let pred = model.predict(features.select(Axis(0), &devel).view())?;
            let truth: Vec<usize> = devel.iter().map(|&i| labels[i]).collect();
            uar(&pred, &truth)
        })()
        .stage("dev")
        .map(Some)?
    };

    let model = (|| {
        let (model, _) = SvmModel::fit(x_pool.view(), &y_pool, names.clone(), best_c, &solver)?;
        let positive: Vec<bool> = y_pool.iter().map(|&l| l == 1).collect();
        Ok(model.with_platt(platt_fit(&grid.out_of_fold_decisions(), &positive)?))
    })()
    .stage("final")?;
    let model_file = format!("{tag}_svm.json");
    let model_path = out.join(&model_file);
    fs::write(&model_path, model.to_json()).map_err(|e| Error::io(&model_path, e))?;

    let test = manifest.indices(&[Split::Test]);
    if test.is_empty() {
        return Err(Error::Data("manifest has no test utterances".into())).stage("test");
    }
    let x_test = features.select(Axis(0), &test);
    let pred = model.predict(x_test.view()).stage("test")?;
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let test_uar = uar(&pred, &truth).stage("test")?;
    let post = model.predict_posteriors(x_test.view()).stage("test")?;
    let ids: Vec<String> = test.iter().map(|&i| manifest.records[i].id.clone()).collect();
    let test_posteriors = PosteriorSet::new(tag, ids, post.rows().into_iter().map(|r| [r[0], r[1]]).collect())?;
    let post_file = format!("{tag}_test_posteriors.csv");
    test_posteriors.write_csv(&out.join(&post_file))?;

    let report = Report {
        format: REPORT_FORMAT.into(),
        tag: tag.into(),
        branch: Branch::Fv,
        seed,
        classes,
        systems: vec![tag.into()],
        cv: grid.entries.clone(),
        best_c: Some(best_c),
        cv_uar: Some(grid.best_uar()),
        dev_uar,
        test_uar,
        posteriors_path: post_file,
        fold_predictions_path: Some(folds_file),
        model_path: Some(model_file),
        components: Vec::new(),
    };
    Ok(Evaluation {
        report,
        grid,
        pool_indices: pool,
        model,
        test_posteriors,
    })
}

fn write_fold_predictions(
    path: &Path,
    manifest: &Manifest,
    pool: &[usize],
    y_pool: &[usize],
    grid: &GridSearch,
    names: &[String; 2],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (entry, folds) in grid.entries.iter().zip(&grid.folds) {
        for (f, outcome) in folds.iter().enumerate() {
            for (&i, &p) in outcome.test_indices.iter().zip(&outcome.predictions) {
                w.serialize(FoldPrediction {
                    c: entry.c,
                    fold: f,
                    id: &manifest.records[pool[i]].id,
                    label: &names[y_pool[i]],
                    prediction: &names[p],
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn fv_tag(config: &FvBranchConfig) -> String {
    format!("fv-{}-k{}", config.frontend.feature_kind.name(), config.num_components)
}

pub fn xvec_tag(config: &XvecBranchConfig) -> String {
    format!("xvec-{}", config.frontend.feature_kind.name())
}

fn pool_refs<'a>(features: &'a [FrameMatrix], manifest: &Manifest) -> Vec<&'a FrameMatrix> {
    manifest
        .indices(&[Split::Train, Split::Devel])
        .into_iter()
        .map(|i| &features[i])
        .collect()
}

/// Fisher-vector branch: features, background GMM on train+devel frames,
/// normalized FVs for every record, then the SVM protocol.
pub fn run_fv_branch(manifest: &Manifest, config: &PipelineConfig, out: &Path) -> Result<Evaluation> {
    let fv = &config.fv;
    let tag = fv_tag(fv);
    let all: Vec<usize> = (0..manifest.len()).collect();
    let features = extract_features(manifest, &all, &fv.frontend).stage("features")?;
    let ubm = train_ubm(&pool_refs(&features, manifest), fv, stage_seed::derive(config.seed, stage_seed::UBM))
        .stage("ubm")?;
    log::info!("{tag}: UBM after {} EM iterations", ubm.iterations);
    let ubm_path = out.join(format!("{tag}_ubm.json"));
    fs::write(&ubm_path, ubm.model.to_json()).map_err(|e| Error::io(&ubm_path, e))?;
    let vectors = encode_fv_rows(&ubm.model, &features, fv.include_weights, fv.alpha).stage("encode")?;
    let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    write_fv_set(&out.join(format!("{tag}_fv.fmx")), &ids, &vectors, &ubm.model, fv.alpha)?;
    let matrix = stack(&vectors);
    let mut eval = evaluate_features(manifest, matrix.view(), &config.protocol, config.seed, &tag, out)?;
    eval.report.branch = Branch::Fv;
    Ok(eval)
}

/// Network targets per record: speaker labels when configured, else the
/// class labels, as indices into their sorted distinct values.
fn xvec_targets(manifest: &Manifest, config: &XvecBranchConfig) -> Result<Vec<String>> {
    match &config.speaker_manifest {
        None => Ok(manifest.records.iter().map(|r| r.label.clone()).collect()),
        Some(path) => {
            let path = if path.is_absolute() { path.clone() } else { manifest.base_dir.join(path) };
            let speakers = Manifest::load(&path)?;
            let by_id: HashMap<&str, &str> =
                speakers.records.iter().map(|r| (r.id.as_str(), r.label.as_str())).collect();
            manifest
                .records
                .iter()
                .map(|r| {
                    by_id
                        .get(r.id.as_str())
                        .map(|s| s.to_string())
                        .ok_or_else(|| Error::Alignment(format!("{} missing from the speaker manifest", r.id)))
                })
                .collect()
        }
    }
}

/// X-vector branch: TDNN trained on train+devel audio (with augmentation)
/// against speaker targets, embeddings for every record, then the SVM
/// protocol.
pub fn run_xvector_branch(manifest: &Manifest, config: &PipelineConfig, out: &Path) -> Result<Evaluation> {
    let xv = &config.xvector;
    let tag = xvec_tag(xv);
    let targets = xvec_targets(manifest, xv).stage("tdnn")?;
    let pool = manifest.indices(&[Split::Train, Split::Devel]);
    let mut names: Vec<String> = pool.iter().map(|&i| targets[i].clone()).collect();
    names.sort();
    names.dedup();
    let outcome = (|| {
        let audio = pool
            .iter()
            .map(|&i| {
                let r = &manifest.records[i];
                Ok(LabeledAudio {
                    id: r.id.clone(),
                    audio: read_wav(&manifest.audio_path(r))?,
                    label: names.binary_search(&targets[i]).expect("pool target is listed"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tdnn = TdnnConfig {
            input_dim: xv.frontend.output_dim(),
            num_classes: names.len(),
            seed: stage_seed::derive(config.seed, stage_seed::TDNN),
            ..xv.tdnn.clone()
        };
        let plan = AugmentationPlan {
            seed: stage_seed::derive(config.seed, stage_seed::AUGMENT),
            ..xv.augmentation.clone()
        };
        train_xvec(&audio, &xv.frontend, &plan, &tdnn)
    })()
    .stage("tdnn")?;
    log::info!("{tag}: TDNN epoch losses {:?}", outcome.epoch_losses);
    let tdnn_path = out.join(format!("{tag}_tdnn.json"));
    fs::write(&tdnn_path, outcome.params.to_json()).map_err(|e| Error::io(&tdnn_path, e))?;

    let all: Vec<usize> = (0..manifest.len()).collect();
    let features = extract_features(manifest, &all, &xv.frontend).stage("features")?;
    let embeddings = embed_rows(&outcome.params, &features, xv.layer).stage("embed")?;
    let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    write_embedding_set(
        &out.join(format!("{tag}_embeddings.fmx")),
        &ids,
        &embeddings,
        &outcome.params.fingerprint(),
        xv.layer,
    )?;
    let mut eval = evaluate_features(manifest, embeddings.view(), &config.protocol, config.seed, &tag, out)?;
    eval.report.branch = Branch::Xvector;
    Ok(eval)
}

/// Runs the configured branch and writes `<tag>_report.json` into `out`.
pub fn run_pipeline(manifest: &Manifest, config: &PipelineConfig, out: &Path) -> Result<Report> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = match config.branch {
        Branch::Fv => run_fv_branch(manifest, config, out)?.report,
        Branch::Xvector => run_xvector_branch(manifest, config, out)?.report,
        Branch::Fusion => {
            let fv = run_fv_branch(manifest, config, out)?;
            let xv = run_xvector_branch(manifest, config, out)?;
            fuse_evaluations(manifest, &[&fv, &xv], config.seed, out)?
        }
    };
    let path = out.join(Report::file_name(&report.tag));
    fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Late fusion of the systems' test posteriors, scored by argmax.
pub fn fuse_evaluations(manifest: &Manifest, systems: &[&Evaluation], seed: u64, out: &Path) -> Result<Report> {
    let sets: Vec<PosteriorSet> = systems.iter().map(|e| e.test_posteriors.clone()).collect();
    let fused = late_fuse(&sets).stage("fusion")?;
    let (classes, labels) = class_indices(manifest)?;
    let index: HashMap<&str, usize> = manifest.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let truth: Vec<usize> = fused
        .ids()
        .iter()
        .map(|id| index.get(id.as_str()).map(|&i| labels[i]))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Alignment("fused ids missing from the manifest".into()))?;
    let test_uar = uar(&fused.predictions(), &truth).stage("fusion")?;
    let tag = "fusion".to_string();
    let post_file = format!("{tag}_test_posteriors.csv");
    fused.write_csv(&out.join(&post_file))?;
    let mut components: Vec<Report> = systems.iter().map(|e| e.report.clone()).collect();
    components.sort_by(|a, b| a.tag.cmp(&b.tag));
    Ok(Report {
        format: REPORT_FORMAT.into(),
        tag,
        branch: Branch::Fusion,
        seed,
        classes,
        systems: components.iter().map(|r| r.tag.clone()).collect(),
        cv: Vec::new(),
        best_c: None,
        cv_uar: None,
        dev_uar: None,
        test_uar,
        posteriors_path: post_file,
        fold_predictions_path: None,
        model_path: None,
        components,
    })
}
