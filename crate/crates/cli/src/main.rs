use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use paraling::fisher::{read_fv_set, write_fv_set};
use paraling::fmx::{self, MatrixKind};
use paraling::frontend::{FeatureKind, FrameMatrix, FrontendConfig};
use paraling::gmm::GmmModel;
use paraling::harness::{
    class_indices, embed_rows, encode_fv_rows, extract_features, grid_search_c, late_fuse, run_pipeline,
    stage_seed, stratified_kfold, synth_corpus, train_ubm, uar, Branch, CorpusSpec, CvEntry, Manifest,
    PipelineConfig, PosteriorSet, Split,
};
use paraling::svm::{platt_fit, SolverConfig, SvmModel};
use paraling::xvector::{
    read_embedding_set, train_xvec, write_embedding_set, AugmentationPlan, LabeledAudio, TdnnConfig, TdnnParams,
};
use paraling::{Error, Result};

#[derive(Parser)]
#[command(name = "paraling", version, about = "Fisher-vector and x-vector paralinguistic classification")]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with optional "corpus" and "pipeline" sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus (audio, manifest.csv, speakers.csv).
    Synth,
    /// Extract VAD-filtered frame features, one FMX1 file per utterance.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        /// mfcc, mfcc-hires or plp; defaults to the FV branch front end.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Fit the background GMM on train+devel features.
    TrainUbm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
    },
    /// Encode normalized Fisher vectors for every utterance.
    EncodeFv {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        ubm: PathBuf,
    },
    /// Train the TDNN on train+devel audio with augmentation.
    TrainXvec {
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest whose labels are the network targets.
        #[arg(long)]
        speakers: Option<PathBuf>,
    },
    /// Extract embeddings for every utterance.
    ExtractXvec {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        tdnn: PathBuf,
    },
    /// Stratified cross-validation over the C grid on train+devel.
    CvGrid {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Fit the final SVM on train+devel with Platt calibration.
    TrainFinal {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        /// Regularization; defaults to best_c of --cv.
        #[arg(long)]
        c: Option<f64>,
        #[arg(long)]
        cv: Option<PathBuf>,
    },
    /// Posteriors of the rows of one split.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Average posterior files into one.
    Fuse {
        /// Repeat once per system; at least two.
        #[arg(long = "posteriors", required = true)]
        posteriors: Vec<PathBuf>,
    },
    /// UAR of a posterior file against the manifest labels.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        posteriors: PathBuf,
    },
    /// Run a whole branch (or fusion) and write its report.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// fv, xvector or fusion; defaults to the configured branch.
        #[arg(long)]
        branch: Option<String>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct Config {
    corpus: CorpusSpec,
    pipeline: PipelineConfig,
}

impl Config {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Config::default(),
        };
        if let Some(seed) = seed {
            config.corpus.seed = seed;
            config.pipeline.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Serialize, Deserialize)]
struct CvSummary {
    cv: Vec<CvEntry>,
    best_c: f64,
    cv_uar: f64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.fmx"))
}

fn load_features(manifest: &Manifest, dir: &Path, indices: &[usize]) -> Result<Vec<FrameMatrix>> {
    indices
        .iter()
        .map(|&i| {
            let id = &manifest.records[i].id;
            let (data, kind) = fmx::read(&feature_path(dir, id))?;
            let kind = FeatureKind::from_matrix_kind(kind)
                .ok_or_else(|| Error::Format(format!("{id}: not a frame-feature matrix")))?;
            Ok(FrameMatrix::new(data, kind, id.clone()))
        })
        .collect()
}

/// Rows of an FV or embedding set, reordered to follow the manifest.
fn load_aligned_matrix(manifest: &Manifest, path: &Path) -> Result<Array2<f64>> {
    let (_, kind) = fmx::read(path)?;
    let (matrix, ids) = match kind {
        MatrixKind::FisherVectors => {
            let (m, info) = read_fv_set(path)?;
            (m, info.ids)
        }
        MatrixKind::Embeddings => {
            let (m, info) = read_embedding_set(path)?;
            (m, info.ids)
        }
        other => return Err(Error::Format(format!("{other:?} matrices carry no utterance ids"))),
    };
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let rows = manifest
        .records
        .iter()
        .map(|r| {
            index
                .get(r.id.as_str())
                .copied()
                .ok_or_else(|| Error::Alignment(format!("{} has no row in {}", r.id, path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(matrix.select(Axis(0), &rows))
}

fn solver(config: &PipelineConfig) -> SolverConfig {
    SolverConfig {
        seed: stage_seed::derive(config.seed, stage_seed::SOLVER),
        ..config.protocol.solver.clone()
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref(), cli.seed)?;
    let pipeline = &config.pipeline;
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    match cli.command {
        Command::Synth => {
            let corpus = synth_corpus(&config.corpus, out)?;
            println!("wrote {} utterances to {}", corpus.manifest.len(), out.display());
        }
        Command::Features { manifest, kind } => {
            let manifest = Manifest::load(&manifest)?;
            let frontend = match kind {
                Some(k) => FrontendConfig::for_kind(k.parse()?),
                None => pipeline.fv.frontend.clone(),
            };
            let all: Vec<usize> = (0..manifest.len()).collect();
            let features = extract_features(&manifest, &all, &frontend)?;
            for f in &features {
                fmx::write(&feature_path(out, &f.utterance_id), &f.data, f.kind.matrix_kind())?;
            }
            println!("wrote {} feature matrices ({})", features.len(), frontend.feature_kind.name());
        }
        Command::TrainUbm { manifest, features } => {
            let manifest = Manifest::load(&manifest)?;
            let pool = manifest.indices(&[Split::Train, Split::Devel]);
            let feats = load_features(&manifest, &features, &pool)?;
            let refs: Vec<&FrameMatrix> = feats.iter().collect();
            let fit = train_ubm(&refs, &pipeline.fv, stage_seed::derive(pipeline.seed, stage_seed::UBM))?;
            write_text(&out.join("ubm.json"), &fit.model.to_json())?;
            println!(
                "UBM: {} components, {} iterations, converged {}",
                fit.model.num_components(),
                fit.iterations,
                fit.converged
            );
        }
        Command::EncodeFv { manifest, features, ubm } => {
            let manifest = Manifest::load(&manifest)?;
            let model = GmmModel::from_json(&read_text(&ubm)?)?;
            let all: Vec<usize> = (0..manifest.len()).collect();
            let feats = load_features(&manifest, &features, &all)?;
            let vectors = encode_fv_rows(&model, &feats, pipeline.fv.include_weights, pipeline.fv.alpha)?;
            let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
            write_fv_set(&out.join("fv.fmx"), &ids, &vectors, &model, pipeline.fv.alpha)?;
            println!("wrote {} Fisher vectors of length {}", vectors.len(), vectors[0].len());
        }
        Command::TrainXvec { manifest, speakers } => {
            let manifest = Manifest::load(&manifest)?;
            let targets = match speakers {
                Some(path) => Manifest::load(&path)?,
                None => manifest.clone(),
            };
            let by_id: HashMap<&str, &str> =
                targets.records.iter().map(|r| (r.id.as_str(), r.label.as_str())).collect();
            let pool = manifest.indices(&[Split::Train, Split::Devel]);
            let mut names: Vec<&str> = Vec::new();
            for &i in &pool {
                let id = manifest.records[i].id.as_str();
                names.push(by_id.get(id).ok_or_else(|| Error::Alignment(format!("{id} has no target")))?);
            }
            let mut classes = names.clone();
            classes.sort_unstable();
            classes.dedup();
            let audio = pool
                .iter()
                .zip(&names)
                .map(|(&i, name)| {
                    let r = &manifest.records[i];
                    Ok(LabeledAudio {
                        id: r.id.clone(),
                        audio: paraling::frontend::read_wav(&manifest.audio_path(r))?,
                        label: classes.binary_search(name).expect("target is listed"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let xv = &pipeline.xvector;
            let tdnn = TdnnConfig {
                input_dim: xv.frontend.output_dim(),
                num_classes: classes.len(),
                seed: stage_seed::derive(pipeline.seed, stage_seed::TDNN),
                ..xv.tdnn.clone()
            };
            let plan = AugmentationPlan {
                seed: stage_seed::derive(pipeline.seed, stage_seed::AUGMENT),
                ..xv.augmentation.clone()
            };
            let outcome = train_xvec(&audio, &xv.frontend, &plan, &tdnn)?;
            write_text(&out.join("tdnn.json"), &outcome.params.to_json())?;
            println!("TDNN epoch losses: {:?}", outcome.epoch_losses);
        }
        Command::ExtractXvec { manifest, features, tdnn } => {
            let manifest = Manifest::load(&manifest)?;
            let params = TdnnParams::from_json(&read_text(&tdnn)?)?;
            let all: Vec<usize> = (0..manifest.len()).collect();
            let feats = load_features(&manifest, &features, &all)?;
            let layer = pipeline.xvector.layer;
            let embeddings = embed_rows(&params, &feats, layer)?;
            let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
            write_embedding_set(&out.join("embeddings.fmx"), &ids, &embeddings, &params.fingerprint(), layer)?;
            println!("wrote {} embeddings of length {}", embeddings.nrows(), embeddings.ncols());
        }
        Command::CvGrid { manifest, matrix } => {
            let manifest = Manifest::load(&manifest)?;
            let x = load_aligned_matrix(&manifest, &matrix)?;
            let (_, labels) = class_indices(&manifest)?;
            let pool = manifest.indices(&[Split::Train, Split::Devel]);
            let y: Vec<usize> = pool.iter().map(|&i| labels[i]).collect();
            let plan = stratified_kfold(&y, pipeline.protocol.folds, stage_seed::derive(pipeline.seed, stage_seed::FOLDS))?;
            let grid = grid_search_c(x.select(Axis(0), &pool).view(), &y, &plan, &pipeline.protocol.c_grid, &solver(pipeline))?;
            let summary = CvSummary {
                cv: grid.entries.clone(),
                best_c: grid.best_c(),
                cv_uar: grid.best_uar(),
            };
            write_text(&out.join("cv.json"), &serde_json::to_string_pretty(&summary)?)?;
            println!("best C {} with mean CV UAR {:.4}", summary.best_c, summary.cv_uar);
        }
        Command::TrainFinal { manifest, matrix, c, cv } => {
            let c = match (c, cv) {
                (Some(c), _) => c,
                (None, Some(path)) => serde_json::from_str::<CvSummary>(&read_text(&path)?)?.best_c,
                (None, None) => return Err(Error::Config("train-final needs --c or --cv".into())),
            };
            let manifest = Manifest::load(&manifest)?;
            let x = load_aligned_matrix(&manifest, &matrix)?;
            let (classes, labels) = class_indices(&manifest)?;
            let pool = manifest.indices(&[Split::Train, Split::Devel]);
            let y: Vec<usize> = pool.iter().map(|&i| labels[i]).collect();
            let x_pool = x.select(Axis(0), &pool);
            let plan = stratified_kfold(&y, pipeline.protocol.folds, stage_seed::derive(pipeline.seed, stage_seed::FOLDS))?;
            let grid = grid_search_c(x_pool.view(), &y, &plan, &[c], &solver(pipeline))?;
            let names = [classes[0].clone(), classes[1].clone()];
            let (model, report) = SvmModel::fit(x_pool.view(), &y, names, c, &solver(pipeline))?;
            let positive: Vec<bool> = y.iter().map(|&l| l == 1).collect();
            let model = model.with_platt(platt_fit(&grid.out_of_fold_decisions(), &positive)?);
            write_text(&out.join("svm.json"), &model.to_json())?;
            println!(
                "SVM at C = {c}: {} epochs, duality gap {:.3e}",
                report.epochs, report.duality_gap
            );
        }
        Command::Predict { manifest, matrix, model, split } => {
            let split: Split = serde_json::from_value(serde_json::Value::String(split.clone()))
                .map_err(|_| Error::Config(format!("unknown split '{split}'")))?;
            let manifest = Manifest::load(&manifest)?;
            let model = SvmModel::from_json(&read_text(&model)?)?;
            let x = load_aligned_matrix(&manifest, &matrix)?;
            let rows = manifest.indices(&[split]);
            let post = model.predict_posteriors(x.select(Axis(0), &rows).view())?;
            let ids = rows.iter().map(|&i| manifest.records[i].id.clone()).collect();
            let set = PosteriorSet::new("predict", ids, post.rows().into_iter().map(|r| [r[0], r[1]]).collect())?;
            set.write_csv(&out.join("posteriors.csv"))?;
            println!("wrote {} posterior rows", set.len());
        }
        Command::Fuse { posteriors } => {
            let sets = posteriors
                .iter()
                .map(|p| PosteriorSet::read_csv(p, p.display().to_string()))
                .collect::<Result<Vec<_>>>()?;
            let fused = late_fuse(&sets)?;
            fused.write_csv(&out.join("fused.csv"))?;
            println!("fused {} systems over {} utterances", sets.len(), fused.len());
        }
        Command::Score { manifest, posteriors } => {
            let manifest = Manifest::load(&manifest)?;
            let (_, labels) = class_indices(&manifest)?;
            let set = PosteriorSet::read_csv(&posteriors, "score")?;
            let index: HashMap<&str, usize> =
                manifest.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
            let truth = set
                .ids()
                .iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .map(|&i| labels[i])
                        .ok_or_else(|| Error::Alignment(format!("{id} is not in the manifest")))
                })
                .collect::<Result<Vec<_>>>()?;
            let score = uar(&set.predictions(), &truth)?;
            println!("{}", serde_json::json!({ "uar": score, "utterances": set.len() }));
        }
        Command::Run { manifest, branch } => {
            let manifest = Manifest::load(&manifest)?;
            let mut pipeline = pipeline.clone();
            if let Some(b) = branch {
                pipeline.branch = serde_json::from_value::<Branch>(serde_json::Value::String(b.clone()))
                    .map_err(|_| Error::Config(format!("unknown branch '{b}'")))?;
            }
            let report = run_pipeline(&manifest, &pipeline, out)?;
            println!("{}", report.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
