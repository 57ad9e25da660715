//! Experiment protocol: manifests, stratified cross-validation with a C
//! grid, UAR scoring, late fusion, the synthetic corpus and the end-to-end
//! pipeline behind the CLI.

mod fusion;
mod manifest;
mod pipeline;
mod protocol;
mod synth;

pub use fusion::{late_fuse, PosteriorSet};
pub use manifest::{Manifest, ManifestRecord, Split};
pub use pipeline::{
    class_indices, embed_rows, encode_fv_rows, evaluate_features, extract_features, fuse_evaluations, fv_tag,
    run_fv_branch, run_pipeline, run_xvector_branch, stage_seed, train_ubm, xvec_tag, Branch, Evaluation,
    FvBranchConfig, PipelineConfig, ProtocolConfig, Report, XvecBranchConfig, REPORT_FORMAT,
};
pub use protocol::{grid_search_c, stratified_kfold, uar, CvEntry, FoldOutcome, FoldPlan, GridSearch, DEFAULT_C_GRID};
pub use synth::{
    apply_mask_channel, mask_gain, synth_corpus, synth_source, synth_utterance, Corpus, CorpusSpec, SpeakerProfile,
    CLEAR_LABEL, MANIFEST_FILE, MASK_LABEL, SPEAKER_MANIFEST_FILE,
};
