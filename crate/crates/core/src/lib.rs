//! Paralinguistic utterance classification with two encoders over
//! frame-level cepstral features: Fisher vectors under a diagonal GMM and
//! TDNN x-vector embeddings. Both feed a linear SVM evaluated with
//! stratified cross-validation and unweighted average recall, and their
//! posteriors can be fused late.

pub mod error;
pub mod fisher;
pub mod fmx;
pub mod frontend;
pub mod gmm;
pub mod harness;
pub mod svm;
pub mod xvector;

pub use error::{Error, Result};
