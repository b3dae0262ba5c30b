//! Cross-lingual entity linking toolkit.
//!
//! The pipeline links textual mentions to English page titles:
//!
//! 1. [`kb`] ingests a line-oriented corpus and builds anchor-title indices
//!    with link-count priors, merging foreign indices into English title
//!    space via inter-language links.
//! 2. [`embed`] loads word-embedding tables, fits least-squares cross-lingual
//!    alignments, and produces IDF-weighted page embeddings.
//! 3. [`context`] gathers each mention's sentence and window contexts and
//!    encodes them with a sentence CNN and a forward/backward LSTM + neural
//!    tensor network pathway.
//! 4. [`features`] turns encoder outputs into a fixed-width similarity
//!    feature vector (RBF-binned cosines, lexical decomposition/composition,
//!    multi-perspective cosines, anchor priors).
//! 5. [`ranker`] trains a binary consistency classifier over those features
//!    and decodes mentions to titles or NIL. Once trained on English it
//!    decodes any language whose embeddings are aligned into English space.
//!
//! Everything is built on [`tensor`], a small f64 tape autodiff engine with
//! a finite-difference gradient checker.

pub mod config;
pub mod context;
pub mod embed;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradsuite;
pub mod kb;
pub mod ranker;
pub mod synth;
pub mod tensor;

pub use config::RunConfig;
pub use error::Error;
pub use eval::EvalReport;
pub use kb::{AnchorIndex, CorpusStats, InterLangMap, WikiPage};
pub use ranker::{LinkDecision, Model, Resources};
pub use tensor::{Parameter, SeededRng, Tensor};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
