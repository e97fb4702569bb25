//! Context-aware transformer transducer: reverse-mode autodiff, the
//! transducer model with cross-attention context biasing, its alignment
//! loss, decoders, synthetic data and evaluation.

pub mod autodiff;
pub mod biasing;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod transducer;

pub use autodiff::{Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, Variant};
pub use context::{Category, ContextPhrase};
pub use data::{generate_corpus, make_splits, Corpus, CorpusSpec, Partition, SplitKey};
pub use eval::{evaluate, wer, werr, DecodeSettings, EvalReport};
pub use model::CattModel;
pub use error::{Error, Result};
pub use params::{Binder, ParamId, ParamStore};
pub use tensor::Tensor;
pub use tokenizer::Tokenizer;
pub use train::{ExperimentConfig, TrainConfig};
