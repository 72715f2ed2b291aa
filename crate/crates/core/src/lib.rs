//! Two-stage biomedical named entity recognition: span boundaries first,
//! then typing each span by its nearest neighbour in an embedded dictionary.
//!
//! The crate is organised by stage. [`corpus`] reads and writes the text
//! formats, [`embedding`] turns surfaces into unit vectors, [`matcher`] does
//! nearest-entry typing, [`dictionary`] refines the dictionary against a dev
//! split, [`ebd`] covers boundary labels, losses and decoding, [`ensemble`]
//! votes across dictionaries and [`evaluator`] scores the result.
//! [`pipeline`] wires these together over files.

pub mod config;
pub mod corpus;
pub mod dictionary;
pub mod ebd;
pub mod embedding;
pub mod ensemble;
pub mod error;
pub mod evaluator;
pub mod matcher;
pub mod pipeline;
pub mod rng;

pub use config::PipelineConfig;
pub use corpus::{Corpus, Sentence, Span, TaggingSpace, Token, TypedEntity};
pub use dictionary::{refine, DevExample, RefinementConfig, RefinementTrace};
pub use embedding::{cosine, EmbeddingStore, EmbeddingVector, Encoder, HashedEncoder, StoreEncoder};
pub use ensemble::{vote, EnsembleInput, PredictionRun};
pub use error::{Error, Result};
pub use evaluator::{evaluate, EvalReport};
pub use matcher::{bem_type, nearest, DictEntry, Dictionary, EntrySource, MatchResult, Mention};
