//! PVminer: desk-scale mining of the patient voice in patient-provider
//! messages.
//!
//! The pipeline has four stages, each exposed as a module and wired together
//! by the `pvminer` CLI:
//!
//! 1. domain pre-training of a small transformer encoder with a masked
//!    language modeling objective ([`encoder`]),
//! 2. topic modeling over unlabeled message embeddings with class-based
//!    TF-IDF keyword extraction ([`topic`]),
//! 3. author- and topic-augmented fine-tuning of a multi-label classifier
//!    over the Code/Subcode/Combo hierarchy ([`classifier`], [`labels`]),
//! 4. inference plus micro-averaged hierarchical evaluation and the
//!    three-row ablation harness ([`eval`]).
//!
//! Everything is seeded and single-threaded per run: identical inputs and
//! seeds produce byte-identical artifacts.

pub mod checkpoint;
pub mod classifier;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod labels;
pub mod numeric;
pub mod tokenizer;
pub mod topic;

pub use error::{Error, Result};
