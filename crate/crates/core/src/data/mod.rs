//! Datasets: vocabularies, instances, planted-rationale generation, ERASER-style
//! ingestion and splitting.

mod eraser;
mod instance;
mod planted;
mod split;
mod vocab;

pub use eraser::{ingest_eraser_jsonl, EraserOptions};
pub use instance::{read_jsonl, write_jsonl, Corpus, Dataset, InstanceRecord, TokenizedInstance};
pub use planted::{generate_planted, rationale_signal_count, LabelRule, PlantedSpec, SIGNAL_TOKEN};
pub use split::split;
pub use vocab::{build_vocab, Vocabulary, CLS, MASK, PAD, RESERVED, SEP, UNK};
