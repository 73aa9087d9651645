//! Behavior-log ingestion, vocabulary, padding and synthetic worlds.

mod batch;
mod ingest;
mod synthetic;
mod vocab;

pub use batch::{pad_batch, PaddedBatch};
pub use ingest::{
    ingest_impressions, ingest_jsonl, read_raw_impressions, read_raw_users, to_impression, to_record, write_jsonl,
    Behavior, Impression, Ingested, RawImpression, RawUser, SequenceLimits, UserRecord,
};
pub use synthetic::{
    generate_synthetic, word, SyntheticWorld, SyntheticWorldConfig, WorldCounts, WorldMeta, GROUP_LABEL,
};
pub use vocab::{tokenize, Vocabulary, PAD_ID, UNK_ID};
