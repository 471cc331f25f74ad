//! Shared test support for the rtk crates: exhaustive oracles for the
//! metrics, a scripted fake model server, and a small synthetic corpus.

pub mod fixtures;
pub mod oracle;
pub mod random;
pub mod scripted;
pub mod synthetic;

pub use oracle::brute_force_oracle;
pub use scripted::{
    bag_of_words, live_gateway, recording_gateway, replay_gateway, scripted_config, ScaledEmbedder, ScriptedUpstream,
    CHAT_MODEL, EMBED_MODEL,
};
pub use synthetic::{synthetic_corpus, synthetic_corpus_csv, synthetic_gold, synthetic_gold_json};
