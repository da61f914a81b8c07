//! Tokenizer, dialogue corpora, loss masks, preference pairs and splits.

mod corpus;
mod fixtures;
mod pairs;
mod sft;
mod split;
mod tokenizer;

pub use corpus::{
    corpus_to_jsonl, load_corpus, load_pairs, pairs_to_jsonl, save_corpus, save_pairs, DialogSample,
    PreferencePair, Provenance, Turn,
};
pub use fixtures::{fixture_corpus, FIXTURE_IMAGE_SIZE};
pub use pairs::{build_dpo_pair, derive_seed, FactKind, PerturbationRule, PerturbationRules};
pub use sft::{
    build_sft_example, dialogue_prompt_tokens, prompt_tokens, response_tokens, tokenize_pair, TokenizedPair, TokenizedSample,
};
pub use split::split_dataset;
pub use tokenizer::{
    normalize, pieces, spans, Tokenizer, BOT_ID, EOT_ID, IMAGE_ID, IMAGE_PLACEHOLDER, N_RESERVED,
    PAD_ID, UNK_ID,
};
