//! Evaluation: BERTScore, SBERT-style cosine, sentence mover's similarity
//! over an exact transport solver, action accuracy and throughput.

mod action;
mod embedding;
pub mod emd;
mod eval;
mod report;
mod text;

pub use action::{action_accuracy, extract_action, ActionLexicon, CanonicalAction, Speed, Verb};
pub use embedding::{cosine, EmbeddingProvider, HashProvider, ModelEmbeddingProvider, TableProvider};
pub use emd::{emd, emd_with_plan, Transport};
pub use eval::{
    evaluate_model, fps_from, hardware_note, score_responses, throughput_fps, EchoResponder, EvalItem, EvalOptions,
    ModelResponder, RecordedResponder, Responder, Throughput, EMPTY_RESPONSE,
};
pub use report::{
    best_rows, check_comparable, render_csv, render_table, EvalSettings, MetricReport, ResponseRecord, COLUMNS,
    SMS_TRANSFORM,
};
pub use text::{
    bertscore, bertscore_text, estimate_baseline, sbert_cos, sentence_mover, sms, split_sentences, BertScore,
    SentenceMover,
};
