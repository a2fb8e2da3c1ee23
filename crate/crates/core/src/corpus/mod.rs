//! Unified vocabulary, interleaved sequences and the synthetic echo task.

mod io;
mod sequence;
mod task;
mod validate;
mod vocab;

pub use io::{read_corpus, read_jsonl, write_corpus, write_jsonl};
pub use sequence::{Direction, InterleavedSequence, Span, SpanKind};
pub use task::{
    build_response, chat_answer, expand_audio, generate_corpus, generate_record, TaskSpec,
};
pub use validate::{validate_sequence, ValidationReport, Violation, ViolationKind};
pub use vocab::{build_vocabulary, echo_codebook, TokenId, Vocabulary, NUM_SPECIALS};
