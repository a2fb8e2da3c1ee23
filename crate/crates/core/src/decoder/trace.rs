use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, write_jsonl, Direction, InterleavedSequence, Span, SpanKind, TokenId, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Commit {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    ArMaxTokens,
    MaxLen,
}

/// One line of a generation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TraceRecord {
    Ar {
        position: usize,
        token: TokenId,
    },
    /// One denoising step of a block. Steps with nothing scheduled carry an
    /// empty commit list and cost no forward pass.
    Nar {
        span: usize,
        block: usize,
        step: usize,
        masked: usize,
        commits: Vec<Commit>,
    },
    BlockEnd {
        span: usize,
        block: usize,
        start: usize,
        /// Block-relative index of the first `<EOA>`, if any.
        eoa_at: Option<usize>,
        kept: usize,
    },
    ForcedEoa {
        span: usize,
        position: usize,
    },
    Stop {
        reason: StopReason,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub records: Vec<TraceRecord>,
}

impl GenerationTrace {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.records.iter().rev().find_map(|r| match r {
            TraceRecord::Stop { reason } => Some(*reason),
            _ => None,
        })
    }

    pub fn truncated(&self) -> bool {
        matches!(self.stop_reason(), Some(StopReason::ArMaxTokens | StopReason::MaxLen))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Ok(GenerationTrace {
            records: read_jsonl(path)?,
        })
    }
}

/// Rebuilds the generated sequence from the prompt and a trace alone.
pub fn replay(
    prompt: &[TokenId],
    direction: Direction,
    trace: &GenerationTrace,
    vocab: &Vocabulary,
) -> Result<InterleavedSequence> {
    let mut seq = InterleavedSequence {
        prompt: prompt.to_vec(),
        spans: Vec::new(),
        direction,
    };
    let mut block: Vec<Option<TokenId>> = Vec::new();
    let bad = |m: String| Error::Contract(format!("trace replay: {m}"));
    for r in &trace.records {
        match r {
            TraceRecord::Ar { position, token } => {
                if *position != seq.len() {
                    return Err(bad(format!("AR token at {position}, expected {}", seq.len())));
                }
                match seq.spans.last_mut() {
                    Some(s) if s.kind == SpanKind::Text && s.tokens.last() != Some(&vocab.soa) => {
                        s.tokens.push(*token)
                    }
                    _ => seq.spans.push(Span::text(vec![*token])),
                }
                if *token == vocab.soa {
                    seq.spans.push(Span::audio(Vec::new()));
                }
            }
            TraceRecord::Nar { commits, .. } => {
                let start = seq.len();
                for c in commits {
                    let off = c
                        .position
                        .checked_sub(start)
                        .ok_or_else(|| bad(format!("commit into context at {}", c.position)))?;
                    if off >= block.len() {
                        block.resize(off + 1, None);
                    }
                    if block[off].is_some() {
                        return Err(bad(format!("position {} committed twice", c.position)));
                    }
                    block[off] = Some(c.token);
                }
            }
            TraceRecord::BlockEnd { start, kept, .. } => {
                if *start != seq.len() {
                    return Err(bad(format!("block starts at {start}, expected {}", seq.len())));
                }
                let span = seq
                    .spans
                    .last_mut()
                    .filter(|s| s.kind == SpanKind::Audio)
                    .ok_or_else(|| bad("block outside an audio span".into()))?;
                for (i, t) in block.iter().take(*kept).enumerate() {
                    span.tokens
                        .push(t.ok_or_else(|| bad(format!("block slot {i} never committed")))?);
                }
                block.clear();
            }
            TraceRecord::ForcedEoa { .. } => {
                if let Some(s) = seq.spans.last_mut().filter(|s| s.kind == SpanKind::Audio) {
                    s.tokens.push(vocab.eoa);
                }
            }
            TraceRecord::Stop { .. } => {}
        }
    }
    Ok(seq)
}
