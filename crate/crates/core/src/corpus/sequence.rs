use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Text,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: SpanKind,
    pub tokens: Vec<TokenId>,
}

impl Span {
    pub fn text(tokens: Vec<TokenId>) -> Self {
        Span {
            kind: SpanKind::Text,
            tokens,
        }
    }

    pub fn audio(tokens: Vec<TokenId>) -> Self {
        Span {
            kind: SpanKind::Audio,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Tts,
    Asr,
    Chat,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Tts => "tts",
            Direction::Asr => "asr",
            Direction::Chat => "chat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tts" => Some(Direction::Tts),
            "asr" => Some(Direction::Asr),
            "chat" => Some(Direction::Chat),
            _ => None,
        }
    }
}

/// Prompt followed by alternating text/audio spans.
///
/// A complete response has the shape `T1 A1 ... TM AM [EOS]`: every text
/// span that precedes an audio span ends with `<SOA>`, every audio span ends
/// with `<EOA>`, and the terminating `<EOS>` lives in a final text span.
/// This is also the JSONL record schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleavedSequence {
    pub prompt: Vec<TokenId>,
    pub spans: Vec<Span>,
    pub direction: Direction,
}

impl InterleavedSequence {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.prompt);
        for span in &self.spans {
            out.extend_from_slice(&span.tokens);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.spans.iter().map(Span::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of audio spans, i.e. text/audio pairs `M`.
    pub fn num_pairs(&self) -> usize {
        self.spans.iter().filter(|s| s.kind == SpanKind::Audio).count()
    }

    /// Flat position range of every span, in span order.
    pub fn span_ranges(&self) -> Vec<Range<usize>> {
        let mut start = self.prompt.len();
        self.spans
            .iter()
            .map(|s| {
                let r = start..start + s.len();
                start = r.end;
                r
            })
            .collect()
    }

    /// `(span index, position range)` of each audio span.
    pub fn audio_spans(&self) -> Vec<(usize, Range<usize>)> {
        self.span_ranges()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| self.spans[*i].kind == SpanKind::Audio)
            .collect()
    }

    pub fn is_terminal(&self, vocab: &Vocabulary) -> bool {
        self.spans
            .last()
            .is_some_and(|s| s.kind == SpanKind::Text && s.tokens.last() == Some(&vocab.eos))
    }

    /// Response text ids with `<SOA>`/`<EOS>` stripped, in order.
    pub fn response_text(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        self.spans
            .iter()
            .filter(|s| s.kind == SpanKind::Text)
            .flat_map(|s| s.tokens.iter().copied())
            .filter(|&t| vocab.is_text(t))
            .collect()
    }

    pub fn last_audio_span(&self) -> Option<&Span> {
        self.spans.iter().rev().find(|s| s.kind == SpanKind::Audio)
    }
}
