use std::fmt;

use super::sequence::{InterleavedSequence, SpanKind};
use super::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    UnknownId(TokenId),
    SpecialInPrompt(TokenId),
    FirstSpanNotText,
    KindsDoNotAlternate,
    EmptySpan,
    NonTextInTextSpan(TokenId),
    MisplacedSoa,
    MisplacedEos,
    MissingSoa,
    SoaWithoutAudio,
    NonAudioInAudioSpan(TokenId),
    MisplacedEoa,
    MissingEoa,
    EmptyAudioContent,
    FixedSpanLength { expected: usize, found: usize },
    FinalSpanTooLong { limit: usize, found: usize },
    TooLong { max_len: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Flat sequence position, when the violation is tied to one token.
    pub position: Option<usize>,
    pub span: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(s) = self.span {
            write!(f, " in span {s}")?;
        }
        if let Some(p) = self.position {
            write!(f, " at position {p}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, position: Option<usize>, span: Option<usize>, kind: ViolationKind) {
        self.violations.push(Violation {
            position,
            span,
            kind,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Checks every structural invariant of an interleaved sequence and reports
/// each violation with its position. `max_len` additionally bounds the
/// total length.
pub fn validate_sequence(
    seq: &InterleavedSequence,
    vocab: &Vocabulary,
    max_len: Option<usize>,
) -> ValidationReport {
    let mut report = ValidationReport::default();

    for (i, &t) in seq.prompt.iter().enumerate() {
        if !vocab.contains(t) {
            report.push(Some(i), None, ViolationKind::UnknownId(t));
        } else if vocab.is_special(t) {
            report.push(Some(i), None, ViolationKind::SpecialInPrompt(t));
        }
    }

    let ranges = seq.span_ranges();
    let last = seq.spans.len().checked_sub(1);
    let mut audio_lengths: Vec<(usize, usize)> = Vec::new();

    for (si, (span, range)) in seq.spans.iter().zip(&ranges).enumerate() {
        let expected_kind = if si % 2 == 0 { SpanKind::Text } else { SpanKind::Audio };
        if span.kind != expected_kind {
            let kind = if si == 0 {
                ViolationKind::FirstSpanNotText
            } else {
                ViolationKind::KindsDoNotAlternate
            };
            report.push(Some(range.start), Some(si), kind);
        }
        if span.is_empty() {
            report.push(Some(range.start), Some(si), ViolationKind::EmptySpan);
            continue;
        }
        let followed_by_audio = seq
            .spans
            .get(si + 1)
            .is_some_and(|s| s.kind == SpanKind::Audio);
        let n = span.len();
        match span.kind {
            SpanKind::Text => {
                for (j, &t) in span.tokens.iter().enumerate() {
                    let pos = range.start + j;
                    let is_last = j + 1 == n;
                    if !vocab.contains(t) {
                        report.push(Some(pos), Some(si), ViolationKind::UnknownId(t));
                    } else if t == vocab.soa {
                        if !is_last {
                            report.push(Some(pos), Some(si), ViolationKind::MisplacedSoa);
                        } else if !followed_by_audio {
                            report.push(Some(pos), Some(si), ViolationKind::SoaWithoutAudio);
                        }
                    } else if t == vocab.eos {
                        if !is_last || Some(si) != last {
                            report.push(Some(pos), Some(si), ViolationKind::MisplacedEos);
                        }
                    } else if !vocab.is_text(t) {
                        report.push(Some(pos), Some(si), ViolationKind::NonTextInTextSpan(t));
                    }
                }
                if followed_by_audio && span.tokens[n - 1] != vocab.soa {
                    report.push(Some(range.end - 1), Some(si), ViolationKind::MissingSoa);
                }
            }
            SpanKind::Audio => {
                for (j, &t) in span.tokens.iter().enumerate() {
                    let pos = range.start + j;
                    if !vocab.contains(t) {
                        report.push(Some(pos), Some(si), ViolationKind::UnknownId(t));
                    } else if t == vocab.eoa {
                        if j + 1 != n {
                            report.push(Some(pos), Some(si), ViolationKind::MisplacedEoa);
                        }
                    } else if !vocab.is_audio(t) {
                        report.push(Some(pos), Some(si), ViolationKind::NonAudioInAudioSpan(t));
                    }
                }
                if span.tokens[n - 1] != vocab.eoa {
                    report.push(Some(range.end - 1), Some(si), ViolationKind::MissingEoa);
                }
                let content = span.tokens.iter().filter(|&&t| t != vocab.eoa).count();
                if content == 0 {
                    report.push(Some(range.start), Some(si), ViolationKind::EmptyAudioContent);
                }
                audio_lengths.push((si, content));
            }
        }
    }

    if let Some((&(final_si, final_len), rest)) = audio_lengths.split_last() {
        if let Some(&(_, fixed)) = rest.first() {
            for &(si, len) in rest {
                if len != fixed {
                    report.push(
                        Some(ranges[si].start),
                        Some(si),
                        ViolationKind::FixedSpanLength {
                            expected: fixed,
                            found: len,
                        },
                    );
                }
            }
            if final_len > fixed {
                report.push(
                    Some(ranges[final_si].start),
                    Some(final_si),
                    ViolationKind::FinalSpanTooLong {
                        limit: fixed,
                        found: final_len,
                    },
                );
            }
        }
    }

    if let Some(max_len) = max_len {
        let len = seq.len();
        if len > max_len {
            report.push(None, None, ViolationKind::TooLong { max_len, len });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::sequence::{Direction, Span};
    use crate::corpus::task::{generate_record, TaskSpec};
    use crate::corpus::vocab::build_vocabulary;

    fn sample() -> (Vocabulary, InterleavedSequence) {
        let vocab = build_vocabulary(32, 64).unwrap();
        let spec = TaskSpec {
            min_text_len: 9,
            max_text_len: 9,
            ..TaskSpec::default()
        };
        (vocab, generate_record(&spec, &vocab, 1, 0).unwrap())
    }

    #[test]
    fn generated_record_is_valid() {
        let (vocab, seq) = sample();
        let report = validate_sequence(&seq, &vocab, Some(seq.len()));
        assert!(report.is_valid(), "{report}");
    }

    #[test]
    fn audio_id_in_text_span_is_located() {
        let (vocab, mut seq) = sample();
        seq.spans[0].tokens[1] = vocab.audio_id(3);
        let pos = seq.prompt.len() + 1;
        let report = validate_sequence(&seq, &vocab, None);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].position, Some(pos));
        assert_eq!(
            report.violations[0].kind,
            ViolationKind::NonTextInTextSpan(vocab.audio_id(3))
        );
    }

    #[test]
    fn unequal_non_final_spans_are_flagged() {
        // 9 text tokens with n_t = 4: audio spans of 16, 16, 4
        let (vocab, mut seq) = sample();
        assert!(validate_sequence(&seq, &vocab, None).is_valid());
        let second_audio = 3;
        assert_eq!(seq.spans[second_audio].kind, SpanKind::Audio);
        seq.spans[second_audio].tokens.remove(0);
        let report = validate_sequence(&seq, &vocab, None);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v.kind, ViolationKind::FixedSpanLength { expected: 16, found: 15 })));
    }

    #[test]
    fn structural_errors() {
        let vocab = build_vocabulary(4, 8).unwrap();
        let a = |o| vocab.audio_id(o);
        let seq = InterleavedSequence {
            prompt: vec![0, vocab.eos],
            spans: vec![
                Span::text(vec![1, 2]),
                Span::audio(vec![a(0), vocab.eoa, a(1)]),
                Span::text(vec![vocab.eos, 1]),
            ],
            direction: Direction::Tts,
        };
        let kinds: Vec<ViolationKind> = validate_sequence(&seq, &vocab, Some(4))
            .violations
            .into_iter()
            .map(|v| v.kind)
            .collect();
        assert!(kinds.contains(&ViolationKind::SpecialInPrompt(vocab.eos)));
        assert!(kinds.contains(&ViolationKind::MissingSoa));
        assert!(kinds.contains(&ViolationKind::MisplacedEoa));
        assert!(kinds.contains(&ViolationKind::MissingEoa));
        assert!(kinds.contains(&ViolationKind::MisplacedEos));
        assert!(kinds.contains(&ViolationKind::TooLong { max_len: 4, len: 9 }));
    }

    #[test]
    fn empty_audio_content_is_rejected() {
        let vocab = build_vocabulary(4, 8).unwrap();
        let seq = InterleavedSequence {
            prompt: vec![0],
            spans: vec![
                Span::text(vec![1, vocab.soa]),
                Span::audio(vec![vocab.eoa]),
                Span::text(vec![vocab.eos]),
            ],
            direction: Direction::Tts,
        };
        let report = validate_sequence(&seq, &vocab, None);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::EmptyAudioContent);
    }
}
