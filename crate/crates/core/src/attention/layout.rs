use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{InterleavedSequence, SpanKind};
use crate::error::Result;
use crate::error::invalid;

/// Region tag of a single position. Span indices count text and audio spans
/// together in sequence order, so `Text(2)` precedes `Audio(3)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Prompt,
    Text(usize),
    Audio(usize),
    Pad,
}

impl Region {
    pub fn span(self) -> Option<usize> {
        match self {
            Region::Text(s) | Region::Audio(s) => Some(s),
            _ => None,
        }
    }

    fn letter(self) -> char {
        match self {
            Region::Prompt => 'P',
            Region::Text(_) => 'T',
            Region::Audio(_) => 'A',
            Region::Pad => 'X',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    regions: Vec<Region>,
}

impl SequenceLayout {
    /// Checks contiguity: prompt first, spans in strictly increasing order
    /// with each span contiguous, padding only as a suffix.
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        let mut seen_span = false;
        let mut seen_pad = false;
        let mut current: Option<usize> = None;
        for (i, &r) in regions.iter().enumerate() {
            match r {
                Region::Prompt => {
                    if seen_span || seen_pad {
                        return Err(invalid!("prompt position {i} follows a span"));
                    }
                }
                Region::Pad => seen_pad = true,
                Region::Text(s) | Region::Audio(s) => {
                    if seen_pad {
                        return Err(invalid!("span position {i} follows padding"));
                    }
                    seen_span = true;
                    match current {
                        Some(c) if s == c => {
                            if regions[i - 1] != r {
                                return Err(invalid!("span {s} changes kind at position {i}"));
                            }
                        }
                        Some(c) if s < c => {
                            return Err(invalid!("span index decreases at position {i}"));
                        }
                        _ => current = Some(s),
                    }
                }
            }
        }
        Ok(SequenceLayout { regions })
    }

    pub fn from_sequence(seq: &InterleavedSequence) -> Self {
        let mut regions = vec![Region::Prompt; seq.prompt.len()];
        for (s, span) in seq.spans.iter().enumerate() {
            let tag = match span.kind {
                SpanKind::Text => Region::Text(s),
                SpanKind::Audio => Region::Audio(s),
            };
            regions.extend(std::iter::repeat(tag).take(span.len()));
        }
        SequenceLayout { regions }
    }

    /// Parses a compact layout string such as `PPTTAA` or `P,P,T,T,A,A`.
    /// A new span starts whenever the letter changes; `|` forces a break
    /// between two runs of the same kind. `X` marks padding.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut regions = Vec::new();
        let mut span: Option<usize> = None;
        let mut prev: Option<char> = None;
        let mut broken = false;
        for c in spec.chars() {
            let c = c.to_ascii_uppercase();
            match c {
                ',' | ' ' | '\t' | '\n' | '\r' => continue,
                '|' => {
                    broken = true;
                    continue;
                }
                'P' => regions.push(Region::Prompt),
                'X' => regions.push(Region::Pad),
                'T' | 'A' => {
                    if prev != Some(c) || broken {
                        span = Some(span.map_or(0, |s| s + 1));
                    }
                    let s = span.unwrap_or(0);
                    regions.push(if c == 'T' { Region::Text(s) } else { Region::Audio(s) });
                }
                other => return Err(invalid!("unknown layout symbol '{other}'")),
            }
            prev = Some(c);
            broken = false;
        }
        if regions.is_empty() {
            return Err(invalid!("empty layout"));
        }
        Self::new(regions)
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, i: usize) -> Region {
        self.regions[i]
    }

    /// Position range of span `s`, if present.
    pub fn span_range(&self, s: usize) -> Option<Range<usize>> {
        let start = self.regions.iter().position(|r| r.span() == Some(s))?;
        let len = self.regions[start..]
            .iter()
            .take_while(|r| r.span() == Some(s))
            .count();
        Some(start..start + len)
    }

    pub fn to_compact(&self) -> String {
        let mut out = String::with_capacity(self.len());
        for (i, r) in self.regions.iter().enumerate() {
            if i > 0 {
                let p = self.regions[i - 1];
                if p.letter() == r.letter() && p.span() != r.span() {
                    out.push('|');
                }
            }
            out.push(r.letter());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, generate_record, TaskSpec};

    #[test]
    fn parse_assigns_span_indices() {
        let l = SequenceLayout::parse("P,P,T,T,A,A,T").unwrap();
        assert_eq!(
            l.regions(),
            &[
                Region::Prompt,
                Region::Prompt,
                Region::Text(0),
                Region::Text(0),
                Region::Audio(1),
                Region::Audio(1),
                Region::Text(2)
            ]
        );
        assert_eq!(l.span_range(1), Some(4..6));
        assert_eq!(SequenceLayout::parse("PPTTAA").unwrap(), SequenceLayout::parse("P,P,T,T,A,A").unwrap());
    }

    #[test]
    fn bar_splits_same_kind_runs() {
        let l = SequenceLayout::parse("AA|A").unwrap();
        assert_eq!(l.region(2), Region::Audio(1));
        assert_eq!(l.to_compact(), "AA|A");
    }

    #[test]
    fn malformed_layouts() {
        assert!(SequenceLayout::parse("").is_err());
        assert!(SequenceLayout::parse("PTQ").is_err());
        assert!(SequenceLayout::parse("TP").is_err());
        assert!(SequenceLayout::parse("TXA").is_err());
        assert!(SequenceLayout::new(vec![Region::Text(1), Region::Audio(0)]).is_err());
        assert!(SequenceLayout::new(vec![Region::Text(0), Region::Audio(0)]).is_err());
    }

    #[test]
    fn from_sequence_matches_span_ranges() {
        let vocab = build_vocabulary(32, 64).unwrap();
        let seq = generate_record(&TaskSpec::default(), &vocab, 3, 1).unwrap();
        let l = SequenceLayout::from_sequence(&seq);
        assert_eq!(l.len(), seq.len());
        for (s, r) in seq.span_ranges().into_iter().enumerate() {
            assert_eq!(l.span_range(s), Some(r));
        }
    }
}
