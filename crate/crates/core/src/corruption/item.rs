use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{Region, SequenceLayout};
use crate::corpus::{InterleavedSequence, TokenId, Vocabulary};

/// A training example after masking and strategy transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptedBatchItem {
    pub tokens: Vec<TokenId>,
    pub clean_tokens: Vec<TokenId>,
    /// Response text positions supervised by next-token prediction.
    pub ar_positions: Vec<usize>,
    /// Masked audio positions supervised by same-position prediction.
    pub nar_positions: Vec<usize>,
    pub lambda: f64,
    /// Audio span ordinals (0-based, counting audio spans only) restored to
    /// clean by prefix preservation.
    pub excluded_spans: Vec<usize>,
    /// Content length kept by span truncation, if it fired.
    pub truncated: Option<usize>,
    pub ppm_cutoff: Option<usize>,
    pub banom_clean: bool,
    pub prompt_len: usize,
    /// Id of the mask token, so losses can check the masking contract.
    pub mask_id: TokenId,
    /// Flat position range of each audio span, `<EOA>` included.
    pub audio_spans: Vec<Range<usize>>,
    layout: SequenceLayout,
}

impl CorruptedBatchItem {
    /// Unmasked item: every audio position clean, `lambda = 1`.
    pub fn clean(seq: &InterleavedSequence, vocab: &Vocabulary) -> Self {
        let layout = SequenceLayout::from_sequence(seq);
        let tokens = seq.tokens();
        let mut item = CorruptedBatchItem {
            clean_tokens: tokens.clone(),
            tokens,
            ar_positions: Vec::new(),
            nar_positions: Vec::new(),
            lambda: 1.0,
            excluded_spans: Vec::new(),
            truncated: None,
            ppm_cutoff: None,
            banom_clean: false,
            prompt_len: seq.prompt.len(),
            mask_id: vocab.mask,
            audio_spans: seq.audio_spans().into_iter().map(|(_, r)| r).collect(),
            layout,
        };
        item.refresh_ar_positions(vocab);
        item
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn is_text_position(&self, i: usize) -> bool {
        matches!(self.layout.region(i), Region::Text(_))
    }

    pub fn is_audio_position(&self, i: usize) -> bool {
        matches!(self.layout.region(i), Region::Audio(_))
    }

    pub fn num_audio_positions(&self) -> usize {
        self.audio_spans.iter().map(|r| r.len()).sum()
    }

    /// AR targets are response text positions whose predecessor holds its
    /// clean token. A text token right after a masked `<EOA>` is skipped:
    /// decoding never resumes text from a masked context, and the same row
    /// already carries the `<EOA>` denoising target.
    pub(crate) fn refresh_ar_positions(&mut self, vocab: &Vocabulary) {
        let mask = vocab.mask;
        self.ar_positions = (1..self.len())
            .filter(|&k| self.is_text_position(k) && self.tokens[k - 1] != mask)
            .collect();
    }

    /// Restores every position of audio span `ordinal` to its clean token.
    pub(crate) fn restore_span(&mut self, ordinal: usize) {
        let range = self.audio_spans[ordinal].clone();
        for i in range.clone() {
            self.tokens[i] = self.clean_tokens[i];
        }
        self.nar_positions.retain(|p| !range.contains(p));
    }

    pub(crate) fn set_truncated(&mut self, k: Option<usize>) {
        self.truncated = k;
    }
}
