use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::sequence::{Direction, InterleavedSequence, Span};
use super::vocab::{echo_codebook, TokenId, Vocabulary};
use crate::error::{invalid, Result};
use crate::rng::{substream, Rng};

/// Parameters of the synthetic echo task.
///
/// Each response text is chunked into spans of `text_chunk` tokens; every
/// chunk is followed by its codebook expansion (`expansion_rate` audio ids per
/// text id). Non-final audio spans therefore all hold exactly
/// `text_chunk * expansion_rate` content tokens, and the final one holds
/// `expansion_rate` times whatever remains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub direction: Direction,
    pub expansion_rate: u32,
    pub text_chunk: u32,
    pub noise_prob: f64,
    pub min_text_len: u32,
    pub max_text_len: u32,
    /// Number of distinct text ids the generator draws from. `None` picks
    /// the largest alphabet for which the codebook stays injective.
    pub text_alphabet: Option<u32>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            direction: Direction::Tts,
            expansion_rate: 4,
            text_chunk: 4,
            noise_prob: 0.0,
            min_text_len: 5,
            max_text_len: 8,
            text_alphabet: None,
        }
    }
}

impl TaskSpec {
    /// Fixed audio span length `B_span = n_t * r` (content tokens, `<EOA>` excluded).
    pub fn span_len(&self) -> u32 {
        self.text_chunk * self.expansion_rate
    }

    pub fn alphabet(&self, vocab: &Vocabulary) -> u32 {
        match self.text_alphabet {
            Some(a) => a,
            None => {
                let injective = vocab.n_audio / self.expansion_rate.max(1);
                if injective >= 2 {
                    injective.min(vocab.n_text)
                } else {
                    vocab.n_text
                }
            }
        }
    }

    pub fn check(&self, vocab: &Vocabulary) -> Result<()> {
        if self.expansion_rate < 1 {
            return Err(invalid!("expansion_rate must be >= 1"));
        }
        if self.text_chunk < 1 {
            return Err(invalid!("text_chunk must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(invalid!("noise_prob must lie in [0, 1], got {}", self.noise_prob));
        }
        if self.min_text_len < 1 || self.min_text_len > self.max_text_len {
            return Err(invalid!(
                "text length range [{}, {}] is empty or starts below 1",
                self.min_text_len,
                self.max_text_len
            ));
        }
        let a = self.alphabet(vocab);
        if a < 1 || a > vocab.n_text {
            return Err(invalid!("text_alphabet must lie in [1, {}], got {a}", vocab.n_text));
        }
        Ok(())
    }

    /// Longest sequence this task can produce.
    pub fn max_sequence_len(&self) -> usize {
        let n = self.max_text_len as usize;
        let r = self.expansion_rate as usize;
        let prompt = match self.direction {
            Direction::Asr => n * r,
            _ => n,
        };
        let chunks = n.div_ceil(self.text_chunk as usize);
        // text + <SOA> per chunk, audio + <EOA> per chunk, final <EOS>
        prompt + n + chunks + n * r + chunks + 1
    }
}

/// Deterministic answer map used by the chat direction.
pub fn chat_answer(question: &[TokenId], alphabet: u32) -> Vec<TokenId> {
    question.iter().map(|&t| (t + 1) % alphabet).collect()
}

/// Codebook expansion of a text chunk, with per-token replacement noise.
pub fn expand_audio(
    vocab: &Vocabulary,
    text: &[TokenId],
    r: u32,
    noise_prob: f64,
    rng: &mut Rng,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(text.len() * r as usize);
    for &t in text {
        for j in 0..r {
            let clean = echo_codebook(vocab, t, j, r)?;
            let tok = if noise_prob > 0.0 && rng.gen::<f64>() < noise_prob {
                vocab.audio_id(rng.gen_range(0..vocab.n_audio))
            } else {
                clean
            };
            out.push(tok);
        }
    }
    Ok(out)
}

/// Builds the interleaved response for a text transcript.
pub fn build_response(
    spec: &TaskSpec,
    vocab: &Vocabulary,
    text: &[TokenId],
    rng: &mut Rng,
) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    for chunk in text.chunks(spec.text_chunk as usize) {
        let mut t = chunk.to_vec();
        t.push(vocab.soa);
        spans.push(Span::text(t));
        let mut a = expand_audio(vocab, chunk, spec.expansion_rate, spec.noise_prob, rng)?;
        a.push(vocab.eoa);
        spans.push(Span::audio(a));
    }
    spans.push(Span::text(vec![vocab.eos]));
    Ok(spans)
}

/// Record `index` of the corpus drawn with `seed`. Depends only on
/// `(spec, vocab, seed, index)`.
pub fn generate_record(
    spec: &TaskSpec,
    vocab: &Vocabulary,
    seed: u64,
    index: u64,
) -> Result<InterleavedSequence> {
    spec.check(vocab)?;
    let mut rng = substream(seed, index);
    let alphabet = spec.alphabet(vocab);
    let n = rng.gen_range(spec.min_text_len..=spec.max_text_len) as usize;
    let draw: Vec<TokenId> = (0..n)
        .map(|_| vocab.text_start + rng.gen_range(0..alphabet))
        .collect();
    let (prompt, response_text) = match spec.direction {
        Direction::Tts => (draw.clone(), draw),
        Direction::Asr => {
            let audio = expand_audio(vocab, &draw, spec.expansion_rate, spec.noise_prob, &mut rng)?;
            (audio, draw)
        }
        Direction::Chat => {
            let answer = chat_answer(&draw, alphabet);
            (draw, answer)
        }
    };
    let spans = build_response(spec, vocab, &response_text, &mut rng)?;
    Ok(InterleavedSequence {
        prompt,
        spans,
        direction: spec.direction,
    })
}

/// Lazily generated corpus; records are independent of iteration order.
pub fn generate_corpus<'a>(
    spec: &'a TaskSpec,
    vocab: &'a Vocabulary,
    count: usize,
    seed: u64,
) -> impl Iterator<Item = Result<InterleavedSequence>> + 'a {
    (0..count as u64).map(move |i| generate_record(spec, vocab, seed, i))
}
