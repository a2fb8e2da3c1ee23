use std::collections::BTreeMap;

use crate::attention::{build_modality_mask, Region, SequenceLayout};
use crate::corpus::{
    build_response, chat_answer, Direction, InterleavedSequence, SpanKind, TaskSpec, TokenId,
    Vocabulary,
};
use crate::error::{invalid, Error, Result};
use crate::linalg::{Matrix, Real};
use crate::model::Transformer;
use crate::rng::{mix, substream, splitmix64};

/// Anything that maps a token sequence and its layout to per-position
/// logits over the unified vocabulary.
pub trait Scorer {
    fn vocab(&self) -> &Vocabulary;

    fn max_len(&self) -> usize;

    fn score(&self, tokens: &[TokenId], layout: &SequenceLayout) -> Result<Matrix<f64>>;
}

pub struct TransformerScorer<T> {
    model: Transformer<T>,
    vocab: Vocabulary,
}

impl<T: Real> TransformerScorer<T> {
    pub fn new(model: Transformer<T>, vocab: Vocabulary) -> Result<Self> {
        if model.config().vocab_size != vocab.size() {
            return Err(invalid!(
                "model vocab_size {} does not match vocabulary size {}",
                model.config().vocab_size,
                vocab.size()
            ));
        }
        Ok(TransformerScorer { model, vocab })
    }

    pub fn model(&self) -> &Transformer<T> {
        &self.model
    }
}

impl<T: Real> Scorer for TransformerScorer<T> {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.model.config().max_len
    }

    fn score(&self, tokens: &[TokenId], layout: &SequenceLayout) -> Result<Matrix<f64>> {
        let mask = build_modality_mask(layout);
        let logits = self.model.forward(tokens, &mask)?;
        Ok(Matrix::from_vec(
            logits.rows,
            logits.cols,
            logits.data.iter().map(|x| x.as_f64()).collect(),
        ))
    }
}

/// How an [`OracleScorer`] fills audio content positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleAudio {
    /// The codebook expansion of the reference text.
    Exact,
    /// A pseudo-random audio id per position, uniform over the codebook.
    Chance { seed: u64 },
    /// Reference id plus bounded pseudo-random noise on every audio logit.
    Noisy { seed: u64, scale: f64 },
}

/// Mock model that knows the echo task. Text and span structure always
/// follow the noise-free reference response; audio content follows
/// [`OracleAudio`]. Positions outside the legal set for the row get `-inf`,
/// so sampling noise can never break the structure.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    pub spec: TaskSpec,
    pub vocab: Vocabulary,
    pub audio: OracleAudio,
    pub margin: f64,
    pub max_len: usize,
}

impl OracleScorer {
    pub fn new(spec: TaskSpec, vocab: Vocabulary, audio: OracleAudio) -> Self {
        let max_len = spec.max_sequence_len() + 64;
        OracleScorer {
            spec,
            vocab,
            audio,
            margin: 20.0,
            max_len,
        }
    }

    /// Noise-free reference response for a prompt.
    pub fn reference(&self, prompt: &[TokenId]) -> Option<InterleavedSequence> {
        let v = &self.vocab;
        let r = self.spec.expansion_rate as usize;
        let text: Vec<TokenId> = match self.spec.direction {
            Direction::Tts => prompt.to_vec(),
            Direction::Chat => chat_answer(prompt, self.spec.alphabet(v)),
            Direction::Asr => {
                if prompt.len() % r != 0 {
                    return None;
                }
                prompt
                    .chunks(r)
                    .map(|c| v.audio_offset(c[0]).map(|o| v.text_start + o / r as u32))
                    .collect::<Option<_>>()?
            }
        };
        if text.iter().any(|&t| !v.is_text(t)) {
            return None;
        }
        let spec = TaskSpec {
            noise_prob: 0.0,
            ..self.spec.clone()
        };
        let spans = build_response(&spec, v, &text, &mut substream(0, 0)).ok()?;
        Some(InterleavedSequence {
            prompt: prompt.to_vec(),
            spans,
            direction: self.spec.direction,
        })
    }

    fn hash(&self, seed: u64, prompt: &[TokenId], extra: &[u64]) -> u64 {
        let mut h = mix(&[seed, prompt.len() as u64]);
        for &t in prompt {
            h = splitmix64(h ^ t as u64);
        }
        for &e in extra {
            h = splitmix64(h ^ e);
        }
        h
    }
}

impl Scorer for OracleScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn score(&self, tokens: &[TokenId], layout: &SequenceLayout) -> Result<Matrix<f64>> {
        let v = &self.vocab;
        let n = tokens.len();
        let mut out = Matrix::zeros(n, v.size());
        let prompt: Vec<TokenId> = (0..n)
            .take_while(|&i| layout.region(i) == Region::Prompt)
            .map(|i| tokens[i])
            .collect();
        if prompt.contains(&v.mask) {
            // unconditional branch: no information
            return Ok(out);
        }
        let Some(reference) = self.reference(&prompt) else {
            return Ok(out);
        };
        let ref_tokens = reference.tokens();
        let ref_ranges = reference.span_ranges();
        let neg = f64::NEG_INFINITY;

        for q in 0..n {
            let row = out.row_mut(q);
            match layout.region(q) {
                Region::Audio(s) if tokens[q] == v.mask => {
                    let start = layout.span_range(s).map(|r| r.start).unwrap_or(q);
                    let j = q - start;
                    let content = reference
                        .spans
                        .get(s)
                        .filter(|sp| sp.kind == SpanKind::Audio)
                        .map(|sp| sp.len() - 1)
                        .unwrap_or(0);
                    if j >= content {
                        row.fill(neg);
                        row[v.eoa as usize] = self.margin;
                        continue;
                    }
                    let truth = ref_tokens[ref_ranges[s].start + j];
                    for id in 0..v.size() as u32 {
                        row[id as usize] = if v.is_audio(id) { 0.0 } else { neg };
                    }
                    match self.audio {
                        OracleAudio::Exact => row[truth as usize] = self.margin,
                        OracleAudio::Chance { seed } => {
                            let h = self.hash(seed, &prompt, &[s as u64, j as u64]);
                            row[v.audio_id((h % v.n_audio as u64) as u32) as usize] = self.margin;
                        }
                        OracleAudio::Noisy { seed, scale } => {
                            for id in v.audio_range() {
                                let h = self.hash(seed, &prompt, &[s as u64, j as u64, id as u64]);
                                row[id as usize] = scale * (h >> 11) as f64 / (1u64 << 53) as f64;
                            }
                            row[truth as usize] += self.margin;
                        }
                    }
                }
                _ => {
                    // audio content may differ from the reference without
                    // derailing the text
                    let consistent = q + 1 < ref_tokens.len()
                        && tokens[..=q]
                            .iter()
                            .zip(&ref_tokens)
                            .all(|(&a, &b)| a == b || (v.is_audio(a) && v.is_audio(b)));
                    let target = if consistent { ref_tokens[q + 1] } else { v.eos };
                    row.fill(neg);
                    row[target as usize] = self.margin;
                }
            }
        }
        Ok(out)
    }
}

/// Everything a scorer factory may need.
pub struct ScorerContext {
    pub vocab: Vocabulary,
    pub spec: TaskSpec,
    pub model: Option<Transformer<f32>>,
    pub seed: u64,
}

pub type ScorerFactory = fn(ScorerContext) -> Result<Box<dyn Scorer>>;

/// Name to constructor map for scorers selectable from configuration.
#[derive(Clone)]
pub struct ScorerRegistry {
    entries: BTreeMap<&'static str, ScorerFactory>,
}

impl Default for ScorerRegistry {
    fn default() -> Self {
        let mut r = ScorerRegistry {
            entries: BTreeMap::new(),
        };
        r.register("transformer", |ctx| {
            let model = ctx
                .model
                .ok_or_else(|| Error::Config("the transformer scorer needs a checkpoint".into()))?;
            Ok(Box::new(TransformerScorer::new(model, ctx.vocab)?))
        });
        r.register("perfect", |ctx| {
            Ok(Box::new(OracleScorer::new(ctx.spec, ctx.vocab, OracleAudio::Exact)))
        });
        r.register("chance", |ctx| {
            Ok(Box::new(OracleScorer::new(
                ctx.spec,
                ctx.vocab,
                OracleAudio::Chance { seed: ctx.seed },
            )))
        });
        r
    }
}

impl ScorerRegistry {
    pub fn register(&mut self, name: &'static str, f: ScorerFactory) {
        self.entries.insert(name, f);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn build(&self, name: &str, ctx: ScorerContext) -> Result<Box<dyn Scorer>> {
        let f = self.entries.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown scorer '{name}' (known: {})",
                self.names().join(", ")
            ))
        })?;
        f(ctx)
    }
}
