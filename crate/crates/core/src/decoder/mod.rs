//! Hybrid decoding: autoregressive text that hands over to block-wise
//! masked diffusion at `<SOA>` and takes control back at `<EOA>`.

mod remask;
mod scorer;
mod trace;

use std::cmp::Ordering;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use remask::{LowConfidence, RandomRemask, RemaskFactory, RemaskRegistry, RemaskStrategy};
pub use scorer::{
    OracleAudio, OracleScorer, Scorer, ScorerContext, ScorerFactory, ScorerRegistry,
    TransformerScorer,
};
pub use trace::{replay, Commit, GenerationTrace, StopReason, TraceRecord};

use crate::attention::{Region, SequenceLayout};
use crate::corpus::{Direction, InterleavedSequence, Span, SpanKind, TokenId, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::linalg::{softmax, Matrix};
use crate::rng::{mix, substream, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Denoising steps per block.
    pub steps: usize,
    /// Block length.
    pub block: usize,
    /// Maximum audio tokens generated in one NAR phase.
    pub l_max: usize,
    /// Gumbel temperature; 0 is plain argmax.
    pub tau: f64,
    /// Classifier-free guidance scale.
    pub gamma: f64,
    pub remask: String,
    pub ar_top_k: usize,
    pub ar_top_p: f64,
    pub ar_temperature: f64,
    pub ar_max_tokens: usize,
    pub seed: u64,
    /// Keep the prompt visible in the unconditional branch.
    pub cfg_keep_prompt: bool,
    /// Skip guidance entirely and use the conditional logits.
    pub conditional_only: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            steps: 200,
            block: 32,
            l_max: 640,
            tau: 0.0,
            gamma: 0.1,
            remask: "low_confidence".into(),
            ar_top_k: 10,
            ar_top_p: 0.95,
            ar_temperature: 1.0,
            ar_max_tokens: 256,
            seed: 0,
            cfg_keep_prompt: false,
            conditional_only: false,
        }
    }
}

impl DecodeConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.block == 0 {
            return bad("steps and block must be at least 1".into());
        }
        if self.l_max < self.block || self.l_max % self.block != 0 {
            return bad(format!(
                "l_max ({}) must be a positive multiple of block ({})",
                self.l_max, self.block
            ));
        }
        if !(self.tau >= 0.0) || !(self.gamma >= 0.0) {
            return bad("tau and gamma must be non-negative".into());
        }
        if self.ar_top_k == 0 || !(self.ar_top_p > 0.0 && self.ar_top_p <= 1.0) {
            return bad("ar_top_k must be >= 1 and ar_top_p in (0, 1]".into());
        }
        if !(self.ar_temperature > 0.0) {
            return bad("ar_temperature must be positive".into());
        }
        if self.ar_max_tokens == 0 {
            return bad("ar_max_tokens must be at least 1".into());
        }
        Ok(())
    }
}

/// Commit counts per step: near-uniform, larger counts first.
pub fn schedule(n_masked: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1, "at least one step");
    let base = n_masked / steps;
    let extra = n_masked % steps;
    (0..steps).map(|t| base + usize::from(t < extra)).collect()
}

/// `uncond + (gamma + 1) * (cond - uncond)`; `gamma = 0` returns `cond`
/// unchanged.
pub fn cfg_logits(cond: &Matrix<f64>, uncond: &Matrix<f64>, gamma: f64) -> Result<Matrix<f64>> {
    if (cond.rows, cond.cols) != (uncond.rows, uncond.cols) {
        return Err(invalid!(
            "guidance shapes differ: {}x{} vs {}x{}",
            cond.rows,
            cond.cols,
            uncond.rows,
            uncond.cols
        ));
    }
    if gamma == 0.0 {
        return Ok(cond.clone());
    }
    let w = gamma + 1.0;
    let data = cond
        .data
        .iter()
        .zip(&uncond.data)
        .map(|(&c, &u)| if c == u { c } else { u + w * (c - u) })
        .collect();
    Ok(Matrix::from_vec(cond.rows, cond.cols, data))
}

/// Output of one block of masked diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutcome {
    /// All block tokens, including anything after the first `<EOA>`.
    pub tokens: Vec<TokenId>,
    pub eoa_at: Option<usize>,
    pub steps: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub sequence: InterleavedSequence,
    pub trace: GenerationTrace,
}

pub struct Decoder<'a> {
    scorer: &'a dyn Scorer,
    cfg: DecodeConfig,
    remask: Box<dyn RemaskStrategy>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn gumbel(rng: &mut Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

impl<'a> Decoder<'a> {
    pub fn new(scorer: &'a dyn Scorer, cfg: DecodeConfig) -> Result<Self> {
        Self::with_registry(scorer, cfg, &RemaskRegistry::default())
    }

    pub fn with_registry(
        scorer: &'a dyn Scorer,
        cfg: DecodeConfig,
        registry: &RemaskRegistry,
    ) -> Result<Self> {
        cfg.check()?;
        let remask = registry.build(&cfg.remask)?;
        Ok(Decoder { scorer, cfg, remask })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.cfg
    }

    fn vocab(&self) -> &Vocabulary {
        self.scorer.vocab()
    }

    /// Generation stream for a prompt: depends on the seed and the prompt.
    pub fn rng_for(&self, prompt: &[TokenId]) -> Rng {
        let mut parts = vec![prompt.len() as u64];
        parts.extend(prompt.iter().map(|&t| t as u64));
        substream(self.cfg.seed, mix(&parts))
    }

    fn sample_ar(&self, row: &[f64], rng: &mut Rng) -> TokenId {
        let v = self.vocab();
        let mut legal: Vec<TokenId> = v.text_range().collect();
        legal.push(v.soa);
        legal.push(v.eos);
        let mut logits: Vec<f64> = legal
            .iter()
            .map(|&t| row[t as usize] / self.cfg.ar_temperature)
            .collect();
        if logits.iter().all(|x| *x == f64::NEG_INFINITY) {
            logits.fill(0.0);
        }
        let p = softmax(&logits);
        let mut order: Vec<usize> = (0..legal.len()).collect();
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        order.truncate(self.cfg.ar_top_k);
        let mut kept = Vec::new();
        let mut cum = 0.0;
        for &i in &order {
            kept.push(i);
            cum += p[i];
            if cum >= self.cfg.ar_top_p {
                break;
            }
        }
        let total: f64 = kept.iter().map(|&i| p[i]).sum();
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        for &i in &kept {
            acc += p[i];
            if u < acc {
                return legal[i];
            }
        }
        legal[*kept.last().expect("top-k keeps at least one")]
    }

    /// Logits for the block input, with guidance when enabled.
    fn block_logits(&self, x: &[TokenId], layout: &SequenceLayout) -> Result<Matrix<f64>> {
        let cond = self.scorer.score(x, layout)?;
        if self.cfg.gamma > 0.0 && !self.cfg.conditional_only {
            let m = self.vocab().mask;
            let uncond_x: Vec<TokenId> = x
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    if self.cfg.cfg_keep_prompt && layout.region(i) == Region::Prompt {
                        t
                    } else {
                        m
                    }
                })
                .collect();
            let uncond = self.scorer.score(&uncond_x, layout)?;
            cfg_logits(&cond, &uncond, self.cfg.gamma)
        } else {
            Ok(cond)
        }
    }

    /// Denoises `block_len` masked positions appended to `seq`, whose last
    /// span must be the open audio span.
    pub fn block_diffuse(
        &self,
        seq: &InterleavedSequence,
        block_len: usize,
        block_index: usize,
        rng: &mut Rng,
    ) -> Result<BlockOutcome> {
        let v = self.vocab().clone();
        let span_idx = seq.spans.len().checked_sub(1).filter(|&s| seq.spans[s].kind == SpanKind::Audio).ok_or_else(
            || invalid!("block diffusion needs an open audio span at the end of the context"),
        )?;
        let base = SequenceLayout::from_sequence(seq);
        let start = seq.len();
        let span_start = start - seq.spans[span_idx].len();
        let mut regions = base.regions().to_vec();
        regions.extend(std::iter::repeat(Region::Audio(span_idx)).take(block_len));
        let layout = SequenceLayout::new(regions)?;
        let mut x = seq.tokens();
        x.extend(std::iter::repeat(v.mask).take(block_len));
        let context = x[..start].to_vec();

        let sched = schedule(block_len, self.cfg.steps);
        let mut steps = Vec::new();
        let legal: Vec<TokenId> = v.audio_range().chain([v.eoa]).collect();
        for (t, &n_t) in sched.iter().enumerate() {
            let masked: Vec<usize> = (start..x.len()).filter(|&i| x[i] == v.mask).collect();
            if n_t == 0 {
                steps.push(TraceRecord::Nar {
                    span: span_idx,
                    block: block_index,
                    step: t,
                    masked: masked.len(),
                    commits: Vec::new(),
                });
                continue;
            }
            let logits = self.block_logits(&x, &layout)?;
            let mut cand: Vec<(usize, TokenId, f64)> = Vec::with_capacity(masked.len());
            for &i in &masked {
                let row = logits.row(i);
                let mut l: Vec<f64> = legal.iter().map(|&id| row[id as usize]).collect();
                if i == span_start {
                    *l.last_mut().expect("eoa is legal") = f64::NEG_INFINITY;
                }
                if l.iter().all(|x| *x == f64::NEG_INFINITY) {
                    l.iter_mut().take(v.n_audio as usize).for_each(|x| *x = 0.0);
                }
                let pick = if self.cfg.tau > 0.0 {
                    let noisy: Vec<f64> = l.iter().map(|&a| a + self.cfg.tau * gumbel(rng)).collect();
                    argmax(&noisy)
                } else {
                    argmax(&l)
                };
                let prob = softmax(&l)[pick];
                let conf = self.remask.confidence(prob, rng);
                cand.push((i, legal[pick], conf));
            }
            cand.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            let mut commits: Vec<Commit> = cand
                .into_iter()
                .take(n_t)
                .map(|(position, token, confidence)| Commit {
                    position,
                    token,
                    confidence,
                })
                .collect();
            commits.sort_by_key(|c| c.position);
            for c in &commits {
                x[c.position] = c.token;
            }
            steps.push(TraceRecord::Nar {
                span: span_idx,
                block: block_index,
                step: t,
                masked: masked.len(),
                commits,
            });
        }
        debug_assert_eq!(&x[..start], &context[..]);
        let tokens = x[start..].to_vec();
        let eoa_at = tokens.iter().position(|&t| t == v.eoa);
        Ok(BlockOutcome {
            tokens,
            eoa_at,
            steps,
        })
    }

    /// Audio phase after an `<SOA>`. Returns false if the length budget
    /// ran out.
    fn nar_phase(
        &self,
        seq: &mut InterleavedSequence,
        rng: &mut Rng,
        trace: &mut GenerationTrace,
    ) -> Result<bool> {
        let v = self.vocab().clone();
        let span_idx = seq.spans.len();
        seq.spans.push(Span::audio(Vec::new()));
        let max_len = self.scorer.max_len();
        for block_index in 0.. {
            let content = seq.spans[span_idx].len();
            let room = max_len.saturating_sub(seq.len() + 1);
            if content >= self.cfg.l_max || room == 0 {
                trace.push(TraceRecord::ForcedEoa {
                    span: span_idx,
                    position: seq.len(),
                });
                seq.spans[span_idx].tokens.push(v.eoa);
                return Ok(room > 0 || content >= self.cfg.l_max);
            }
            let b = self.cfg.block.min(room).min(self.cfg.l_max - content);
            let start = seq.len();
            let out = self.block_diffuse(seq, b, block_index, rng)?;
            trace.records.extend(out.steps);
            let kept = out.eoa_at.map_or(b, |p| p + 1);
            trace.push(TraceRecord::BlockEnd {
                span: span_idx,
                block: block_index,
                start,
                eoa_at: out.eoa_at,
                kept,
            });
            seq.spans[span_idx].tokens.extend_from_slice(&out.tokens[..kept]);
            if out.eoa_at.is_some() {
                return Ok(true);
            }
        }
        unreachable!("block loop only exits by return")
    }

    pub fn generate(&self, prompt: &[TokenId], direction: Direction) -> Result<Generation> {
        let v = self.vocab().clone();
        if prompt.is_empty() {
            return Err(invalid!("prompt must not be empty"));
        }
        if let Some(&t) = prompt.iter().find(|&&t| !(v.is_text(t) || v.is_audio(t))) {
            return Err(invalid!("prompt token {t} is not a text or audio id"));
        }
        let max_len = self.scorer.max_len();
        if prompt.len() >= max_len {
            return Err(Error::Limit(format!(
                "prompt of {} tokens leaves no room under max_len {max_len}",
                prompt.len()
            )));
        }
        let mut rng = self.rng_for(prompt);
        let mut seq = InterleavedSequence {
            prompt: prompt.to_vec(),
            spans: Vec::new(),
            direction,
        };
        let mut trace = GenerationTrace::default();
        let mut emitted = 0;
        let reason = loop {
            if emitted >= self.cfg.ar_max_tokens {
                break StopReason::ArMaxTokens;
            }
            if seq.len() + 1 > max_len {
                break StopReason::MaxLen;
            }
            let tokens = seq.tokens();
            let layout = SequenceLayout::from_sequence(&seq);
            let logits = self.scorer.score(&tokens, &layout)?;
            let tok = self.sample_ar(logits.row(tokens.len() - 1), &mut rng);
            trace.push(TraceRecord::Ar {
                position: tokens.len(),
                token: tok,
            });
            match seq.spans.last_mut() {
                Some(s) if s.kind == SpanKind::Text => s.tokens.push(tok),
                _ => seq.spans.push(Span::text(vec![tok])),
            }
            emitted += 1;
            if tok == v.eos {
                break StopReason::Eos;
            }
            if tok == v.soa && !self.nar_phase(&mut seq, &mut rng, &mut trace)? {
                break StopReason::MaxLen;
            }
        };
        trace.push(TraceRecord::Stop { reason });
        Ok(Generation {
            sequence: seq,
            trace,
        })
    }
}

/// Convenience wrapper around [`Decoder::generate`].
pub fn hybrid_generate(
    scorer: &dyn Scorer,
    prompt: &[TokenId],
    direction: Direction,
    cfg: &DecodeConfig,
) -> Result<Generation> {
    Decoder::new(scorer, cfg.clone())?.generate(prompt, direction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule(8, 4), vec![2, 2, 2, 2]);
        assert_eq!(schedule(7, 4), vec![2, 2, 2, 1]);
        assert_eq!(schedule(0, 4), vec![0, 0, 0, 0]);
        assert_eq!(schedule(5, 1), vec![5]);
        let s = schedule(32, 200);
        assert_eq!(s.iter().sum::<usize>(), 32);
        assert_eq!(s.iter().filter(|&&c| c == 1).count(), 32);
    }

    #[test]
    fn cfg_examples() {
        let c = Matrix::from_vec(1, 3, vec![1.0, 0.3, -2.0]);
        let u = Matrix::from_vec(1, 3, vec![0.0, 0.7, 5.0]);
        assert_eq!(cfg_logits(&c, &u, 0.0).unwrap(), c);
        assert_eq!(cfg_logits(&c, &c, 3.7).unwrap(), c);
        assert!((cfg_logits(&c, &u, 0.1).unwrap().data[0] - 1.1).abs() < 1e-15);
        assert!(cfg_logits(&c, &Matrix::zeros(2, 3), 0.1).is_err());
    }

    use crate::corpus::{build_vocabulary, generate_record, validate_sequence, TaskSpec};

    /// Text: one `<SOA>`, then `<EOS>` once an audio span exists. Audio:
    /// fixed id everywhere except `<EOA>` at span offset `eoa_at`.
    struct Scripted {
        vocab: Vocabulary,
        eoa_at: usize,
        first: TokenId,
    }

    impl Scorer for Scripted {
        fn vocab(&self) -> &Vocabulary {
            &self.vocab
        }

        fn max_len(&self) -> usize {
            4096
        }

        fn score(&self, tokens: &[TokenId], layout: &SequenceLayout) -> Result<Matrix<f64>> {
            let v = &self.vocab;
            let mut m = Matrix::zeros(tokens.len(), v.size());
            for q in 0..tokens.len() {
                let row = m.row_mut(q);
                match layout.region(q) {
                    Region::Audio(s) => {
                        let off = q - layout.span_range(s).unwrap().start;
                        let id = if off == self.eoa_at { v.eoa } else { v.audio_id(off as u32 % v.n_audio) };
                        row[id as usize] = 5.0;
                    }
                    _ => {
                        let next = if tokens.contains(&v.eoa) { v.eos } else { self.first };
                        row[next as usize] = 50.0;
                    }
                }
            }
            Ok(m)
        }
    }

    fn scripted(eoa_at: usize, first: TokenId) -> Scripted {
        let vocab = build_vocabulary(32, 64).unwrap();
        Scripted { vocab, eoa_at, first }
    }

    #[test]
    fn forced_eos_gives_empty_response() {
        let s = scripted(3, 98);
        let g = hybrid_generate(&s, &[1, 2], Direction::Tts, &DecodeConfig::default()).unwrap();
        assert_eq!(g.sequence.spans, vec![Span::text(vec![s.vocab.eos])]);
        assert_eq!(g.trace.stop_reason(), Some(StopReason::Eos));
    }

    #[test]
    fn truncates_at_first_eoa() {
        let s = scripted(3, 96);
        let cfg = DecodeConfig {
            steps: 8,
            ..DecodeConfig::default()
        };
        let g = hybrid_generate(&s, &[1, 2], Direction::Tts, &cfg).unwrap();
        let audio = &g.sequence.spans[1];
        assert_eq!(audio.tokens, vec![32, 33, 34, 97]);
        let end = g
            .trace
            .records
            .iter()
            .find_map(|r| match r {
                TraceRecord::BlockEnd { eoa_at, kept, .. } => Some((*eoa_at, *kept)),
                _ => None,
            })
            .unwrap();
        assert_eq!(end, (Some(3), 4));
        assert_eq!(replay(&[1, 2], Direction::Tts, &g.trace, &s.vocab).unwrap(), g.sequence);
    }

    #[test]
    fn l_max_forces_eoa() {
        let s = scripted(10_000, 96);
        let cfg = DecodeConfig {
            steps: 4,
            block: 8,
            l_max: 24,
            ..DecodeConfig::default()
        };
        let g = hybrid_generate(&s, &[1], Direction::Tts, &cfg).unwrap();
        assert_eq!(g.sequence.spans[1].len(), 25);
        assert_eq!(g.sequence.spans[1].tokens.last(), Some(&s.vocab.eoa));
        assert!(g.trace.records.iter().any(|r| matches!(r, TraceRecord::ForcedEoa { .. })));
        assert!(validate_sequence(&g.sequence, &s.vocab, None).is_valid());
    }

    #[test]
    fn single_step_commits_whole_block() {
        let s = scripted(5, 96);
        let cfg = DecodeConfig {
            steps: 1,
            block: 8,
            l_max: 64,
            ..DecodeConfig::default()
        };
        let dec = Decoder::new(&s, cfg).unwrap();
        let seq = InterleavedSequence {
            prompt: vec![1],
            spans: vec![Span::text(vec![96]), Span::audio(vec![])],
            direction: Direction::Tts,
        };
        let out = dec.block_diffuse(&seq, 8, 0, &mut dec.rng_for(&[1])).unwrap();
        assert_eq!(out.steps.len(), 1);
        match &out.steps[0] {
            TraceRecord::Nar { commits, masked, .. } => {
                assert_eq!(*masked, 8);
                assert_eq!(commits.len(), 8);
            }
            r => panic!("unexpected {r:?}"),
        }
        assert_eq!(out.eoa_at, Some(5));
    }

    #[test]
    fn greedy_output_ignores_remask_strategy() {
        let vocab = build_vocabulary(32, 64).unwrap();
        let spec = TaskSpec::default();
        let oracle = OracleScorer::new(spec.clone(), vocab.clone(), OracleAudio::Noisy { seed: 3, scale: 4.0 });
        let rec = generate_record(&spec, &vocab, 9, 0).unwrap();
        let mut outs = Vec::new();
        for remask in ["low_confidence", "random"] {
            let cfg = DecodeConfig {
                steps: 7,
                block: 16,
                l_max: 64,
                remask: remask.into(),
                ..DecodeConfig::default()
            };
            outs.push(hybrid_generate(&oracle, &rec.prompt, Direction::Tts, &cfg).unwrap().sequence);
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], rec);
    }

    #[test]
    fn empty_or_special_prompt_is_rejected() {
        let s = scripted(3, 96);
        let cfg = DecodeConfig::default();
        assert!(hybrid_generate(&s, &[], Direction::Tts, &cfg).is_err());
        assert!(hybrid_generate(&s, &[1, 99], Direction::Tts, &cfg).is_err());
    }

    #[test]
    fn config_checks() {
        assert!(DecodeConfig::default().check().is_ok());
        let bad = DecodeConfig {
            l_max: 48,
            ..DecodeConfig::default()
        };
        assert!(bad.check().is_err());
        let bad = DecodeConfig {
            steps: 0,
            ..DecodeConfig::default()
        };
        assert!(bad.check().is_err());
    }
}
