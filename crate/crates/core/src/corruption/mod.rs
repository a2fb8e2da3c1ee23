//! Absorbing-diffusion masking of audio spans and the train-time strategies
//! that shape which positions are corrupted.

mod item;
mod strategy;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use item::CorruptedBatchItem;
pub use strategy::{
    BatchBuilder, Banom, Ppm, Sst, SstOpen, Stage, Strategy, StrategyFactory, StrategyRegistry,
};

use crate::corpus::{InterleavedSequence, SpanKind, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Probability that a token has been absorbed by accumulated noise
/// `sigma_bar`.
pub fn lambda_of_t(sigma_bar: f64) -> Result<f64> {
    if !(sigma_bar >= 0.0) {
        return Err(invalid!("sigma_bar must be >= 0, got {sigma_bar}"));
    }
    Ok(-(-sigma_bar).exp_m1())
}

/// Time factor `e^-s / (1 - e^-s)` of the concrete score.
pub fn concrete_score_scalar(sigma_bar: f64) -> Result<f64> {
    if !(sigma_bar > 0.0) {
        return Err(invalid!("sigma_bar must be > 0, got {sigma_bar}"));
    }
    Ok(1.0 / sigma_bar.exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub p_mix: f64,
    pub p_prefix: f64,
    pub p_trunc: f64,
    pub lambda_min: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            p_mix: 0.3,
            p_prefix: 0.3,
            p_trunc: 0.5,
            lambda_min: 0.01,
        }
    }
}

impl CorruptionConfig {
    pub fn check(&self) -> Result<()> {
        for (name, p) in [
            ("p_mix", self.p_mix),
            ("p_prefix", self.p_prefix),
            ("p_trunc", self.p_trunc),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.lambda_min > 0.0 && self.lambda_min < 1.0) {
            return Err(Error::Config(format!(
                "lambda_min must lie in (0, 1), got {}",
                self.lambda_min
            )));
        }
        Ok(())
    }
}

/// Draws `lambda ~ U[lambda_min, 1]` and masks every audio token
/// independently with that probability.
pub fn corrupt(
    seq: &InterleavedSequence,
    vocab: &Vocabulary,
    cfg: &CorruptionConfig,
    rng: &mut Rng,
) -> CorruptedBatchItem {
    let lambda = rng.gen_range(cfg.lambda_min..=1.0);
    corrupt_with_lambda(seq, vocab, lambda, rng)
}

/// Masking at a fixed level `lambda`.
pub fn corrupt_with_lambda(
    seq: &InterleavedSequence,
    vocab: &Vocabulary,
    lambda: f64,
    rng: &mut Rng,
) -> CorruptedBatchItem {
    let mut item = CorruptedBatchItem::clean(seq, vocab);
    item.lambda = lambda;
    for range in item.audio_spans.clone() {
        for i in range {
            if lambda >= 1.0 || rng.gen::<f64>() < lambda {
                item.tokens[i] = vocab.mask;
                item.nar_positions.push(i);
            }
        }
    }
    item.refresh_ar_positions(vocab);
    item
}

/// Batch-level mixing: each item independently, with probability `p_mix`,
/// is reset to its clean tokens and trained on text only.
pub fn apply_banom(
    items: Vec<CorruptedBatchItem>,
    p_mix: f64,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Vec<CorruptedBatchItem> {
    items
        .into_iter()
        .map(|item| {
            if rng.gen::<f64>() < p_mix {
                make_clean(item, vocab)
            } else {
                item
            }
        })
        .collect()
}

pub(crate) fn make_clean(mut item: CorruptedBatchItem, vocab: &Vocabulary) -> CorruptedBatchItem {
    item.tokens.clone_from(&item.clean_tokens);
    item.nar_positions.clear();
    item.banom_clean = true;
    item.refresh_ar_positions(vocab);
    item
}

/// With probability `p_prefix`, draws a cutoff `m ~ U{1..M}` and restores
/// audio spans before it.
pub fn apply_ppm(
    item: CorruptedBatchItem,
    p_prefix: f64,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> CorruptedBatchItem {
    let m_total = item.audio_spans.len();
    if m_total == 0 || rng.gen::<f64>() >= p_prefix {
        return item;
    }
    let m = rng.gen_range(1..=m_total);
    apply_ppm_with_cutoff(item, m, vocab)
}

/// Restores audio spans `1..m` (1-based) to clean; spans `m..=M` keep their
/// masking.
pub fn apply_ppm_with_cutoff(
    mut item: CorruptedBatchItem,
    m: usize,
    vocab: &Vocabulary,
) -> CorruptedBatchItem {
    assert!(m >= 1 && m <= item.audio_spans.len().max(1), "cutoff out of range");
    for ordinal in 0..m - 1 {
        item.restore_span(ordinal);
        item.excluded_spans.push(ordinal);
    }
    item.ppm_cutoff = Some(m);
    item.refresh_ar_positions(vocab);
    item
}

/// With probability `p_trunc`, truncates the final audio span to
/// `k ~ U{1..|A_M|-1}` content tokens followed by a fresh `<EOA>`.
/// Returns the sequence and the drawn `k`.
pub fn apply_sst(
    seq: &InterleavedSequence,
    vocab: &Vocabulary,
    p_trunc: f64,
    rng: &mut Rng,
) -> (InterleavedSequence, Option<usize>) {
    let Some(span) = seq.last_audio_span() else {
        return (seq.clone(), None);
    };
    let full = span.len();
    if full < 2 || rng.gen::<f64>() >= p_trunc {
        return (seq.clone(), None);
    }
    let k = rng.gen_range(1..full);
    (truncate_final_span(seq, vocab, k), Some(k))
}

/// Keeps the first `k` content tokens of the final audio span and appends
/// `<EOA>`.
pub fn truncate_final_span(
    seq: &InterleavedSequence,
    vocab: &Vocabulary,
    k: usize,
) -> InterleavedSequence {
    let mut out = seq.clone();
    if let Some(span) = out
        .spans
        .iter_mut()
        .rev()
        .find(|s| s.kind == SpanKind::Audio)
    {
        let content: Vec<_> = span.tokens.iter().copied().filter(|&t| t != vocab.eoa).collect();
        let keep = k.min(content.len());
        span.tokens = content[..keep].to_vec();
        span.tokens.push(vocab.eoa);
    }
    out
}

/// Variant of [`apply_sst`] that leaves the truncated span open: the
/// `<EOA>` and everything after the kept prefix are dropped, so the sequence
/// ends on an audio token.
pub fn apply_sst_open(
    seq: &InterleavedSequence,
    vocab: &Vocabulary,
    p_trunc: f64,
    rng: &mut Rng,
) -> (InterleavedSequence, Option<usize>) {
    let (out, k) = apply_sst(seq, vocab, p_trunc, rng);
    match k {
        Some(k) => (open_final_span(&out, vocab, k), Some(k)),
        None => (out, None),
    }
}

/// Keeps the first `k` content tokens of the final audio span and drops
/// its `<EOA>` and all later spans.
pub fn open_final_span(seq: &InterleavedSequence, vocab: &Vocabulary, k: usize) -> InterleavedSequence {
    let mut out = seq.clone();
    if let Some(i) = out.spans.iter().rposition(|s| s.kind == SpanKind::Audio) {
        out.spans.truncate(i + 1);
        let span = &mut out.spans[i];
        span.tokens.retain(|&t| t != vocab.eoa);
        span.tokens.truncate(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, generate_record, validate_sequence, Direction, Span, TaskSpec};
    use crate::rng::substream;

    fn vocab() -> Vocabulary {
        build_vocabulary(32, 64).unwrap()
    }

    fn three_span_seq(v: &Vocabulary) -> InterleavedSequence {
        let spec = TaskSpec {
            min_text_len: 10,
            max_text_len: 10,
            ..TaskSpec::default()
        };
        generate_record(&spec, v, 5, 0).unwrap()
    }

    #[test]
    fn lambda_closed_forms() {
        assert_eq!(lambda_of_t(0.0).unwrap(), 0.0);
        assert!((lambda_of_t(2f64.ln()).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(lambda_of_t(f64::INFINITY).unwrap(), 1.0);
        assert!(lambda_of_t(800.0).unwrap() == 1.0);
        assert!(lambda_of_t(-1e-3).is_err());
        assert!(lambda_of_t(f64::NAN).is_err());
    }

    #[test]
    fn concrete_score_closed_forms() {
        assert!((concrete_score_scalar(2f64.ln()).unwrap() - 1.0).abs() < 1e-12);
        // e^-s/(1-e^-s) at s = ln(4/3): (3/4)/(1/4)
        assert!((concrete_score_scalar((4.0f64 / 3.0).ln()).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(concrete_score_scalar(f64::INFINITY).unwrap(), 0.0);
        assert!(concrete_score_scalar(0.0).is_err());
        assert!(concrete_score_scalar(-1.0).is_err());
    }

    #[test]
    fn concrete_score_is_time_separable() {
        // score ratio for one masked position = scalar(s) * q(x); the ratio
        // between two times must not depend on q
        for &q in &[0.1, 0.5, 0.9] {
            let r = concrete_score_scalar(0.3).unwrap() * q / (concrete_score_scalar(1.7).unwrap() * q);
            let expected = concrete_score_scalar(0.3).unwrap() / concrete_score_scalar(1.7).unwrap();
            assert!((r - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_one_masks_all_audio() {
        let v = vocab();
        let seq = three_span_seq(&v);
        let item = corrupt_with_lambda(&seq, &v, 1.0, &mut substream(0, 0));
        let audio: Vec<usize> = seq.audio_spans().into_iter().flat_map(|(_, r)| r).collect();
        assert_eq!(item.nar_positions, audio);
        for (i, &t) in item.tokens.iter().enumerate() {
            assert_eq!(t == v.mask, audio.contains(&i));
        }
    }

    #[test]
    fn no_audio_spans_is_vacuous() {
        let v = vocab();
        let seq = InterleavedSequence {
            prompt: vec![1, 2],
            spans: vec![Span::text(vec![3, v.eos])],
            direction: Direction::Chat,
        };
        let item = corrupt(&seq, &v, &CorruptionConfig::default(), &mut substream(1, 1));
        assert!(item.nar_positions.is_empty());
        assert_eq!(item.tokens, item.clean_tokens);
        assert_eq!(item.ar_positions, vec![2, 3]);
    }

    #[test]
    fn text_after_masked_eoa_is_not_an_ar_target() {
        let v = vocab();
        let seq = three_span_seq(&v);
        let item = corrupt_with_lambda(&seq, &v, 1.0, &mut substream(0, 0));
        for &k in &item.ar_positions {
            assert_ne!(item.tokens[k - 1], v.mask);
            assert!(k >= seq.prompt.len());
        }
        let clean = CorruptedBatchItem::clean(&seq, &v);
        let text: Vec<usize> = (0..clean.len()).filter(|&i| clean.is_text_position(i)).collect();
        assert_eq!(clean.ar_positions, text);
    }

    #[test]
    fn ppm_cutoff_two_of_three() {
        let v = vocab();
        let seq = three_span_seq(&v);
        assert_eq!(seq.num_pairs(), 3);
        let item = corrupt_with_lambda(&seq, &v, 1.0, &mut substream(0, 0));
        let out = apply_ppm_with_cutoff(item.clone(), 2, &v);
        let spans = &out.audio_spans;
        assert_eq!(out.excluded_spans, vec![0]);
        for i in spans[0].clone() {
            assert_eq!(out.tokens[i], out.clean_tokens[i]);
            assert!(!out.nar_positions.contains(&i));
        }
        for i in spans[1].clone().chain(spans[2].clone()) {
            assert_eq!(out.tokens[i], v.mask);
            assert!(out.nar_positions.contains(&i));
        }
        let first = apply_ppm_with_cutoff(item.clone(), 1, &v);
        assert_eq!(first.tokens, item.tokens);
        assert_eq!(first.ppm_cutoff, Some(1));
        let last = apply_ppm_with_cutoff(item, 3, &v);
        assert!(last.nar_positions.iter().all(|p| spans[2].contains(p)));
        assert_eq!(last.nar_positions.len(), spans[2].len());
    }

    #[test]
    fn banom_extremes() {
        let v = vocab();
        let seq = three_span_seq(&v);
        let items: Vec<_> = (0..8)
            .map(|i| corrupt(&seq, &v, &CorruptionConfig::default(), &mut substream(2, i)))
            .collect();
        let same = apply_banom(items.clone(), 0.0, &v, &mut substream(3, 0));
        assert_eq!(same, items);
        let clean = apply_banom(items, 1.0, &v, &mut substream(3, 0));
        for it in &clean {
            assert!(it.nar_positions.is_empty());
            assert_eq!(it.tokens, it.clean_tokens);
            assert!(!it.ar_positions.is_empty());
        }
        let again = apply_banom(clean.clone(), 1.0, &v, &mut substream(4, 0));
        assert_eq!(again, clean);
    }

    #[test]
    fn sst_keeps_k_tokens_and_appends_eoa() {
        let v = build_vocabulary(4, 8).unwrap();
        let a = |o| v.audio_id(o);
        let seq = InterleavedSequence {
            prompt: vec![0],
            spans: vec![
                Span::text(vec![1, v.soa]),
                Span::audio(vec![a(0), a(1), a(2), a(3), v.eoa]),
                Span::text(vec![v.eos]),
            ],
            direction: Direction::Tts,
        };
        let out = truncate_final_span(&seq, &v, 2);
        assert_eq!(out.spans[1].tokens, vec![a(0), a(1), v.eoa]);
        assert!(validate_sequence(&out, &v, None).is_valid());
        let (same, k) = apply_sst(&seq, &v, 0.0, &mut substream(0, 0));
        assert_eq!(same, seq);
        assert_eq!(k, None);
    }

    #[test]
    fn open_truncation_drops_eoa_and_suffix() {
        let v = build_vocabulary(4, 8).unwrap();
        let a = |o| v.audio_id(o);
        let seq = InterleavedSequence {
            prompt: vec![0],
            spans: vec![
                Span::text(vec![1, v.soa]),
                Span::audio(vec![a(0), a(1), a(2), a(3), v.eoa]),
                Span::text(vec![v.eos]),
            ],
            direction: Direction::Tts,
        };
        let out = open_final_span(&seq, &v, 3);
        assert_eq!(out.spans.len(), 2);
        assert_eq!(out.spans[1].tokens, vec![a(0), a(1), a(2)]);

        let v = vocab();
        let seq = three_span_seq(&v);
        let full = seq.last_audio_span().unwrap().len() - 1;
        for s in 0..50 {
            let (out, k) = apply_sst_open(&seq, &v, 1.0, &mut substream(s, 1));
            let k = k.unwrap();
            assert!((1..=full).contains(&k));
            assert_eq!(out.spans.last().unwrap().tokens.len(), k);
            assert_eq!(out.spans.last().unwrap().kind, SpanKind::Audio);
            let item = corrupt_with_lambda(&out, &v, 1.0, &mut substream(s, 2));
            assert_eq!(item.nar_positions.len(), out.audio_spans().iter().map(|(_, r)| r.len()).sum::<usize>());
        }
    }

    #[test]
    fn config_rejects_out_of_range() {
        let mut c = CorruptionConfig::default();
        assert!(c.check().is_ok());
        c.p_mix = 1.5;
        assert!(c.check().is_err());
        c = CorruptionConfig {
            lambda_min: 0.0,
            ..CorruptionConfig::default()
        };
        assert!(c.check().is_err());
    }
}
