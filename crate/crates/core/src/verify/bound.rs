use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::SequenceLayout;
use crate::corpus::InterleavedSequence;
use crate::corruption::CorruptedBatchItem;
use crate::decoder::Scorer;
use crate::error::{Error, Result};
use crate::linalg::{log_softmax, logsumexp};
use crate::model::{ar_loss, unified_loss_with, LossOptions};
use crate::rng::Rng;

/// Longest audio span (`<EOA>` included) the enumeration oracles accept.
pub const MAX_ENUM_SPAN: usize = 6;

/// Per-subset conditionals of one audio span, every other span clean.
///
/// Subsets are bitmasks over span offsets; bit set means masked.
struct SubsetTable {
    n: usize,
    /// `logq[m][i]`: log-probability of the true token at offset `i` when
    /// the offsets in `m` are masked (meaningful only for `i` in `m`).
    logq: Vec<Vec<f64>>,
    /// Unweighted denoising loss over the masked offsets, as computed by the
    /// training loss with the given options.
    dce: Vec<f64>,
}

fn audio_range(seq: &InterleavedSequence, ordinal: usize) -> Result<Range<usize>> {
    let spans = seq.audio_spans();
    let (_, r) = spans.get(ordinal).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "audio span {ordinal} does not exist ({} spans)",
            spans.len()
        ))
    })?;
    if r.len() > MAX_ENUM_SPAN {
        return Err(Error::Limit(format!(
            "audio span {ordinal} has {} tokens; exact enumeration is limited to {MAX_ENUM_SPAN}",
            r.len()
        )));
    }
    Ok(r.clone())
}

impl SubsetTable {
    fn build(
        scorer: &dyn Scorer,
        seq: &InterleavedSequence,
        ordinal: usize,
        opts: &LossOptions,
    ) -> Result<Self> {
        let range = audio_range(seq, ordinal)?;
        let n = range.len();
        let vocab = scorer.vocab();
        let clean = CorruptedBatchItem::clean(seq, vocab);
        let layout = SequenceLayout::from_sequence(seq);
        let mut logq = Vec::with_capacity(1 << n);
        let mut dce = Vec::with_capacity(1 << n);
        for m in 0..1usize << n {
            let mut item = clean.clone();
            item.ar_positions.clear();
            for i in 0..n {
                if m >> i & 1 == 1 {
                    item.tokens[range.start + i] = vocab.mask;
                    item.nar_positions.push(range.start + i);
                }
            }
            let logits = scorer.score(&item.tokens, &layout)?;
            let mut row = vec![0.0; n];
            for (i, slot) in row.iter_mut().enumerate() {
                if m >> i & 1 == 1 {
                    let p = range.start + i;
                    *slot = log_softmax(logits.row(p))[item.clean_tokens[p] as usize];
                }
            }
            logq.push(row);
            dce.push(unified_loss_with(&logits, &item, opts)?.l_nar);
        }
        Ok(SubsetTable { n, logq, dce })
    }

    fn full(&self) -> usize {
        (1 << self.n) - 1
    }
}

/// Order-marginalized likelihood of one audio span and the matching
/// any-order loss, both exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanMarginal {
    pub span: usize,
    pub len: usize,
    /// `log` of the permutation-averaged span likelihood.
    pub log_prob: f64,
    /// Permutation average of the summed negative log-conditionals.
    pub ao_nll: f64,
}

impl SpanMarginal {
    pub fn prob(&self) -> f64 {
        self.log_prob.exp()
    }
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

fn marginal_from_table(t: &SubsetTable, span: usize) -> SpanMarginal {
    let full = t.full();
    // indexed by revealed set
    let mut g = vec![0.0; full + 1];
    let mut h = vec![0.0; full + 1];
    for s in 1..=full {
        let mut terms = Vec::with_capacity(t.n);
        let mut acc = 0.0;
        for i in (0..t.n).filter(|&i| s >> i & 1 == 1) {
            let before = s & !(1 << i);
            let lq = t.logq[full & !before][i];
            terms.push(g[before] + lq);
            acc += h[before] - lq;
        }
        g[s] = logsumexp(&terms);
        h[s] = acc / s.count_ones() as f64;
    }
    SpanMarginal {
        span,
        len: t.n,
        log_prob: g[full] - ln_factorial(t.n),
        ao_nll: h[full],
    }
}

/// Exact order-marginalized likelihood of audio span `ordinal` (0-based
/// among audio spans), everything else in `seq` taken as clean context.
pub fn exact_order_marginal(
    scorer: &dyn Scorer,
    seq: &InterleavedSequence,
    ordinal: usize,
) -> Result<SpanMarginal> {
    let t = SubsetTable::build(scorer, seq, ordinal, &LossOptions::default())?;
    Ok(marginal_from_table(&t, ordinal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub l_ar: f64,
    pub l_ao_exact: f64,
    pub neg_log_ptilde: f64,
    pub slack: f64,
    pub spans: Vec<SpanMarginal>,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str = "l_ar,l_ao_exact,neg_log_ptilde,slack,n_spans,max_span";

    pub fn holds(&self, tolerance: f64) -> bool {
        self.slack >= -tolerance
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.l_ar,
            self.l_ao_exact,
            self.neg_log_ptilde,
            self.slack,
            self.spans.len(),
            self.spans.iter().map(|s| s.len).max().unwrap_or(0)
        )
    }
}

/// Computes both sides of the unified bound on one clean sequence.
pub fn verify_unified_bound(scorer: &dyn Scorer, seq: &InterleavedSequence) -> Result<BoundReport> {
    let vocab = scorer.vocab();
    let clean = CorruptedBatchItem::clean(seq, vocab);
    let logits = scorer.score(&clean.tokens, clean.layout())?;
    let l_ar = ar_loss(&logits, &clean)?;
    let mut spans = Vec::new();
    for m in 0..seq.num_pairs() {
        spans.push(exact_order_marginal(scorer, seq, m)?);
    }
    let l_ao_exact: f64 = spans.iter().map(|s| s.ao_nll).sum();
    let audio_nlp: f64 = spans.iter().map(|s| -s.log_prob).sum();
    let neg_log_ptilde = l_ar + audio_nlp;
    let slack = (l_ar + l_ao_exact) - neg_log_ptilde;
    if !slack.is_finite() {
        return Err(Error::Numeric(format!("bound slack is not finite ({slack})")));
    }
    Ok(BoundReport {
        l_ar,
        l_ao_exact,
        neg_log_ptilde,
        slack,
        spans,
    })
}

/// Mean and standard error of a sample. The mean is accumulated relative to
/// the first sample so that a constant sample is reproduced exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                std_err: f64::NAN,
                n,
            };
        }
        let x0 = xs[0];
        let shift: f64 = xs.iter().map(|&x| x - x0).sum::<f64>() / n as f64;
        let mean = x0 + shift;
        let var = if n > 1 {
            xs.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Estimate {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub span: usize,
    pub span_len: usize,
    /// Random-permutation estimate of the any-order loss.
    pub ao: Estimate,
    /// Random-level estimate of the `1/lambda`-weighted denoising loss.
    pub dce: Estimate,
    /// Exact value from full enumeration, for reference.
    pub exact: f64,
}

impl EquivalenceReport {
    pub const CSV_HEADER: &'static str =
        "span,span_len,ao_mean,ao_se,dce_mean,dce_se,exact,z";

    pub fn combined_se(&self) -> f64 {
        self.ao.std_err.hypot(self.dce.std_err)
    }

    /// `|ao - dce|` in units of the combined standard error.
    pub fn z(&self) -> f64 {
        (self.ao.mean - self.dce.mean).abs() / self.combined_se()
    }

    /// Agreement within `k` combined standard errors, plus a rounding
    /// allowance for estimators whose sample variance vanishes.
    pub fn agrees(&self, k: f64) -> bool {
        let slack = 1e-9 * (1.0 + self.ao.mean.abs());
        (self.ao.mean - self.dce.mean).abs() <= k * self.combined_se() + slack
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.span,
            self.span_len,
            self.ao.mean,
            self.ao.std_err,
            self.dce.mean,
            self.dce.std_err,
            self.exact,
            self.z()
        )
    }
}

/// Monte Carlo estimates of the any-order loss and of the `1/lambda`
/// denoising loss for one audio span.
///
/// The any-order side draws a uniform permutation and sums the negative
/// log-conditionals along it. The denoising side draws `lambda ~ U(0, 1)`
/// with no lower clamp and averages `(1/lambda) * loss(mask)` over masks
/// analytically: `lambda^(k-1) (1-lambda)^(n-k)` per mask of size `k`. Sampled
/// masks would make the estimator's variance infinite near `lambda = 0`.
pub fn estimate_ao_vs_dce(
    scorer: &dyn Scorer,
    seq: &InterleavedSequence,
    ordinal: usize,
    n_samples: usize,
    opts: &LossOptions,
    rng: &mut Rng,
) -> Result<EquivalenceReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let t = SubsetTable::build(scorer, seq, ordinal, opts)?;
    let n = t.n;
    let full = t.full();
    let exact = marginal_from_table(&t, ordinal).ao_nll;

    let mut order: Vec<usize> = (0..n).collect();
    let mut ao = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        order.shuffle(rng);
        let mut masked = full;
        let mut total = 0.0;
        for &i in &order {
            total -= t.logq[masked][i];
            masked &= !(1 << i);
        }
        ao.push(total);
    }

    let mut dce = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let lambda: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let mut total = 0.0;
        for m in 1..=full {
            let k = m.count_ones() as i32;
            let w = lambda.powi(k - 1) * (1.0 - lambda).powi(n as i32 - k);
            total += w * t.dce[m];
        }
        dce.push(total);
    }

    Ok(EquivalenceReport {
        span: ordinal,
        span_len: n,
        ao: Estimate::from_samples(&ao),
        dce: Estimate::from_samples(&dce),
        exact,
    })
}

/// Small random interleaved sequence with one audio span per entry of
/// `span_lens` (each length counts the closing `<EOA>`).
pub fn tiny_sequence(
    vocab: &crate::corpus::Vocabulary,
    span_lens: &[usize],
    rng: &mut Rng,
) -> InterleavedSequence {
    use crate::corpus::{Direction, Span};
    let text = |rng: &mut Rng| vocab.text_start + rng.gen_range(0..vocab.n_text);
    let audio = |rng: &mut Rng| vocab.audio_id(rng.gen_range(0..vocab.n_audio));
    let prompt = (0..rng.gen_range(1..=3)).map(|_| text(rng)).collect();
    let mut spans = Vec::new();
    for &len in span_lens {
        let mut t: Vec<_> = (0..rng.gen_range(1..=2)).map(|_| text(rng)).collect();
        t.push(vocab.soa);
        spans.push(Span::text(t));
        let mut a: Vec<_> = (1..len.max(1)).map(|_| audio(rng)).collect();
        a.push(vocab.eoa);
        spans.push(Span::audio(a));
    }
    spans.push(Span::text(vec![vocab.eos]));
    InterleavedSequence {
        prompt,
        spans,
        direction: Direction::Tts,
    }
}
