use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    expand_audio, validate_sequence, InterleavedSequence, SpanKind, TaskSpec, TokenId, Vocabulary,
};
use crate::decoder::{DecodeConfig, Decoder, Scorer};
use crate::error::Result;
use crate::rng::substream;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TextErrors {
    pub records: usize,
    pub distance: usize,
    pub ref_len: usize,
    /// Edit distance over reference length.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub failures: Vec<RecordFailure>,
    /// Generated sequences that break a structural invariant.
    pub invalid: usize,
    pub truncated: usize,
    pub text: BTreeMap<String, TextErrors>,
    pub audio_correct: usize,
    pub audio_total: usize,
    pub audio_accuracy: f64,
    /// Final audio spans whose `<EOA>` sits exactly where the codebook
    /// expansion of the preceding text ends.
    pub eoa_exact: usize,
    pub eoa_accuracy: f64,
    /// Generated minus expected final-span content length.
    pub eoa_error_hist: BTreeMap<i64, usize>,
    /// Generations with no audio span at all.
    pub missing_final_span: usize,
    /// Content length of every generated audio span.
    pub span_len_hist: BTreeMap<usize, usize>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "records,failures,invalid,truncated,text_error_rate,audio_accuracy,eoa_accuracy";

    pub fn generated(&self) -> usize {
        self.records - self.failures.len()
    }

    /// Text error rate pooled over directions.
    pub fn text_error_rate(&self) -> f64 {
        let d: usize = self.text.values().map(|t| t.distance).sum();
        let n: usize = self.text.values().map(|t| t.ref_len).sum();
        ratio(d, n)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.records,
            self.failures.len(),
            self.invalid,
            self.truncated,
            self.text_error_rate(),
            self.audio_accuracy,
            self.eoa_accuracy
        )
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per text/audio pair: the expected audio content (codebook expansion of
/// the text span) and the generated content, `<EOA>` stripped.
fn audio_pairs(
    seq: &InterleavedSequence,
    vocab: &Vocabulary,
    r: u32,
) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    let mut out = Vec::new();
    for w in seq.spans.windows(2) {
        if w[0].kind == SpanKind::Text && w[1].kind == SpanKind::Audio {
            let text: Vec<TokenId> = w[0].tokens.iter().copied().filter(|&t| vocab.is_text(t)).collect();
            let expected = expand_audio(vocab, &text, r, 0.0, &mut substream(0, 0))?;
            let got = w[1].tokens.iter().copied().filter(|&t| t != vocab.eoa).collect();
            out.push((expected, got));
        }
    }
    Ok(out)
}

/// Decodes every record's prompt and scores the output against the record
/// and against the codebook.
pub fn evaluate(
    scorer: &dyn Scorer,
    records: &[InterleavedSequence],
    spec: &TaskSpec,
    cfg: &DecodeConfig,
) -> Result<EvalReport> {
    let vocab = scorer.vocab().clone();
    let decoder = Decoder::new(scorer, cfg.clone())?;
    let r = spec.expansion_rate;
    let mut rep = EvalReport {
        records: records.len(),
        ..EvalReport::default()
    };
    for (index, rec) in records.iter().enumerate() {
        let generation = match decoder.generate(&rec.prompt, rec.direction) {
            Ok(g) => g,
            Err(e) => {
                rep.failures.push(RecordFailure {
                    index,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let seq = &generation.sequence;
        if generation.trace.truncated() {
            rep.truncated += 1;
        }
        if !validate_sequence(seq, &vocab, Some(scorer.max_len())).is_valid() {
            rep.invalid += 1;
        }

        let reference = rec.response_text(&vocab);
        let got = seq.response_text(&vocab);
        let t = rep.text.entry(rec.direction.as_str().to_string()).or_default();
        t.records += 1;
        t.distance += strsim::generic_levenshtein(&reference, &got);
        t.ref_len += reference.len();

        let pairs = audio_pairs(seq, &vocab, r)?;
        for (expected, got) in &pairs {
            rep.audio_total += expected.len();
            rep.audio_correct += expected.iter().zip(got).filter(|(a, b)| a == b).count();
            *rep.span_len_hist.entry(got.len()).or_default() += 1;
        }
        match pairs.last() {
            Some((expected, got)) => {
                let err = got.len() as i64 - expected.len() as i64;
                *rep.eoa_error_hist.entry(err).or_default() += 1;
                if err == 0 {
                    rep.eoa_exact += 1;
                }
            }
            None => rep.missing_final_span += 1,
        }
    }
    for t in rep.text.values_mut() {
        t.rate = ratio(t.distance, t.ref_len);
    }
    rep.audio_accuracy = ratio(rep.audio_correct, rep.audio_total);
    rep.eoa_accuracy = ratio(rep.eoa_exact, rep.generated());
    Ok(rep)
}
