//! Mock scorers and contract checks shared by the decoder tests and the
//! acceptance run.

#![allow(dead_code)]

use std::cell::RefCell;

use rand::Rng as _;

use interlace::attention::SequenceLayout;
use interlace::corpus::{
    build_vocabulary, generate_record, validate_sequence, Direction, TaskSpec, TokenId, ViolationKind, Vocabulary,
};
use interlace::decoder::{
    replay, schedule, DecodeConfig, Decoder, Generation, OracleAudio, OracleScorer, Scorer, TraceRecord,
};
use interlace::linalg::Matrix;
use interlace::rng::{mix, substream};

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

/// Logits are a hash of the whole input and the row, so any change to the
/// context shows up downstream. Every call is recorded.
pub struct HashScorer {
    vocab: Vocabulary,
    seed: u64,
    pub calls: RefCell<Vec<Vec<TokenId>>>,
}

impl HashScorer {
    pub fn new(vocab: Vocabulary, seed: u64) -> Self {
        HashScorer {
            vocab,
            seed,
            calls: RefCell::new(Vec::new()),
        }
    }
}

impl Scorer for HashScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        96
    }

    fn score(&self, tokens: &[TokenId], _layout: &SequenceLayout) -> interlace::Result<Matrix<f64>> {
        self.calls.borrow_mut().push(tokens.to_vec());
        let v = self.vocab.size();
        let key: Vec<u64> = tokens.iter().map(|&t| t as u64).collect();
        let h = mix(&[self.seed, mix(&key)]);
        let mut data = Vec::with_capacity(tokens.len() * v);
        for q in 0..tokens.len() {
            let mut rng = substream(h, q as u64);
            for t in 0..v as u32 {
                let bias = if t == self.vocab.eoa || t == self.vocab.eos { 0.8 } else { 0.0 };
                data.push(rng.gen_range(-2.0..2.0) + bias);
            }
        }
        Ok(Matrix::from_vec(tokens.len(), v, data))
    }
}

pub fn random_config(seed: u64) -> DecodeConfig {
    let mut rng = substream(seed, 77);
    let block = rng.gen_range(1..=8);
    DecodeConfig {
        steps: rng.gen_range(1..=10),
        block,
        l_max: block * rng.gen_range(1..=4),
        tau: [0.0, 1.0][rng.gen_range(0..2)],
        gamma: [0.0, 0.5, 2.0][rng.gen_range(0..3)],
        remask: ["low_confidence", "random"][rng.gen_range(0..2)].into(),
        ar_top_k: rng.gen_range(1..=20),
        ar_top_p: [0.5, 0.95, 1.0][rng.gen_range(0..3)],
        ar_temperature: [0.5, 1.0][rng.gen_range(0..2)],
        ar_max_tokens: rng.gen_range(1..=12),
        seed,
        cfg_keep_prompt: rng.gen(),
        conditional_only: false,
    }
}

pub fn random_prompt(v: &Vocabulary, seed: u64) -> (Vec<TokenId>, Direction) {
    let mut rng = substream(seed, 78);
    let n = rng.gen_range(1..=8);
    if rng.gen_bool(0.5) {
        ((0..n).map(|_| v.text_start + rng.gen_range(0..v.n_text)).collect(), Direction::Tts)
    } else {
        ((0..n).map(|_| v.audio_id(rng.gen_range(0..v.n_audio))).collect(), Direction::Asr)
    }
}

/// Checks each block of the trace against the schedule, the commit-once
/// rule and first-`<EOA>` truncation.
pub fn check_blocks(g: &Generation, cfg: &DecodeConfig, v: &Vocabulary) -> Result<(), String> {
    let final_tokens = g.sequence.tokens();
    let mut steps: Vec<Vec<(usize, TokenId)>> = Vec::new();
    for r in &g.trace.records {
        match r {
            TraceRecord::Nar { step, commits, .. } => {
                ensure!(*step == steps.len(), "step {step} out of order");
                steps.push(commits.iter().map(|c| (c.position, c.token)).collect());
            }
            TraceRecord::BlockEnd { start, eoa_at, kept, .. } => {
                ensure!(steps.len() == cfg.steps, "{} steps in a block, expected {}", steps.len(), cfg.steps);
                let n: usize = steps.iter().map(Vec::len).sum();
                ensure!(n >= 1 && n <= cfg.block, "block of {n} positions");
                let counts: Vec<usize> = steps.iter().map(Vec::len).collect();
                ensure!(counts == schedule(n, cfg.steps), "commits {counts:?} do not follow the schedule");
                let mut block = vec![None; n];
                for &(p, t) in steps.iter().flatten() {
                    let off = p.checked_sub(*start).ok_or(format!("commit into context at {p}"))?;
                    ensure!(off < n, "commit outside the block at {p}");
                    ensure!(block[off].is_none(), "position {p} committed twice");
                    block[off] = Some(t);
                }
                let block: Vec<TokenId> = block.into_iter().collect::<Option<_>>().ok_or("uncommitted position")?;
                let first = block.iter().position(|&t| t == v.eoa);
                ensure!(*eoa_at == first, "first <EOA> at {first:?}, trace says {eoa_at:?}");
                ensure!(*kept == first.map_or(n, |e| e + 1), "kept {kept} positions");
                ensure!(
                    final_tokens[*start..*start + kept] == block[..*kept],
                    "committed tokens changed at {start}"
                );
                steps.clear();
            }
            _ => ensure!(steps.is_empty(), "block interrupted"),
        }
    }
    Ok(())
}

/// Every token a forward pass saw at an already decided position must match
/// the final output.
pub fn check_context(calls: &[Vec<TokenId>], final_tokens: &[TokenId], v: &Vocabulary) -> Result<(), String> {
    for call in calls {
        let m = call.iter().position(|&t| t == v.mask).unwrap_or(call.len());
        let soa = call[..m].iter().rposition(|&t| t == v.soa).unwrap_or(0);
        let limit = call[soa..m].iter().position(|&t| t == v.eoa).map_or(m, |e| soa + e + 1);
        ensure!(call[..limit] == final_tokens[..limit], "context changed within the first {limit} positions");
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct ContractSummary {
    pub generations: usize,
    pub eoa_truncations: usize,
    pub forced_eoa: usize,
    pub cfg_pairs: usize,
}

/// `n` generations from the hash scorer with random configurations, plus
/// `n` from the task oracle with noisy audio.
pub fn decoder_contracts(n: u64) -> Result<ContractSummary, String> {
    let mut sum = ContractSummary::default();
    let v = build_vocabulary(8, 16).unwrap();
    for seed in 0..n {
        let cfg = random_config(seed);
        let scorer = HashScorer::new(v.clone(), seed);
        let (p, dir) = random_prompt(&v, seed);
        let run = |s: &HashScorer, c: DecodeConfig| {
            Decoder::new(s, c)
                .and_then(|d| d.generate(&p, dir))
                .map_err(|e| format!("seed {seed}: {e}"))
        };
        let g = run(&scorer, cfg.clone())?;
        sum.generations += 1;
        ensure!(g.sequence.prompt == p, "seed {seed}: prompt modified");
        // span lengths are a property of the corpus, not of an arbitrary scorer
        let report = validate_sequence(&g.sequence, &v, Some(scorer.max_len()));
        let structural = report
            .violations
            .iter()
            .filter(|x| !matches!(x.kind, ViolationKind::FixedSpanLength { .. } | ViolationKind::FinalSpanTooLong { .. }))
            .count();
        ensure!(structural == 0, "seed {seed}: {report:?}");
        ensure!(
            replay(&p, dir, &g.trace, &v).map_err(|e| e.to_string())? == g.sequence,
            "seed {seed}: trace replay differs"
        );
        check_blocks(&g, &cfg, &v).map_err(|e| format!("seed {seed}: {e}"))?;
        check_context(&scorer.calls.borrow(), &g.sequence.tokens(), &v).map_err(|e| format!("seed {seed}: {e}"))?;
        for r in &g.trace.records {
            match r {
                TraceRecord::BlockEnd { eoa_at: Some(_), .. } => sum.eoa_truncations += 1,
                TraceRecord::ForcedEoa { .. } => sum.forced_eoa += 1,
                _ => {}
            }
        }

        let again = run(&HashScorer::new(v.clone(), seed), cfg.clone())?;
        ensure!(again.sequence == g.sequence && again.trace == g.trace, "seed {seed}: not deterministic");

        if cfg.gamma == 0.0 {
            let plain = DecodeConfig {
                conditional_only: true,
                gamma: 0.5,
                ..cfg.clone()
            };
            let c = run(&HashScorer::new(v.clone(), seed), plain)?;
            ensure!(c.sequence == g.sequence && c.trace == g.trace, "seed {seed}: gamma 0 differs from conditional-only");
            sum.cfg_pairs += 1;
        }
    }

    let v = build_vocabulary(32, 64).unwrap();
    for seed in 0..n {
        let direction = [Direction::Tts, Direction::Asr, Direction::Chat][(seed % 3) as usize];
        let spec = TaskSpec {
            direction,
            ..TaskSpec::default()
        };
        let rec = generate_record(&spec, &v, 5, seed).unwrap();
        let scorer = OracleScorer::new(spec.clone(), v.clone(), OracleAudio::Noisy { seed, scale: 3.0 });
        let block = [4, 8, 16, 17][(seed % 4) as usize];
        let cfg = DecodeConfig {
            steps: 1 + (seed % 9) as usize,
            block,
            l_max: block * 4,
            gamma: [0.0, 0.1][(seed % 2) as usize],
            seed,
            ..DecodeConfig::default()
        };
        let g = Decoder::new(&scorer, cfg.clone())
            .and_then(|d| d.generate(&rec.prompt, direction))
            .map_err(|e| format!("oracle seed {seed}: {e}"))?;
        sum.generations += 1;
        let report = validate_sequence(&g.sequence, &v, Some(spec.max_sequence_len()));
        ensure!(report.is_valid(), "oracle seed {seed}: {report:?}");
        check_blocks(&g, &cfg, &v).map_err(|e| format!("oracle seed {seed}: {e}"))?;
        ensure!(
            replay(&rec.prompt, direction, &g.trace, &v).map_err(|e| e.to_string())? == g.sequence,
            "oracle seed {seed}: trace replay differs"
        );
    }
    Ok(sum)
}
