use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::bound::{estimate_ao_vs_dce, tiny_sequence, verify_unified_bound, BoundReport, EquivalenceReport};
use crate::corpus::Vocabulary;
use crate::corruption::corrupt_with_lambda;
use crate::decoder::TransformerScorer;
use crate::error::{Error, Result};
use crate::model::{grad_check, GradCheckReport, LossOptions, ModelConfig, Transformer};
use crate::rng::{mix, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub cases: usize,
    pub max_span: usize,
    pub models: usize,
    pub n_samples: usize,
    pub grad_coords: usize,
    pub seed: u64,
    /// Number of combined standard errors two estimates may differ by.
    pub z: f64,
    pub bound_tolerance: f64,
    pub grad_tolerance: f64,
    pub flip_dce_sign: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            cases: 250,
            max_span: 5,
            models: 20,
            n_samples: 100_000,
            grad_coords: 200,
            seed: 0,
            z: 3.0,
            bound_tolerance: 1e-9,
            grad_tolerance: 1e-4,
            flip_dce_sign: false,
        }
    }
}

impl SweepOptions {
    pub fn check(&self) -> Result<()> {
        if self.max_span == 0 || self.max_span > super::MAX_ENUM_SPAN {
            return Err(Error::Config(format!(
                "max_span must lie in 1..={}, got {}",
                super::MAX_ENUM_SPAN,
                self.max_span
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where the sweep's models come from.
pub enum ModelSource<'a> {
    /// A fresh `d_model = 16`, two-layer model per case.
    Random,
    Fixed(&'a Transformer<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub options: SweepOptions,
    pub bound: Vec<BoundReport>,
    pub min_slack: f64,
    /// Cases whose spans all have length one.
    pub unit_cases: usize,
    pub unit_slack_exact: bool,
    pub equivalence: Vec<EquivalenceReport>,
    pub uniform: EquivalenceReport,
    pub uniform_closed_form: f64,
    pub grad: GradCheckReport,
}

impl SweepReport {
    pub fn bound_ok(&self) -> bool {
        self.min_slack >= -self.options.bound_tolerance && self.unit_slack_exact
    }

    pub fn equivalence_ok(&self) -> bool {
        let z = self.options.z;
        let u = &self.uniform;
        let close = |x: f64| (x - self.uniform_closed_form).abs() <= z * u.combined_se() + 1e-9 * self.uniform_closed_form;
        self.equivalence.iter().all(|r| r.agrees(z)) && u.agrees(z) && close(u.ao.mean) && close(u.dce.mean)
    }

    pub fn grad_ok(&self) -> bool {
        self.grad.max_rel_error < self.options.grad_tolerance
    }

    pub fn passed(&self) -> bool {
        self.bound_ok() && self.equivalence_ok() && self.grad_ok()
    }
}

fn random_model(vocab: &Vocabulary, seed: u64) -> Result<Transformer<f64>> {
    Transformer::new(ModelConfig::tiny(vocab.size(), 64), seed)
}

fn scorer_for(source: &ModelSource, vocab: &Vocabulary, seed: u64) -> Result<TransformerScorer<f64>> {
    let model = match source {
        ModelSource::Random => random_model(vocab, seed)?,
        ModelSource::Fixed(m) => (*m).clone(),
    };
    TransformerScorer::new(model, vocab.clone())
}

/// Bound sweep, estimator agreement and gradient check in one pass.
pub fn run_sweep(vocab: &Vocabulary, source: ModelSource, opts: &SweepOptions) -> Result<SweepReport> {
    opts.check()?;
    let loss = LossOptions {
        flip_dce_sign: opts.flip_dce_sign,
        ..LossOptions::default()
    };

    let mut bound = Vec::with_capacity(opts.cases);
    let mut unit_cases = 0;
    let mut unit_slack_exact = true;
    for case in 0..opts.cases {
        let mut rng = substream(opts.seed, mix(&[0x626f_756e_64, case as u64]));
        let scorer = scorer_for(&source, vocab, rng.gen())?;
        let n_spans = rng.gen_range(1..=3);
        // every tenth case uses single-token spans only
        let unit = case % 10 == 0;
        let lens: Vec<usize> = (0..n_spans)
            .map(|_| if unit { 1 } else { rng.gen_range(1..=opts.max_span) })
            .collect();
        let seq = tiny_sequence(vocab, &lens, &mut rng);
        let rep = verify_unified_bound(&scorer, &seq)?;
        if lens.iter().all(|&l| l == 1) {
            unit_cases += 1;
            unit_slack_exact &= rep.slack == 0.0;
        }
        bound.push(rep);
    }
    let min_slack = bound.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);

    let mut equivalence = Vec::with_capacity(opts.models);
    for m in 0..opts.models {
        let mut rng = substream(opts.seed, mix(&[0x6571_7569_76, m as u64]));
        let scorer = scorer_for(&source, vocab, rng.gen())?;
        let len = rng.gen_range(2..=opts.max_span.max(2));
        let seq = tiny_sequence(vocab, &[len], &mut rng);
        equivalence.push(estimate_ao_vs_dce(&scorer, &seq, 0, opts.n_samples, &loss, &mut rng)?);
    }

    let mut rng = substream(opts.seed, 0x756e_6966);
    let uniform_len = opts.max_span.max(2);
    let zeros = TransformerScorer::new(Transformer::<f64>::zeros(ModelConfig::tiny(vocab.size(), 64))?, vocab.clone())?;
    let seq = tiny_sequence(vocab, &[uniform_len], &mut rng);
    let uniform = estimate_ao_vs_dce(&zeros, &seq, 0, opts.n_samples, &loss, &mut rng)?;
    let uniform_closed_form = uniform_len as f64 * (vocab.size() as f64).ln();

    let mut rng = substream(opts.seed, 0x6772_6164);
    let model = match source {
        ModelSource::Random => random_model(vocab, rng.gen())?,
        ModelSource::Fixed(m) => m.clone(),
    };
    let seq = tiny_sequence(vocab, &[3, opts.max_span], &mut rng);
    let item = corrupt_with_lambda(&seq, vocab, 0.5, &mut rng);
    let grad = grad_check(&model, &item, &loss, 1e-5, opts.grad_coords, rng.gen())?;

    Ok(SweepReport {
        options: opts.clone(),
        bound,
        min_slack,
        unit_cases,
        unit_slack_exact,
        equivalence,
        uniform,
        uniform_closed_form,
        grad,
    })
}
