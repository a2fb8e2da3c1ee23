use std::collections::BTreeMap;
use std::fmt;

use super::{apply_banom, apply_ppm, apply_sst, apply_sst_open, corrupt, CorruptedBatchItem, CorruptionConfig};
use crate::corpus::{InterleavedSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{mix, substream, Rng};

/// Where a strategy hooks into batch construction. Strategies run in stage
/// order: sequence transforms, then masking, then item transforms, then
/// batch transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Sequence,
    Item,
    Batch,
}

pub trait Strategy: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn stage(&self) -> Stage;

    /// Returns the transformed sequence and the truncation length, if any.
    fn apply_sequence(
        &self,
        seq: InterleavedSequence,
        _vocab: &Vocabulary,
        _rng: &mut Rng,
    ) -> (InterleavedSequence, Option<usize>) {
        (seq, None)
    }

    fn apply_item(
        &self,
        item: CorruptedBatchItem,
        _vocab: &Vocabulary,
        _rng: &mut Rng,
    ) -> CorruptedBatchItem {
        item
    }

    fn apply_batch(
        &self,
        items: Vec<CorruptedBatchItem>,
        _vocab: &Vocabulary,
        _rng: &mut Rng,
    ) -> Vec<CorruptedBatchItem> {
        items
    }
}

/// Batchwise mixing of clean, text-only items.
#[derive(Debug, Clone)]
pub struct Banom {
    pub p_mix: f64,
}

impl Strategy for Banom {
    fn name(&self) -> &'static str {
        "banom"
    }

    fn stage(&self) -> Stage {
        Stage::Batch
    }

    fn apply_batch(
        &self,
        items: Vec<CorruptedBatchItem>,
        vocab: &Vocabulary,
        rng: &mut Rng,
    ) -> Vec<CorruptedBatchItem> {
        apply_banom(items, self.p_mix, vocab, rng)
    }
}

/// Prefix preservation: earlier audio spans stay clean.
#[derive(Debug, Clone)]
pub struct Ppm {
    pub p_prefix: f64,
}

impl Strategy for Ppm {
    fn name(&self) -> &'static str {
        "ppm"
    }

    fn stage(&self) -> Stage {
        Stage::Item
    }

    fn apply_item(
        &self,
        item: CorruptedBatchItem,
        vocab: &Vocabulary,
        rng: &mut Rng,
    ) -> CorruptedBatchItem {
        apply_ppm(item, self.p_prefix, vocab, rng)
    }
}

/// Stochastic truncation of the final audio span.
#[derive(Debug, Clone)]
pub struct Sst {
    pub p_trunc: f64,
}

impl Strategy for Sst {
    fn name(&self) -> &'static str {
        "sst"
    }

    fn stage(&self) -> Stage {
        Stage::Sequence
    }

    fn apply_sequence(
        &self,
        seq: InterleavedSequence,
        vocab: &Vocabulary,
        rng: &mut Rng,
    ) -> (InterleavedSequence, Option<usize>) {
        apply_sst(&seq, vocab, self.p_trunc, rng)
    }
}

/// Truncation that leaves the final span without a terminator.
#[derive(Debug, Clone)]
pub struct SstOpen {
    pub p_trunc: f64,
}

impl Strategy for SstOpen {
    fn name(&self) -> &'static str {
        "sst_open"
    }

    fn stage(&self) -> Stage {
        Stage::Sequence
    }

    fn apply_sequence(
        &self,
        seq: InterleavedSequence,
        vocab: &Vocabulary,
        rng: &mut Rng,
    ) -> (InterleavedSequence, Option<usize>) {
        apply_sst_open(&seq, vocab, self.p_trunc, rng)
    }
}

pub type StrategyFactory = fn(&CorruptionConfig) -> Box<dyn Strategy>;

/// Name to constructor map used to select strategies from configuration.
#[derive(Clone)]
pub struct StrategyRegistry {
    entries: BTreeMap<&'static str, StrategyFactory>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = StrategyRegistry::empty();
        r.register("banom", |c| Box::new(Banom { p_mix: c.p_mix }));
        r.register("ppm", |c| Box::new(Ppm { p_prefix: c.p_prefix }));
        r.register("sst", |c| Box::new(Sst { p_trunc: c.p_trunc }));
        r.register("sst_open", |c| Box::new(SstOpen { p_trunc: c.p_trunc }));
        r
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        StrategyRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: StrategyFactory) {
        self.entries.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn build(&self, name: &str, cfg: &CorruptionConfig) -> Result<Box<dyn Strategy>> {
        let factory = self.entries.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown strategy '{name}' (known: {})",
                self.names().join(", ")
            ))
        })?;
        Ok(factory(cfg))
    }
}

const ITEM_TAG: u64 = 0x6974_656d;
const BATCH_TAG: u64 = 0x6261_7463;

/// Turns clean sequences into loss-ready items with the selected strategies.
#[derive(Debug)]
pub struct BatchBuilder {
    vocab: Vocabulary,
    cfg: CorruptionConfig,
    strategies: Vec<Box<dyn Strategy>>,
}

impl BatchBuilder {
    pub fn new(
        vocab: Vocabulary,
        cfg: CorruptionConfig,
        names: &[String],
        registry: &StrategyRegistry,
    ) -> Result<Self> {
        cfg.check()?;
        let mut strategies: Vec<Box<dyn Strategy>> = Vec::new();
        for name in names {
            if strategies.iter().any(|s| s.name() == name) {
                return Err(Error::Config(format!("strategy '{name}' listed twice")));
            }
            strategies.push(registry.build(name, &cfg)?);
        }
        strategies.sort_by_key(|s| s.stage());
        Ok(BatchBuilder {
            vocab,
            cfg,
            strategies,
        })
    }

    pub fn strategy_names(&self) -> Vec<&'static str> {
        self.strategies.iter().map(|s| s.name()).collect()
    }

    /// Item `index` of the batch at `step`; draws come from a stream
    /// addressed by `(seed, step, index)` only.
    pub fn build_item(
        &self,
        seq: &InterleavedSequence,
        seed: u64,
        step: u64,
        index: u64,
    ) -> CorruptedBatchItem {
        let mut rng = substream(seed, mix(&[ITEM_TAG, step, index]));
        let mut seq = seq.clone();
        let mut truncated = None;
        for s in self.strategies.iter().filter(|s| s.stage() == Stage::Sequence) {
            let (out, k) = s.apply_sequence(seq, &self.vocab, &mut rng);
            seq = out;
            truncated = truncated.or(k);
        }
        let mut item = corrupt(&seq, &self.vocab, &self.cfg, &mut rng);
        item.set_truncated(truncated);
        for s in self.strategies.iter().filter(|s| s.stage() == Stage::Item) {
            item = s.apply_item(item, &self.vocab, &mut rng);
        }
        item
    }

    pub fn build_batch(
        &self,
        seqs: &[&InterleavedSequence],
        seed: u64,
        step: u64,
    ) -> Vec<CorruptedBatchItem> {
        let mut items: Vec<_> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| self.build_item(s, seed, step, i as u64))
            .collect();
        let mut rng = substream(seed, mix(&[BATCH_TAG, step]));
        for s in self.strategies.iter().filter(|s| s.stage() == Stage::Batch) {
            items = s.apply_batch(items, &self.vocab, &mut rng);
        }
        items
    }
}
