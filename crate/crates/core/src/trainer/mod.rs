//! Deterministic mini-batch training: batch assembly through the strategy
//! pipeline, unified loss, clipping, AdamW and the warmup/cosine schedule.

mod optim;
mod schedule;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::{clip_global_norm, AdamW};
pub use schedule::{lr_at, warmup_steps};

use crate::attention::build_modality_mask;
use crate::corpus::{InterleavedSequence, Vocabulary};
use crate::corruption::{BatchBuilder, CorruptedBatchItem, CorruptionConfig, StrategyRegistry};
use crate::error::{Error, Result};
use crate::model::{
    load_checkpoint, save_checkpoint, Checkpoint, LossBreakdown, LossOptions, ModelConfig,
    Transformer, loss_gradient,
};
use crate::rng::{mix, substream};

pub const METRICS_HEADER: &str = "step,l_ar,l_nar,l_unified,lr,masked_frac";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub corruption: CorruptionConfig,
    pub strategies: Vec<String>,
    /// Checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub normalize: bool,
    pub ar_weight: f64,
    pub nar_weight: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-4,
            weight_decay: 1e-2,
            warmup_ratio: 0.01,
            total_steps: 2000,
            batch_size: 32,
            seed: 0,
            corruption: CorruptionConfig::default(),
            strategies: vec!["sst_open".into(), "ppm".into(), "banom".into()],
            checkpoint_every: 0,
            normalize: false,
            ar_weight: 1.0,
            nar_weight: 1.0,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return bad(format!("warmup_ratio must lie in (0, 1), got {}", self.warmup_ratio));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("peak_lr, weight_decay and grad_clip must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps >= 0.0) {
            return bad("beta1 and beta2 must lie in [0, 1), adam_eps >= 0".into());
        }
        self.corruption.check()
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            ar_weight: self.ar_weight,
            nar_weight: self.nar_weight,
            normalize: self.normalize,
            flip_dce_sign: false,
        }
    }
}

/// Hash of everything that determines the metric stream.
pub fn config_hash(train: &TrainConfig, model: &ModelConfig) -> String {
    let text = serde_json::to_string(&(train, model)).expect("configs serialise");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_ar: f64,
    pub l_nar: f64,
    pub l_unified: f64,
    pub lr: f64,
    pub masked_frac: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_ar, self.l_nar, self.l_unified, self.lr, self.masked_frac
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed updates.
    pub step: u64,
    pub model: Transformer<f32>,
    pub optim: AdamW,
}

impl TrainState {
    pub fn new(model: Transformer<f32>, cfg: &TrainConfig) -> Self {
        let n = model.params().len();
        TrainState {
            step: 0,
            model,
            optim: AdamW::new(n, cfg.beta1, cfg.beta2, cfg.adam_eps),
        }
    }
}

/// Fraction of audio positions that carry a mask token.
pub fn masked_fraction(batch: &[CorruptedBatchItem]) -> f64 {
    let audio: usize = batch.iter().map(|i| i.num_audio_positions()).sum();
    let masked: usize = batch.iter().map(|i| i.nar_positions.len()).sum();
    if audio == 0 {
        0.0
    } else {
        masked as f64 / audio as f64
    }
}

/// Summed losses and gradient of the objective over a batch.
pub fn batch_gradient(
    model: &Transformer<f32>,
    batch: &[CorruptedBatchItem],
    opts: &LossOptions,
    grads: &mut [f32],
) -> Result<LossBreakdown> {
    grads.fill(0.0);
    let mut total = LossBreakdown::default();
    for (i, item) in batch.iter().enumerate() {
        let mask = build_modality_mask(item.layout());
        let (logits, cache) = model.forward_train(&item.tokens, &mask)?;
        let (b, obj, dlogits) = loss_gradient(&logits, item, opts)?;
        if !obj.is_finite() || dlogits.data.iter().any(|g| !g.is_finite()) {
            let dump = serde_json::to_string(item).unwrap_or_default();
            return Err(Error::Numeric(format!(
                "non-finite loss {obj} on batch item {i}; item: {dump}"
            )));
        }
        model.backward(&cache, &dlogits, grads);
        total.add(&b);
    }
    Ok(total)
}

/// One optimisation step at the scheduled learning rate.
pub fn train_step(
    state: &mut TrainState,
    batch: &[CorruptedBatchItem],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let lr = lr_at(state.step + 1, cfg.peak_lr, cfg.warmup_ratio, cfg.total_steps)?;
    train_step_with_lr(state, batch, cfg, lr)
}

pub fn train_step_with_lr(
    state: &mut TrainState,
    batch: &[CorruptedBatchItem],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let mut grads = vec![0.0f32; state.model.params().len()];
    let loss = batch_gradient(&state.model, batch, &cfg.loss_options(), &mut grads)?;
    let norm = clip_global_norm(&mut grads, cfg.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient norm at step {}",
            state.step + 1
        )));
    }
    let t = state.step + 1;
    state
        .optim
        .update(state.model.params_mut(), &grads, lr, cfg.weight_decay, t);
    state.step = t;
    Ok(StepMetrics {
        step: t,
        l_ar: loss.l_ar,
        l_nar: loss.l_nar,
        l_unified: loss.l_unified,
        lr,
        masked_frac: masked_fraction(batch),
    })
}

/// Owns the corpus, the batch pipeline and the training state.
pub struct Trainer {
    cfg: TrainConfig,
    vocab: Vocabulary,
    corpus: Vec<InterleavedSequence>,
    builder: BatchBuilder,
    state: TrainState,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        model_cfg: ModelConfig,
        vocab: Vocabulary,
        corpus: Vec<InterleavedSequence>,
    ) -> Result<Self> {
        let model = Transformer::new(model_cfg, mix(&[cfg.seed, 0x6d6f_6465_6c]))?;
        let state = TrainState::new(model, &cfg);
        Self::with_state(cfg, vocab, corpus, state)
    }

    pub fn with_state(
        cfg: TrainConfig,
        vocab: Vocabulary,
        corpus: Vec<InterleavedSequence>,
        state: TrainState,
    ) -> Result<Self> {
        cfg.check()?;
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let model_cfg = state.model.config();
        if model_cfg.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match vocabulary size {}",
                model_cfg.vocab_size,
                vocab.size()
            )));
        }
        let longest = corpus.iter().map(|s| s.len()).max().unwrap_or(0);
        if longest > model_cfg.max_len {
            return Err(Error::Config(format!(
                "max_len {} is shorter than the longest training sequence ({longest})",
                model_cfg.max_len
            )));
        }
        let builder = BatchBuilder::new(
            vocab.clone(),
            cfg.corruption,
            &cfg.strategies,
            &StrategyRegistry::default(),
        )?;
        Ok(Trainer {
            cfg,
            vocab,
            corpus,
            builder,
            state,
            epoch_cache: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.corpus.len()).collect();
            order.shuffle(&mut substream(self.cfg.seed, mix(&[0x6570_6f63, epoch])));
            self.epoch_cache = Some((epoch, order));
        }
        &self.epoch_cache.as_ref().expect("cache filled").1
    }

    /// Corpus indices of the batch for update `step` (0-based). Samples are
    /// consumed in a fresh seeded permutation per epoch.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.corpus.len() as u64;
        let b = self.cfg.batch_size as u64;
        (0..b)
            .map(|i| {
                let c = step * b + i;
                self.epoch_order(c / n)[(c % n) as usize]
            })
            .collect()
    }

    pub fn batch(&mut self, step: u64) -> Vec<CorruptedBatchItem> {
        let idx = self.batch_indices(step);
        let seqs: Vec<&InterleavedSequence> = idx.iter().map(|&i| &self.corpus[i]).collect();
        self.builder.build_batch(&seqs, self.cfg.seed, step)
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.batch(self.state.step);
        train_step(&mut self.state, &batch, &self.cfg)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let model_cfg = self.state.model.config().clone();
        let hash = config_hash(&self.cfg, &model_cfg);
        let layout = self.state.model.layout();
        let mut extra = Vec::new();
        for (prefix, buf) in [("optim.m", &self.state.optim.m), ("optim.v", &self.state.optim.v)] {
            for e in layout.entries() {
                extra.push((format!("{prefix}.{}", e.name), e.shape.clone(), buf[e.range()].to_vec()));
            }
        }
        Checkpoint {
            config: model_cfg,
            vocab: Some(self.vocab.clone()),
            params: self.state.model.params().to_vec(),
            extra,
            train_state: Some(serde_json::json!({
                "step": self.state.step,
                "config_hash": hash,
                "train_config": self.cfg,
            })),
        }
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`],
    /// refusing if the configuration hash differs.
    pub fn resume(
        cfg: TrainConfig,
        model_cfg: ModelConfig,
        vocab: Vocabulary,
        corpus: Vec<InterleavedSequence>,
        ck: Checkpoint,
    ) -> Result<Self> {
        let ts = ck
            .train_state
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let saved = ts.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default();
        let want = config_hash(&cfg, &model_cfg);
        if saved != want || ck.config != model_cfg {
            return Err(Error::ResumeMismatch(format!(
                "configuration hash {want} differs from checkpoint ({saved})"
            )));
        }
        let step = ts
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("checkpoint step missing".into()))?;
        let model = Transformer::from_params(model_cfg, ck.params)?;
        let layout = model.layout().clone();
        let mut optim = AdamW::new(layout.total(), cfg.beta1, cfg.beta2, cfg.adam_eps);
        for (prefix, buf) in [("optim.m", &mut optim.m), ("optim.v", &mut optim.v)] {
            for e in layout.entries() {
                let name = format!("{prefix}.{}", e.name);
                let (_, _, data) = ck
                    .extra
                    .iter()
                    .find(|(n, _, _)| *n == name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if data.len() != e.len() {
                    return Err(Error::Checkpoint(format!("tensor {name} has the wrong size")));
                }
                buf[e.range()].copy_from_slice(data);
            }
        }
        let state = TrainState { step, model, optim };
        Self::with_state(cfg, vocab, corpus, state)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Set asynchronously (e.g. by a signal handler) to stop after the
    /// current step with a checkpoint flush.
    pub stop: Option<Arc<AtomicBool>>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_step: u64,
    pub interrupted: bool,
    pub checkpoint: PathBuf,
    pub last: Option<StepMetrics>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:07}.json"))
}

/// Highest-step checkpoint manifest under `out_dir/checkpoints`.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = out_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<PathBuf> = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if name.starts_with("step-") && name.ends_with(".json") && best.as_ref().is_none_or(|b| path > *b) {
            best = Some(path);
        }
    }
    Ok(best)
}

fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for line in text.lines().skip(1) {
        let s: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
        if s <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Full training run writing `metrics.csv` and checkpoints into `out_dir`.
pub fn run(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    vocab: &Vocabulary,
    corpus: Vec<InterleavedSequence>,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    fs::create_dir_all(out_dir.join("checkpoints")).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut trainer = match (opts.resume, latest_checkpoint(out_dir)?) {
        (true, Some(ck_path)) => {
            let ck = load_checkpoint(&ck_path)?;
            let t = Trainer::resume(cfg.clone(), model_cfg.clone(), vocab.clone(), corpus, ck)?;
            if metrics_path.exists() {
                truncate_metrics(&metrics_path, t.state().step)?;
            }
            t
        }
        (true, None) => {
            return Err(Error::ResumeMismatch(format!(
                "no checkpoint to resume from in {}",
                out_dir.display()
            )))
        }
        (false, _) => {
            let t = Trainer::new(cfg.clone(), model_cfg.clone(), vocab.clone(), corpus)?;
            let mut f = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
            t
        }
    };
    let mut metrics = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let mut last = None;
    let mut interrupted = false;
    let save = |t: &Trainer| -> Result<PathBuf> {
        let p = checkpoint_path(out_dir, t.state().step);
        save_checkpoint(&p, &t.checkpoint())?;
        Ok(p)
    };
    let mut last_saved = None;
    while trainer.state().step < cfg.total_steps {
        if opts.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst)) {
            interrupted = true;
            break;
        }
        let m = trainer.step()?;
        writeln!(metrics, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        last = Some(m);
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            last_saved = Some((m.step, save(&trainer)?));
        }
    }
    let checkpoint = match last_saved {
        Some((s, p)) if s == trainer.state().step => p,
        _ => save(&trainer)?,
    };
    Ok(RunSummary {
        final_step: trainer.state().step,
        interrupted,
        checkpoint,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, generate_corpus, TaskSpec};

    fn setup(steps: u64) -> (TrainConfig, ModelConfig, Vocabulary, Vec<InterleavedSequence>) {
        let v = build_vocabulary(8, 16).unwrap();
        let spec = TaskSpec {
            expansion_rate: 2,
            text_chunk: 2,
            min_text_len: 2,
            max_text_len: 4,
            ..TaskSpec::default()
        };
        let corpus: Vec<_> = generate_corpus(&spec, &v, 10, 1).collect::<Result<_>>().unwrap();
        let cfg = TrainConfig {
            total_steps: steps,
            batch_size: 4,
            peak_lr: 1e-2,
            warmup_ratio: 0.1,
            ..TrainConfig::default()
        };
        let mc = ModelConfig {
            precision: crate::model::Precision::F32,
            ..ModelConfig::tiny(v.size(), 32)
        };
        (cfg, mc, v, corpus)
    }

    #[test]
    fn identical_states_take_identical_steps() {
        let (cfg, mc, v, corpus) = setup(5);
        let mut a = Trainer::new(cfg.clone(), mc.clone(), v.clone(), corpus.clone()).unwrap();
        let mut b = Trainer::new(cfg, mc, v, corpus).unwrap();
        for _ in 0..3 {
            assert_eq!(a.step().unwrap(), b.step().unwrap());
        }
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn zero_lr_without_decay_leaves_params_unchanged() {
        let (mut cfg, mc, v, corpus) = setup(5);
        cfg.weight_decay = 0.0;
        let mut t = Trainer::new(cfg.clone(), mc, v, corpus).unwrap();
        let before = t.state().model.params().to_vec();
        let batch = t.batch(0);
        let mut state = t.state().clone();
        train_step_with_lr(&mut state, &batch, &cfg, 0.0).unwrap();
        assert_eq!(state.model.params(), &before[..]);
        t.step().unwrap();
    }

    #[test]
    fn empty_corpus_is_config_error() {
        let (cfg, mc, v, _) = setup(5);
        assert!(matches!(Trainer::new(cfg, mc, v, vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn epochs_cover_the_corpus() {
        let (cfg, mc, v, corpus) = setup(5);
        let mut t = Trainer::new(cfg, mc, v, corpus).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|s| t.batch_indices(s)).collect();
        seen.truncate(10);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn defaults_echo_strategy_probabilities() {
        let json = serde_json::to_value(TrainConfig::default()).unwrap();
        assert_eq!(json["corruption"]["p_mix"], 0.3);
        assert_eq!(json["corruption"]["p_prefix"], 0.3);
        assert_eq!(json["corruption"]["p_trunc"], 0.5);
        assert_eq!(json["weight_decay"], 0.01);
        assert_eq!(json["warmup_ratio"], 0.01);
    }
}
