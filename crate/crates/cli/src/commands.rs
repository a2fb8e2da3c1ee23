use std::fs;
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use interlace::attention::{build_modality_mask, SequenceLayout};
use interlace::corpus::{
    build_vocabulary, generate_record, read_corpus, read_jsonl, write_corpus, write_jsonl, Direction,
    InterleavedSequence, TaskSpec, TokenId, Vocabulary,
};
use interlace::corruption::CorruptionConfig;
use interlace::decoder::{DecodeConfig, Decoder, Scorer, ScorerContext, ScorerRegistry};
use interlace::model::{load_checkpoint, ModelConfig, Precision, Transformer};
use interlace::rng::mix;
use interlace::trainer::{self, RunOptions, TrainConfig};
use interlace::verify::{evaluate, run_sweep, BoundReport, EquivalenceReport, EvalReport, ModelSource, SweepOptions};

use crate::fail::{Failure, CONFIG, INTERRUPTED, VERIFICATION};
use crate::settings::Settings;

type Res<T> = Result<T, Failure>;

fn write(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn task_spec(s: &Settings) -> Res<(TaskSpec, Vocabulary)> {
    let vocab = build_vocabulary(s.get("n_text")?, s.get("n_audio")?)?;
    let direction = Direction::parse(s.str("direction")).ok_or_else(|| {
        Failure::new(CONFIG, format!("invalid value '{}' for key 'direction'", s.str("direction")))
    })?;
    let text_alphabet = match s.str("text_alphabet") {
        "auto" => None,
        _ => Some(s.get("text_alphabet")?),
    };
    let spec = TaskSpec {
        direction,
        expansion_rate: s.get("expansion_rate")?,
        text_chunk: s.get("text_chunk")?,
        noise_prob: s.get("noise_prob")?,
        min_text_len: s.get("min_text_len")?,
        max_text_len: s.get("max_text_len")?,
        text_alphabet,
    };
    spec.check(&vocab)?;
    Ok((spec, vocab))
}

fn split_counts(count: usize, split: &str) -> Res<[usize; 3]> {
    let bad = || Failure::new(CONFIG, format!("invalid value '{split}' for key 'split': expected a/b/c summing to 100"));
    let parts: Vec<usize> = split
        .split('/')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Res<_>>()?;
    if parts.len() != 3 || parts.iter().sum::<usize>() != 100 {
        return Err(bad());
    }
    let train = count * parts[0] / 100;
    let val = count * parts[1] / 100;
    Ok([train, val, count - train - val])
}

pub fn gen_corpus(s: &Settings) -> Res<()> {
    let (spec, vocab) = task_spec(s)?;
    let seed: u64 = s.get("seed")?;
    let count: usize = s.get("count")?;
    let counts = split_counts(count, s.str("split"))?;
    let out = s.out_dir();
    s.write_echo()?;

    // records are ranked by a hash of their index; the ranks pick the split
    let mut order: Vec<u64> = (0..count as u64).collect();
    order.sort_by_key(|&i| (mix(&[seed, i, 0x7370_6c69_74]), i));
    let mut bounds = [0usize; 4];
    for k in 0..3 {
        bounds[k + 1] = bounds[k] + counts[k];
    }
    for (k, name) in ["train", "val", "test"].iter().enumerate() {
        let mut idx = order[bounds[k]..bounds[k + 1]].to_vec();
        idx.sort_unstable();
        let records: Vec<InterleavedSequence> = idx
            .iter()
            .map(|&i| generate_record(&spec, &vocab, seed, i))
            .collect::<Result<_, _>>()?;
        write_corpus(&out.join(format!("{name}.jsonl")), &records)?;
        println!("{name}: {} records", records.len());
    }
    vocab.save(&out.join("vocab.json"))?;
    Ok(())
}

fn train_config(s: &Settings) -> Res<TrainConfig> {
    let strategies = s
        .str("strategies")
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(String::from)
        .collect();
    let cfg = TrainConfig {
        peak_lr: s.get("peak_lr")?,
        weight_decay: s.get("weight_decay")?,
        warmup_ratio: s.get("warmup_ratio")?,
        total_steps: s.get("total_steps")?,
        batch_size: s.get("batch_size")?,
        seed: s.get("seed")?,
        corruption: CorruptionConfig {
            p_mix: s.get("p_mix")?,
            p_prefix: s.get("p_prefix")?,
            p_trunc: s.get("p_trunc")?,
            lambda_min: s.get("lambda_min")?,
        },
        strategies,
        checkpoint_every: s.get("checkpoint_every")?,
        normalize: s.flag("normalize")?,
        ar_weight: s.get("ar_weight")?,
        nar_weight: s.get("nar_weight")?,
        grad_clip: s.get("grad_clip")?,
        beta1: s.get("beta1")?,
        beta2: s.get("beta2")?,
        adam_eps: s.get("adam_eps")?,
    };
    cfg.check()?;
    Ok(cfg)
}

pub fn train(s: &Settings, stop: Arc<AtomicBool>) -> Res<()> {
    let cfg = train_config(s)?;
    let dir = s.path("corpus");
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    let corpus = read_corpus(&dir.join("train.jsonl"))?;
    let longest = corpus.iter().map(|r| r.len()).max().unwrap_or(1);
    let max_len = match s.str("max_len") {
        "auto" => longest,
        _ => s.get("max_len")?,
    };
    let model_cfg = ModelConfig {
        vocab_size: vocab.size(),
        d_model: s.get("d_model")?,
        n_layers: s.get("n_layers")?,
        n_heads: s.get("n_heads")?,
        d_ff: s.get("d_ff")?,
        max_len,
        rope_base: s.get("rope_base")?,
        norm_eps: 1e-6,
        precision: Precision::F32,
    };
    model_cfg.check()?;
    let out = s.out_dir();
    s.write_echo()?;
    let opts = RunOptions {
        resume: s.flag("resume")?,
        stop: Some(stop),
    };
    match trainer::run(&cfg, &model_cfg, &vocab, corpus, &out, &opts) {
        Ok(summary) => {
            println!("step {} checkpoint {}", summary.final_step, summary.checkpoint.display());
            if summary.interrupted {
                return Err(Failure::new(INTERRUPTED, format!("interrupted at step {}", summary.final_step)));
            }
            Ok(())
        }
        Err(e @ interlace::Error::Numeric(_)) => {
            let tail: Vec<String> = fs::read_to_string(out.join("metrics.csv"))
                .unwrap_or_default()
                .lines()
                .rev()
                .take(5)
                .map(String::from)
                .collect();
            let dump = serde_json::json!({
                "error": e.to_string(),
                "latest_checkpoint": trainer::latest_checkpoint(&out).ok().flatten(),
                "metrics_tail": tail.into_iter().rev().collect::<Vec<_>>(),
            });
            write(&out.join("diagnostic.json"), &serde_json::to_string_pretty(&dump)?)?;
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn decode_config(s: &Settings) -> Res<DecodeConfig> {
    let cfg = DecodeConfig {
        steps: s.get("diffusion_steps")?,
        block: s.get("block")?,
        l_max: s.get("l_max")?,
        tau: s.get("tau")?,
        gamma: s.get("gamma")?,
        remask: s.str("remask").to_string(),
        ar_top_k: s.get("ar_top_k")?,
        ar_top_p: s.get("ar_top_p")?,
        ar_temperature: s.get("ar_temperature")?,
        ar_max_tokens: s.get("ar_max_tokens")?,
        seed: s.get("seed")?,
        cfg_keep_prompt: s.flag("cfg_keep_prompt")?,
        conditional_only: s.flag("conditional_only")?,
    };
    cfg.check()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Res<(Transformer<f32>, Vocabulary)> {
    let ck = load_checkpoint(path)?;
    let vocab = ck
        .vocab
        .ok_or_else(|| interlace::Error::Checkpoint(format!("{} carries no vocabulary", path.display())))?;
    Ok((Transformer::from_params(ck.config, ck.params)?, vocab))
}

fn build_scorer(s: &Settings) -> Res<(Box<dyn Scorer>, TaskSpec)> {
    let (spec, mut vocab) = task_spec(s)?;
    let name = s.str("scorer");
    let model = if name == "transformer" {
        if s.str("checkpoint").is_empty() {
            return Err(Failure::new(CONFIG, "key 'checkpoint' is required by the transformer scorer"));
        }
        let (m, v) = load_model(&s.path("checkpoint"))?;
        vocab = v;
        Some(m)
    } else {
        None
    };
    let ctx = ScorerContext {
        vocab,
        spec: spec.clone(),
        model,
        seed: s.get("seed")?,
    };
    Ok((ScorerRegistry::default().build(name, ctx)?, spec))
}

#[derive(Deserialize)]
struct PromptRecord {
    prompt: Vec<TokenId>,
    direction: Direction,
}

#[derive(Serialize)]
struct Output {
    index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    sequence: Option<InterleavedSequence>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn generate(s: &Settings) -> Res<()> {
    let cfg = decode_config(s)?;
    let (scorer, _) = build_scorer(s)?;
    let prompts: Vec<PromptRecord> = read_jsonl(&s.path("prompts"))?;
    let out = s.out_dir();
    s.write_echo()?;
    let traces = out.join("traces");
    fs::create_dir_all(&traces).map_err(|e| Failure::io(&traces, e))?;
    let decoder = Decoder::new(scorer.as_ref(), cfg)?;
    let mut outputs = Vec::with_capacity(prompts.len());
    for (index, p) in prompts.iter().enumerate() {
        match decoder.generate(&p.prompt, p.direction) {
            Ok(g) => {
                g.trace.write_jsonl(&traces.join(format!("{index:06}.jsonl")))?;
                outputs.push(Output {
                    index,
                    sequence: Some(g.sequence),
                    error: None,
                });
            }
            Err(e) => outputs.push(Output {
                index,
                sequence: None,
                error: Some(e.to_string()),
            }),
        }
    }
    write_jsonl(&out.join("generations.jsonl"), &outputs)?;
    let failed = outputs.iter().filter(|o| o.error.is_some()).count();
    println!("{} generations, {failed} errors", outputs.len());
    Ok(())
}

pub fn eval(s: &Settings) -> Res<()> {
    let cfg = decode_config(s)?;
    let (scorer, spec) = build_scorer(s)?;
    let records = read_corpus(&s.path("split"))?;
    let out = s.out_dir();
    s.write_echo()?;
    let report = evaluate(scorer.as_ref(), &records, &spec, &cfg)?;
    write(&out.join("eval.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write(&out.join("eval.csv"), &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    println!("{}\n{}", EvalReport::CSV_HEADER, report.csv_row());
    Ok(())
}

pub fn verify(s: &Settings) -> Res<()> {
    let flip = match s.str("fault") {
        "none" => false,
        "dce_sign_flip" => true,
        other => return Err(Failure::new(CONFIG, format!("invalid value '{other}' for key 'fault'"))),
    };
    let opts = SweepOptions {
        cases: s.get("cases")?,
        max_span: s.get("max_span")?,
        models: s.get("models")?,
        n_samples: s.get("n_samples")?,
        grad_coords: s.get("grad_coords")?,
        seed: s.get("seed")?,
        flip_dce_sign: flip,
        ..SweepOptions::default()
    };
    let random = s.flag("random_model")?;
    let checkpoint = s.str("checkpoint");
    let out = s.out_dir();
    let report = match (random, checkpoint.is_empty()) {
        (true, true) => {
            let vocab = build_vocabulary(s.get("n_text")?, s.get("n_audio")?)?;
            s.write_echo()?;
            run_sweep(&vocab, ModelSource::Random, &opts)?
        }
        (false, false) => {
            let (model, vocab) = load_model(&s.path("checkpoint"))?;
            s.write_echo()?;
            let wide: Transformer<f64> = model.cast();
            run_sweep(&vocab, ModelSource::Fixed(&wide), &opts)?
        }
        _ => {
            return Err(Failure::new(
                CONFIG,
                "give exactly one of 'checkpoint' and 'random_model=true'",
            ))
        }
    };

    let mut bound = String::from(BoundReport::CSV_HEADER);
    bound.push('\n');
    for r in &report.bound {
        bound.push_str(&r.csv_row());
        bound.push('\n');
    }
    write(&out.join("bound.csv"), &bound)?;
    let mut eq = String::from(EquivalenceReport::CSV_HEADER);
    eq.push('\n');
    for r in report.equivalence.iter().chain(std::iter::once(&report.uniform)) {
        eq.push_str(&r.csv_row());
        eq.push('\n');
    }
    write(&out.join("equivalence.csv"), &eq)?;
    write(&out.join("verify.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;

    let line = |name: &str, ok: bool, detail: String| println!("{name}: {} ({detail})", if ok { "ok" } else { "FAILED" });
    line(
        "bound",
        report.bound_ok(),
        format!("{} cases, min slack {:e}, {} unit-span cases", report.bound.len(), report.min_slack, report.unit_cases),
    );
    let worst = report
        .equivalence
        .iter()
        .chain(std::iter::once(&report.uniform))
        .map(|r| r.z().abs())
        .fold(0.0, f64::max);
    line("equivalence", report.equivalence_ok(), format!("max |z| {worst:.3}"));
    line(
        "gradient",
        report.grad_ok(),
        format!("max relative error {:e} over {} coordinates", report.grad.max_rel_error, report.grad.n_coordinates),
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::new(VERIFICATION, "verification failed"))
    }
}

pub fn mask_dump(s: &Settings) -> Res<()> {
    let layout = SequenceLayout::parse(s.str("layout"))
        .map_err(|e| Failure::new(CONFIG, format!("invalid value for key 'layout': {e}")))?;
    let out = s.out_dir();
    s.write_echo()?;
    let mask = build_modality_mask(&layout);
    write(&out.join("mask.csv"), &mask.to_csv())?;
    write(&out.join("mask.pgm"), &mask.to_pgm())?;
    print!("{}", mask.to_csv());
    Ok(())
}
