//! Trains a small model on the echo task and reports held-out metrics.
//!
//! cargo run --release --example toy -- [key=value ...]

use std::collections::BTreeMap;
use std::time::Instant;

use interlace::corpus::{build_vocabulary, generate_record, Direction, TaskSpec};
use interlace::decoder::{DecodeConfig, TransformerScorer};
use interlace::model::{load_checkpoint, save_checkpoint, ModelConfig, Precision, Transformer};
use interlace::trainer::{TrainConfig, Trainer};
use interlace::verify::evaluate;

fn main() -> interlace::Result<()> {
    let args: BTreeMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: &str| args.get(k).cloned().unwrap_or_else(|| d.to_string());
    let num = |k: &str, d: &str| get(k, d).parse::<f64>().expect(k);

    let vocab = build_vocabulary(32, 64)?;
    let spec = TaskSpec {
        direction: Direction::parse(&get("direction", "tts")).expect("direction"),
        ..TaskSpec::default()
    };
    let n_train = num("train", "8000") as u64;
    let n_eval = num("eval", "200") as u64;
    let train: Vec<_> = (0..n_train).map(|i| generate_record(&spec, &vocab, 1, i)).collect::<Result<_, _>>()?;
    let held: Vec<_> = (0..n_eval).map(|i| generate_record(&spec, &vocab, 2, i)).collect::<Result<_, _>>()?;

    let d = num("d", "64") as usize;
    let model_cfg = ModelConfig {
        vocab_size: vocab.size(),
        d_model: d,
        n_layers: num("layers", "2") as usize,
        n_heads: num("heads", "4") as usize,
        d_ff: 4 * d,
        max_len: spec.max_sequence_len(),
        rope_base: 10_000.0,
        norm_eps: 1e-6,
        precision: Precision::F32,
    };
    let strategies: Vec<String> = get("strategies", "sst_open,ppm,banom")
        .split(',')
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let cfg = TrainConfig {
        total_steps: num("steps", "1000") as u64,
        batch_size: num("batch", "32") as usize,
        peak_lr: num("lr", "3e-3"),
        warmup_ratio: num("warmup", "0.05"),
        seed: num("seed", "0") as u64,
        strategies,
        normalize: get("normalize", "false") == "true",
        grad_clip: num("clip", "1.0"),
        ..TrainConfig::default()
    };
    println!("params {}", model_cfg.num_parameters());
    let mut trainer = Trainer::new(cfg.clone(), model_cfg, vocab.clone(), train)?;
    let steps = if args.contains_key("load") { 0 } else { cfg.total_steps };
    let t0 = Instant::now();
    let every = num("log", "100") as u64;
    let (mut ar, mut nar, mut k) = (0.0, 0.0, 0.0);
    for _ in 0..steps {
        let m = trainer.step()?;
        ar += m.l_ar;
        nar += m.l_nar;
        k += 1.0;
        if m.step % every == 0 {
            println!("step {} l_ar {:.4} l_nar {:.4} lr {:.2e} {:.0}s", m.step, ar / k, nar / k, m.lr, t0.elapsed().as_secs_f64());
            (ar, nar, k) = (0.0, 0.0, 0.0);
        }
    }
    if let Some(p) = args.get("save") {
        save_checkpoint(std::path::Path::new(p), &trainer.checkpoint())?;
    }
    let model = match args.get("load") {
        Some(p) => {
            let ck = load_checkpoint(std::path::Path::new(p))?;
            Transformer::from_params(ck.config, ck.params)?
        }
        None => trainer.into_state().model,
    };
    let scorer = TransformerScorer::new(model, vocab)?;
    for block in get("blocks", "17,32").split(',') {
        let block: usize = block.parse().unwrap();
        let dcfg = DecodeConfig {
            block,
            steps: num("T", "200") as usize,
            l_max: block * 4,
            gamma: num("gamma", "0.1"),
            ..DecodeConfig::default()
        };
        let t1 = Instant::now();
        let rep = evaluate(&scorer, &held, &spec, &dcfg)?;
        if args.contains_key("show") {
            let dec = interlace::decoder::Decoder::new(&scorer, dcfg.clone())?;
            for rec in held.iter().take(num("show", "0") as usize) {
                let g = dec.generate(&rec.prompt, rec.direction)?;
                println!("ref {:?}\ngen {:?}", rec.spans, g.sequence.spans);
            }
        }
        println!(
            "B={block} text_err {:.4} audio_acc {:.4} eoa_acc {:.4} invalid {} hist {:?} ({:.0}s)",
            rep.text_error_rate(),
            rep.audio_accuracy,
            rep.eoa_accuracy,
            rep.invalid,
            rep.eoa_error_hist,
            t1.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
