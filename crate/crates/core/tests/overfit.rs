use interlace::corpus::{build_vocabulary, generate_record, TaskSpec};
use interlace::decoder::{DecodeConfig, Decoder, TransformerScorer};
use interlace::model::{load_checkpoint, save_checkpoint, ModelConfig, Precision, Transformer};
use interlace::trainer::{TrainConfig, Trainer};

#[test]
fn memorises_a_handful_of_records() {
    let v = build_vocabulary(8, 16).unwrap();
    let spec = TaskSpec {
        expansion_rate: 2,
        text_chunk: 2,
        min_text_len: 3,
        max_text_len: 3,
        ..TaskSpec::default()
    };
    let records: Vec<_> = (0..2).map(|i| generate_record(&spec, &v, 4, i).unwrap()).collect();
    let model_cfg = ModelConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        precision: Precision::F32,
        ..ModelConfig::tiny(v.size(), spec.max_sequence_len())
    };
    let cfg = TrainConfig {
        total_steps: 400,
        batch_size: 4,
        peak_lr: 1e-2,
        warmup_ratio: 0.05,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, model_cfg, v.clone(), records.clone()).unwrap();
    let losses: Vec<f64> = (0..400).map(|_| trainer.step().unwrap().l_ar).collect();
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[380..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.05 * head, "text loss {head} -> {tail}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &trainer.checkpoint()).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let model = Transformer::from_params(ck.config, ck.params).unwrap();
    assert_eq!(model.params(), trainer.state().model.params());

    let scorer = TransformerScorer::new(model, v.clone()).unwrap();
    let cfg = DecodeConfig {
        block: 5,
        l_max: 20,
        steps: 5,
        ar_top_k: 1,
        ..DecodeConfig::default()
    };
    let decoder = Decoder::new(&scorer, cfg).unwrap();
    for rec in &records {
        let g = decoder.generate(&rec.prompt, rec.direction).unwrap();
        assert_eq!(g.sequence.response_text(&v), rec.response_text(&v));
    }
}
