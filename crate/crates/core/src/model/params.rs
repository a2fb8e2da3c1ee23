use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::linalg::Real;
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w1: usize,
    pub w2: usize,
}

/// Named views into the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) final_norm: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut entries = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            entries.push(ParamEntry {
                name,
                shape,
                offset,
            });
            offset
        };
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let tok_emb = add("tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos_emb = add("pos_emb".into(), vec![cfg.max_len, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerOffsets {
                attn_norm: add(format!("layers.{l}.attn_norm"), vec![d]),
                wq: add(format!("layers.{l}.wq"), vec![d, d]),
                wk: add(format!("layers.{l}.wk"), vec![d, d]),
                wv: add(format!("layers.{l}.wv"), vec![d, d]),
                wo: add(format!("layers.{l}.wo"), vec![d, d]),
                ffn_norm: add(format!("layers.{l}.ffn_norm"), vec![d]),
                w1: add(format!("layers.{l}.w1"), vec![d, f]),
                w2: add(format!("layers.{l}.w2"), vec![f, d]),
            })
            .collect();
        let final_norm = add("final_norm".into(), vec![d]);
        ParamLayout {
            entries,
            total,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Seeded initialisation. Embeddings use std `d^-1/2`, linear maps std
/// `fan_in^-1/2` with residual outputs further scaled by
/// `(2 n_layers)^-1/2`, norm gains start at one.
pub fn init_params<T: Real>(cfg: &ModelConfig, layout: &ParamLayout, seed: u64) -> Vec<T> {
    let mut data = vec![T::zero(); layout.total()];
    let mut rng = substream(seed, 0x696e_6974);
    let d = cfg.d_model as f64;
    let resid = 1.0 / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
    for e in layout.entries() {
        let base = e.name.rsplit('.').next().unwrap_or(&e.name);
        let std = match base {
            "tok_emb" | "pos_emb" => d.powf(-0.5),
            "attn_norm" | "ffn_norm" | "final_norm" => {
                data[e.range()].fill(T::one());
                continue;
            }
            "wo" | "w2" => (e.shape[0] as f64).powf(-0.5) * resid,
            _ => (e.shape[0] as f64).powf(-0.5),
        };
        for v in &mut data[e.range()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::lit(z * std);
        }
    }
    data
}
