use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Chooses the confidence used to rank masked positions for commitment.
pub trait RemaskStrategy: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// `prob` is the model probability of the sampled token.
    fn confidence(&self, prob: f64, rng: &mut Rng) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct LowConfidence;

impl RemaskStrategy for LowConfidence {
    fn name(&self) -> &'static str {
        "low_confidence"
    }

    fn confidence(&self, prob: f64, _rng: &mut Rng) -> f64 {
        prob
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RandomRemask;

impl RemaskStrategy for RandomRemask {
    fn name(&self) -> &'static str {
        "random"
    }

    fn confidence(&self, _prob: f64, rng: &mut Rng) -> f64 {
        rng.gen::<f64>()
    }
}

pub type RemaskFactory = fn() -> Box<dyn RemaskStrategy>;

#[derive(Clone)]
pub struct RemaskRegistry {
    entries: BTreeMap<&'static str, RemaskFactory>,
}

impl Default for RemaskRegistry {
    fn default() -> Self {
        let mut r = RemaskRegistry {
            entries: BTreeMap::new(),
        };
        r.register("low_confidence", || Box::new(LowConfidence));
        r.register("random", || Box::new(RandomRemask));
        r
    }
}

impl RemaskRegistry {
    pub fn register(&mut self, name: &'static str, f: RemaskFactory) {
        self.entries.insert(name, f);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn build(&self, name: &str) -> Result<Box<dyn RemaskStrategy>> {
        self.entries.get(name).map(|f| f()).ok_or_else(|| {
            Error::Config(format!(
                "unknown remask strategy '{name}' (known: {})",
                self.names().join(", ")
            ))
        })
    }
}
