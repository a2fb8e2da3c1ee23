use std::fmt::Write as _;
use std::path::Path;

use super::layout::{Region, SequenceLayout};
use crate::error::{Error, Result};

/// Dense `L x L` allow-matrix, row = query, column = key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = vec![false; len * len];
        for q in 0..len {
            for k in 0..len {
                allow[q * len + k] = f(q, k);
            }
        }
        AttentionMask { len, allow }
    }

    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, |q, k| k <= q)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.len + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.len..(q + 1) * self.len]
    }

    pub fn allowed_keys(&self, q: usize) -> Vec<usize> {
        (0..self.len).filter(|&k| self.allowed(q, k)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len * self.len * 2);
        for q in 0..self.len {
            if q > 0 {
                out.push('\n');
            }
            for k in 0..self.len {
                if k > 0 {
                    out.push(',');
                }
                out.push(if self.allowed(q, k) { '1' } else { '0' });
            }
        }
        out
    }

    /// Plain (P2) graymap, allowed cells white.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.len, self.len);
        for q in 0..self.len {
            let row: Vec<&str> = (0..self.len)
                .map(|k| if self.allowed(q, k) { "255" } else { "0" })
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }
}

/// Modality-aware mask: causal prompt, causal text that sees every earlier
/// span, bidirectional audio within its own span. Padding sees only itself.
pub fn build_modality_mask(layout: &SequenceLayout) -> AttentionMask {
    let regions = layout.regions();
    AttentionMask::from_fn(layout.len(), |q, k| {
        if q == k {
            return true;
        }
        match (regions[q], regions[k]) {
            (Region::Pad, _) | (_, Region::Pad) => false,
            (Region::Prompt, Region::Prompt) => k < q,
            (Region::Prompt, _) => false,
            (_, Region::Prompt) => true,
            (Region::Text(sq), kr) => {
                let sk = kr.span().unwrap_or(usize::MAX);
                sk < sq || (sk == sq && k < q)
            }
            (Region::Audio(sq), kr) => kr.span().is_some_and(|sk| sk <= sq),
        }
    })
}

/// Writes the CSV to `path` and the graymap next to it with a `.pgm`
/// extension.
pub fn dump_mask(mask: &AttentionMask, path: &Path) -> Result<()> {
    std::fs::write(path, mask.to_csv()).map_err(|e| Error::io(path, e))?;
    let pgm = path.with_extension("pgm");
    std::fs::write(&pgm, mask.to_pgm()).map_err(|e| Error::io(&pgm, e))
}
