use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type TokenId = u32;

/// Number of special ids appended after the text and audio ranges.
pub const NUM_SPECIALS: u32 = 5;

/// Unified id space.
///
/// Layout (stable across runs): text ids `[0, n_text)`, audio ids
/// `[n_text, n_text + n_audio)`, then the specials in the order
/// `soa, eoa, eos, mask, pad`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_text: u32,
    pub n_audio: u32,
    pub text_start: TokenId,
    pub audio_start: TokenId,
    pub soa: TokenId,
    pub eoa: TokenId,
    pub eos: TokenId,
    pub mask: TokenId,
    pub pad: TokenId,
    pub total_size: u32,
}

pub fn build_vocabulary(n_text: u32, n_audio: u32) -> Result<Vocabulary> {
    if n_text < 2 {
        return Err(invalid!("n_text must be at least 2, got {n_text}"));
    }
    if n_audio < 2 {
        return Err(invalid!("n_audio must be at least 2, got {n_audio}"));
    }
    let audio_start = n_text;
    let special = n_text
        .checked_add(n_audio)
        .and_then(|s| s.checked_add(NUM_SPECIALS))
        .ok_or_else(|| invalid!("vocabulary size overflows u32"))?
        - NUM_SPECIALS;
    Ok(Vocabulary {
        n_text,
        n_audio,
        text_start: 0,
        audio_start,
        soa: special,
        eoa: special + 1,
        eos: special + 2,
        mask: special + 3,
        pad: special + 4,
        total_size: special + NUM_SPECIALS,
    })
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.total_size as usize
    }

    pub fn text_range(&self) -> Range<TokenId> {
        self.text_start..self.text_start + self.n_text
    }

    pub fn audio_range(&self) -> Range<TokenId> {
        self.audio_start..self.audio_start + self.n_audio
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        self.text_range().contains(&id)
    }

    pub fn is_audio(&self, id: TokenId) -> bool {
        self.audio_range().contains(&id)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id >= self.soa && id < self.total_size
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id < self.total_size
    }

    /// Audio id for a codebook offset in `[0, n_audio)`.
    pub fn audio_id(&self, offset: u32) -> TokenId {
        debug_assert!(offset < self.n_audio);
        self.audio_start + offset
    }

    pub fn audio_offset(&self, id: TokenId) -> Option<u32> {
        self.is_audio(id).then(|| id - self.audio_start)
    }

    pub fn text_index(&self, id: TokenId) -> Option<u32> {
        self.is_text(id).then(|| id - self.text_start)
    }

    pub fn token_name(&self, id: TokenId) -> String {
        match id {
            _ if self.is_text(id) => format!("t{}", id - self.text_start),
            _ if self.is_audio(id) => format!("a{}", id - self.audio_start),
            _ if id == self.soa => "<SOA>".into(),
            _ if id == self.eoa => "<EOA>".into(),
            _ if id == self.eos => "<EOS>".into(),
            _ if id == self.mask => "[M]".into(),
            _ if id == self.pad => "<PAD>".into(),
            _ => format!("?{id}"),
        }
    }

    /// Re-derives the layout from the counts and checks it matches.
    pub fn check(&self) -> Result<()> {
        let expected = build_vocabulary(self.n_text, self.n_audio)?;
        if *self != expected {
            return Err(invalid!("vocabulary header does not match the documented id layout"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: Vocabulary = serde_json::from_str(&text)?;
        vocab.check()?;
        Ok(vocab)
    }
}

/// Deterministic surrogate audio tokenizer: the `j`-th of `r` audio tokens
/// emitted for text id `t`.
pub fn echo_codebook(vocab: &Vocabulary, t: TokenId, j: u32, r: u32) -> Result<TokenId> {
    let ti = vocab
        .text_index(t)
        .ok_or_else(|| invalid!("echo_codebook: {t} is not a text id"))?;
    if r == 0 || j >= r {
        return Err(invalid!("echo_codebook: position {j} outside [0, {r})"));
    }
    let offset = (u64::from(ti) * u64::from(r) + u64::from(j)) % u64::from(vocab.n_audio);
    Ok(vocab.audio_id(offset as u32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_for_32_64() {
        let v = build_vocabulary(32, 64).unwrap();
        assert_eq!(v.total_size, 101);
        assert_eq!(v.text_range(), 0..32);
        assert_eq!(v.audio_range(), 32..96);
        assert_eq!((v.soa, v.eoa, v.eos, v.mask, v.pad), (96, 97, 98, 99, 100));
    }

    #[test]
    fn minimal_vocabulary_is_disjoint() {
        let v = build_vocabulary(2, 2).unwrap();
        assert_eq!(v.total_size, 9);
        let specials = [v.soa, v.eoa, v.eos, v.mask, v.pad];
        for id in 0..v.total_size {
            let classes = [v.is_text(id), v.is_audio(id), specials.contains(&id)];
            assert_eq!(classes.iter().filter(|&&c| c).count(), 1, "id {id}");
        }
    }

    #[test]
    fn rejects_small_counts() {
        assert!(matches!(build_vocabulary(1, 64), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_vocabulary(32, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn codebook_examples() {
        let v = build_vocabulary(32, 64).unwrap();
        let off = |t, j| echo_codebook(&v, t, j, 4).unwrap() - v.audio_start;
        assert_eq!(off(0, 0), 0);
        assert_eq!(off(1, 2), 6);
        assert_eq!(off(31, 3), 63);
        assert!(echo_codebook(&v, v.audio_start, 0, 4).is_err());
        assert!(echo_codebook(&v, 3, 4, 4).is_err());
    }

    #[test]
    fn header_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = build_vocabulary(32, 64).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }
}
