//! Flat `key=value` configuration: built-in defaults, then an optional
//! config file, then the `SEED` / `OUT_DIR` environment variables, then
//! `--key value` flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::fail::{Failure, CONFIG};

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const COMMON: &[Key] = &[
    key("seed", "0", "root seed for every random draw"),
    key("out_dir", "out", "output directory"),
];

pub const TASK: &[Key] = &[
    key("direction", "tts", "tts, asr or chat"),
    key("n_text", "32", "text vocabulary size"),
    key("n_audio", "64", "audio codebook size"),
    key("expansion_rate", "4", "audio tokens per text token"),
    key("text_chunk", "4", "text tokens per chunk"),
    key("noise_prob", "0", "probability of replacing an audio token"),
    key("min_text_len", "5", "shortest transcript"),
    key("max_text_len", "8", "longest transcript"),
    key("text_alphabet", "auto", "distinct text ids drawn, or auto"),
];

pub const CORPUS: &[Key] = &[
    key("count", "1000", "number of records"),
    key("split", "80/10/10", "train/val/test percentages"),
];

pub const MODEL: &[Key] = &[
    key("d_model", "64", "embedding width"),
    key("n_layers", "2", "transformer blocks"),
    key("n_heads", "4", "attention heads"),
    key("d_ff", "256", "feed-forward width"),
    key("max_len", "auto", "positions; auto uses the longest record"),
    key("rope_base", "10000", "rotary base"),
];

pub const TRAIN: &[Key] = &[
    key("corpus", "corpus", "directory holding train.jsonl and vocab.json"),
    key("peak_lr", "3e-4", "peak learning rate"),
    key("weight_decay", "0.01", "decoupled weight decay"),
    key("warmup_ratio", "0.01", "fraction of steps spent warming up"),
    key("total_steps", "2000", "optimizer updates"),
    key("batch_size", "32", "sequences per update"),
    key("strategies", "sst_open,ppm,banom", "comma-separated training strategies"),
    key("checkpoint_every", "500", "checkpoint cadence; 0 keeps only the final one"),
    key("normalize", "false", "divide losses by supervised token count"),
    key("ar_weight", "1", "text loss weight"),
    key("nar_weight", "1", "audio loss weight"),
    key("grad_clip", "1", "global gradient norm limit"),
    key("beta1", "0.9", "first moment decay"),
    key("beta2", "0.999", "second moment decay"),
    key("adam_eps", "1e-8", "optimizer epsilon"),
    key("p_mix", "0.3", "probability a batch item is trained on text only"),
    key("p_prefix", "0.3", "probability of restoring a clean audio prefix"),
    key("p_trunc", "0.5", "probability of truncating the final audio span"),
    key("lambda_min", "0.01", "lower bound of the masking rate"),
    key("resume", "false", "continue from the latest checkpoint in out_dir"),
];

pub const DECODE: &[Key] = &[
    key("scorer", "transformer", "transformer, perfect or chance"),
    key("checkpoint", "", "checkpoint manifest (transformer scorer)"),
    key("diffusion_steps", "200", "denoising steps per block"),
    key("block", "32", "audio block length"),
    key("l_max", "640", "longest audio span before <EOA> is forced"),
    key("tau", "0", "Gumbel temperature for audio sampling"),
    key("gamma", "0.1", "guidance strength"),
    key("remask", "low_confidence", "low_confidence or random"),
    key("ar_top_k", "10", "text top-k"),
    key("ar_top_p", "0.95", "text nucleus mass"),
    key("ar_temperature", "1", "text temperature"),
    key("ar_max_tokens", "256", "text tokens per segment"),
    key("cfg_keep_prompt", "false", "keep the prompt in the unconditional pass"),
    key("conditional_only", "false", "skip the unconditional pass"),
];

pub const GENERATE: &[Key] = &[key("prompts", "prompts.jsonl", "JSONL with prompt and direction fields")];

pub const EVAL: &[Key] = &[key("split", "corpus/test.jsonl", "held-out records")];

pub const VERIFY: &[Key] = &[
    key("checkpoint", "", "checkpoint manifest to verify"),
    key("random_model", "false", "verify freshly initialised tiny models"),
    key("n_text", "32", "text vocabulary size for random models"),
    key("n_audio", "64", "audio codebook size for random models"),
    key("cases", "250", "bound sweep cases"),
    key("max_span", "5", "longest audio span, <EOA> included"),
    key("models", "20", "models in the estimator comparison"),
    key("n_samples", "100000", "Monte Carlo samples per estimate"),
    key("grad_coords", "200", "gradient coordinates checked"),
    key("fault", "none", "none or dce_sign_flip"),
];

pub const MASK: &[Key] = &[key("layout", "PPTTAA", "layout string such as PPTTAA or P,T,A|A")];

/// Keys accepted by each subcommand.
pub fn keys_for(command: &str) -> Vec<Key> {
    let groups: &[&[Key]] = match command {
        "gen-corpus" => &[COMMON, TASK, CORPUS],
        "train" => &[COMMON, MODEL, TRAIN],
        "generate" => &[COMMON, TASK, DECODE, GENERATE],
        "eval" => &[COMMON, TASK, DECODE, EVAL],
        "verify" => &[COMMON, VERIFY],
        "mask-dump" => &[COMMON, MASK],
        _ => &[],
    };
    let mut out: Vec<Key> = Vec::new();
    for k in groups.iter().flat_map(|g| g.iter()) {
        if !out.iter().any(|o| o.name == k.name) {
            out.push(*k);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(
        command: &str,
        file: Option<&Path>,
        env: &[(&str, Option<String>)],
        flags: &[(String, String)],
    ) -> Result<Self, Failure> {
        let keys = keys_for(command);
        let known = |k: &str| keys.iter().any(|x| x.name == k);
        let mut values: BTreeMap<String, String> =
            keys.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::new(CONFIG, format!("cannot read {}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Failure::new(CONFIG, format!("{}:{}: expected key=value", path.display(), n + 1))
                })?;
                let k = k.trim();
                if !known(k) {
                    return Err(Failure::new(
                        CONFIG,
                        format!("{}:{}: unknown key '{k}' for {command}", path.display(), n + 1),
                    ));
                }
                values.insert(k.to_string(), v.trim().to_string());
            }
        }
        for (k, v) in env {
            if let Some(v) = v {
                values.insert(k.to_string(), v.clone());
            }
        }
        for (k, v) in flags {
            if !known(k) {
                return Err(Failure::new(CONFIG, format!("unknown key '{k}' for {command}")));
            }
            values.insert(k.clone(), v.clone());
        }
        Ok(Settings { values })
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        let raw = self.str(key);
        raw.parse()
            .map_err(|e| Failure::new(CONFIG, format!("invalid value '{raw}' for key '{key}': {e}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, Failure> {
        match self.str(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Failure::new(
                CONFIG,
                format!("invalid value '{other}' for key '{key}': expected true or false"),
            )),
        }
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.str(key))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path("out_dir")
    }

    /// Resolved configuration in the same format it is read in.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write_echo(&self) -> Result<(), Failure> {
        let dir = self.out_dir();
        fs::create_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
        let path = dir.join("config.resolved");
        fs::write(&path, self.echo()).map_err(|e| Failure::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_sources_win() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.cfg");
        fs::write(&file, "# comment\nseed = 5\ncount=10\n").unwrap();
        let s = Settings::resolve(
            "gen-corpus",
            Some(&file),
            &[("seed", Some("6".into())), ("out_dir", None)],
            &[("count".into(), "20".into())],
        )
        .unwrap();
        assert_eq!(s.str("seed"), "6");
        assert_eq!(s.str("count"), "20");
        assert_eq!(s.str("out_dir"), "out");
    }

    #[test]
    fn unknown_file_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.cfg");
        fs::write(&file, "sed=5\n").unwrap();
        let e = Settings::resolve("gen-corpus", Some(&file), &[], &[]).unwrap_err();
        assert_eq!(e.code, CONFIG);
        assert!(e.message.contains("'sed'"));
    }

    #[test]
    fn echo_round_trips() {
        let s = Settings::resolve("mask-dump", None, &[], &[("layout".into(), "PTA".into())]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("echo");
        fs::write(&file, s.echo()).unwrap();
        let again = Settings::resolve("mask-dump", Some(&file), &[], &[]).unwrap();
        assert_eq!(again.echo(), s.echo());
    }

    #[test]
    fn bad_values_name_their_key() {
        let s = Settings::resolve("gen-corpus", None, &[], &[("expansion_rate".into(), "x".into())]).unwrap();
        let e = s.get::<u32>("expansion_rate").unwrap_err();
        assert!(e.message.contains("expansion_rate"));
        let s = Settings::resolve("train", None, &[], &[("resume".into(), "maybe".into())]).unwrap();
        assert!(s.flag("resume").is_err());
    }
}
