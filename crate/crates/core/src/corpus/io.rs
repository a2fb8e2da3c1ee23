use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::sequence::InterleavedSequence;
use crate::error::{Error, Result};

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSONL file. Blank lines are skipped; a malformed line fails with
/// its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<InterleavedSequence>> {
    read_jsonl(path)
}

pub fn write_corpus(path: &Path, records: &[InterleavedSequence]) -> Result<()> {
    write_jsonl(path, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::task::{generate_corpus, TaskSpec};
    use crate::corpus::vocab::build_vocabulary;

    #[test]
    fn round_trip_100_records() {
        let vocab = build_vocabulary(32, 64).unwrap();
        let spec = TaskSpec {
            noise_prob: 0.1,
            ..TaskSpec::default()
        };
        let records: Vec<_> = generate_corpus(&spec, &vocab, 100, 9)
            .collect::<Result<_>>()
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&path, &records).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), records);
    }

    #[test]
    fn truncated_last_line_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"prompt\":[1],\"spans\":[],\"direction\":\"tts\"}\n{\"prompt\":[1,",
        )
        .unwrap();
        match read_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn schema_field_names() {
        let json = r#"{"prompt":[0],"spans":[{"kind":"text","tokens":[98]}],"direction":"asr"}"#;
        let rec: InterleavedSequence = serde_json::from_str(json).unwrap();
        assert_eq!(serde_json::to_string(&rec).unwrap(), json);
    }
}
