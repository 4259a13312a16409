//! Manifest files: a header line plus one checksummed JSON record per segment,
//! with features stored next to it in a tensor container (`<path>.features`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusConfig, DataError, Result, Segment, Sentiment, StreamManifest};
use crate::nn::Container;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    split: String,
    seed: u64,
    segments: usize,
    config: CorpusConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    stream: String,
    index: usize,
    topic: usize,
    transcript: Vec<String>,
    ner: Vec<(String, String)>,
    sentiment: Sentiment,
    ambiguous: Vec<bool>,
    frames_per_token: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    crc: u32,
    record: Record,
}

pub fn features_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".features");
    PathBuf::from(p)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn record_crc(r: &Record) -> u32 {
    crc32fast::hash(serde_json::to_string(r).expect("record serializes").as_bytes())
}

pub fn write_manifest(manifest: &StreamManifest, path: &Path) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        split: manifest.split.clone(),
        seed: manifest.config.seed,
        segments: manifest.segments.len(),
        config: manifest.config.clone(),
    };
    let mut out = Vec::new();
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes")).expect("vec write");
    let mut features = Container {
        metadata: serde_json::json!({ "split": manifest.split, "format_version": FORMAT_VERSION })
            .to_string(),
        ..Container::default()
    };
    for s in &manifest.segments {
        let record = Record {
            stream: s.stream.clone(),
            index: s.index,
            topic: s.topic,
            transcript: s.transcript.clone(),
            ner: s.ner.clone(),
            sentiment: s.sentiment,
            ambiguous: s.ambiguous.clone(),
            frames_per_token: s.frames_per_token.clone(),
        };
        let line = Line {
            crc: record_crc(&record),
            record,
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("line serializes")).expect("vec write");
        features.tensors.insert(s.key(), s.features.clone());
    }
    fs::write(path, out).map_err(io_err(path))?;
    let fpath = features_path(path);
    fs::write(&fpath, features.to_bytes()).map_err(io_err(&fpath))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<StreamManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let head = lines
        .next()
        .ok_or_else(|| DataError::Integrity("empty manifest".into()))?;
    // check the version before the full header so older layouts fail clearly
    let raw: serde_json::Value = serde_json::from_str(head)
        .map_err(|e| DataError::Integrity(format!("header: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| DataError::Integrity("header has no format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(DataError::Version {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| DataError::Integrity(format!("header: {e}")))?;
    if !text.ends_with('\n') {
        return Err(DataError::Integrity("manifest does not end with a newline (truncated?)".into()));
    }

    let fpath = features_path(path);
    let mut features = Container::load(&fpath)?;
    let mut segments = Vec::with_capacity(header.segments);
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let parsed: Line = serde_json::from_str(line)
            .map_err(|e| DataError::Integrity(format!("line {line_no}: {e}")))?;
        if record_crc(&parsed.record) != parsed.crc {
            return Err(DataError::Checksum { line: line_no });
        }
        let r = parsed.record;
        let key = super::segment_key(&r.stream, r.index);
        let feats = features
            .tensors
            .remove(&key)
            .ok_or_else(|| DataError::Integrity(format!("no features for segment {key}")))?;
        let frames: usize = r.frames_per_token.iter().sum();
        if feats.shape() != [frames, header.config.d_feat] {
            return Err(DataError::Integrity(format!(
                "features for {key} have shape {:?}, expected [{frames}, {}]",
                feats.shape(),
                header.config.d_feat
            )));
        }
        if r.ambiguous.len() != r.transcript.len() || r.frames_per_token.len() != r.transcript.len() {
            return Err(DataError::Integrity(format!("segment {key} has inconsistent lengths")));
        }
        segments.push(Segment {
            stream: r.stream,
            index: r.index,
            topic: r.topic,
            transcript: r.transcript,
            ner: r.ner,
            sentiment: r.sentiment,
            ambiguous: r.ambiguous,
            frames_per_token: r.frames_per_token,
            features: feats,
        });
    }
    if segments.len() != header.segments {
        return Err(DataError::Integrity(format!(
            "header announces {} segments, found {}",
            header.segments,
            segments.len()
        )));
    }
    if !features.tensors.is_empty() {
        return Err(DataError::Integrity(format!(
            "{} feature entries have no manifest record",
            features.tensors.len()
        )));
    }
    let m = StreamManifest {
        split: header.split,
        config: header.config,
        segments,
    };
    for group in m.streams() {
        if group.iter().enumerate().any(|(i, s)| s.index != i) {
            return Err(DataError::Integrity(format!(
                "stream {} indices are not contiguous from 0",
                group[0].stream
            )));
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;

    fn manifest() -> StreamManifest {
        let cfg = CorpusConfig {
            topics: 3,
            train_streams: 3,
            eval_streams: 1,
            segments_per_stream: 3,
            ..CorpusConfig::default()
        };
        generate_corpus(&cfg).unwrap().train
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let m = manifest();
        write_manifest(&m, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), m);
    }

    #[test]
    fn identical_bytes_for_identical_corpora() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_manifest(&manifest(), &a).unwrap();
        write_manifest(&manifest(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(fs::read(features_path(&a)).unwrap(), fs::read(features_path(&b)).unwrap());
    }

    #[test]
    fn truncation_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&manifest(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // cut mid-record
        fs::write(&path, &text[..text.len() - 40]).unwrap();
        assert!(matches!(read_manifest(&path), Err(DataError::Integrity(_))));
        // cut at a line boundary
        let keep: Vec<&str> = text.lines().take(4).collect();
        fs::write(&path, keep.join("\n") + "\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(DataError::Integrity(_))));
    }

    #[test]
    fn truncated_features_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&manifest(), &path).unwrap();
        let fpath = features_path(&path);
        let bytes = fs::read(&fpath).unwrap();
        fs::write(&fpath, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_manifest(&path), Err(DataError::Container(_))));
    }

    #[test]
    fn edited_record_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&manifest(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let edited = text.replacen("\"topic\":", "\"topic\":1", 1);
        assert_ne!(edited, text);
        fs::write(&path, edited).unwrap();
        assert!(matches!(read_manifest(&path), Err(DataError::Checksum { line: 2 })));
    }

    #[test]
    fn other_format_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&manifest(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("\"format_version\":1", "\"format_version\":7", 1)).unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(DataError::Version { found: 7, expected: 1 })
        ));
    }
}
