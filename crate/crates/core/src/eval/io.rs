//! Score and embedding files.
//!
//! Scores: `enrol_id test_id score` per line. Embeddings: `id<TAB>v1 v2 ...`
//! per line, ids may contain spaces but not tabs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::ScoreSet;
use crate::arch::SpeakerEmbedding;
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn write_scores(path: impl AsRef<Path>, scores: &ScoreSet) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for (t, v) in scores.trials.iter().zip(&scores.scores) {
        let _ = writeln!(s, "{} {} {:.8}", t.enrol_id, t.test_id, v);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads `(enrol, test, score)` triples.
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<(String, String, f64)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(parse_err(path, i + 1, format!("expected 3 fields, found {}", f.len())));
        }
        let score: f64 = f[2]
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| parse_err(path, i + 1, format!("bad score `{}`", f[2])))?;
        out.push((f[0].to_string(), f[1].to_string(), score));
    }
    Ok(out)
}

pub fn write_embeddings(path: impl AsRef<Path>, items: &[(String, SpeakerEmbedding)]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for (id, e) in items {
        if id.contains('\t') || id.contains('\n') {
            return Err(Error::invalid(format!("embedding id `{id}` contains a tab or newline")));
        }
        s.push_str(id);
        s.push('\t');
        for (k, v) in e.v.iter().enumerate() {
            if k > 0 {
                s.push(' ');
            }
            // shortest representation that round-trips exactly
            let _ = write!(s, "{v:?}");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads embeddings in file order.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<(String, SpeakerEmbedding)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, vals) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, i + 1, "expected `id<TAB>values`"))?;
        let v: Vec<f64> = vals
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, i + 1, "bad embedding value"))?;
        if *dim.get_or_insert(v.len()) != v.len() {
            return Err(parse_err(path, i + 1, "embedding dimension differs from earlier lines"));
        }
        let e = SpeakerEmbedding::new(v).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push((id.to_string(), e));
    }
    Ok(out)
}

/// Lookup table keyed by id.
pub fn embedding_lookup(items: Vec<(String, SpeakerEmbedding)>) -> HashMap<String, SpeakerEmbedding> {
    items.into_iter().collect()
}
