//! Diarisation annotations and the trials derived from them.
//!
//! RTTM lines: `SPEAKER session channel onset duration <NA> <NA> speaker <NA> <NA>`.
//! Each line is one segment; segments overlapping another speaker in the
//! same session are excluded from trial generation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Trial;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentAnnotation {
    pub session_id: String,
    pub speaker_id: String,
    pub start: f64,
    pub end: f64,
    pub overlapped: bool,
}

impl SegmentAnnotation {
    pub fn new(session: impl Into<String>, speaker: impl Into<String>, start: f64, end: f64) -> Self {
        Self {
            session_id: session.into(),
            speaker_id: speaker.into(),
            start,
            end,
            overlapped: false,
        }
    }

    /// Segment id used in trial lists and embedding files.
    pub fn id(&self) -> String {
        format!("{}_{:.3}_{:.3}", self.session_id, self.start, self.end)
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Parses RTTM text; `origin` names the source in errors. Non-`SPEAKER`
/// records are skipped.
pub fn parse_rttm(origin: &str, text: &str) -> Result<Vec<SegmentAnnotation>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() || f[0].starts_with('#') || f[0] != "SPEAKER" {
            continue;
        }
        if f.len() < 8 {
            return Err(err(n, format!("expected at least 8 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| err(n, format!("bad {what} `{s}`")))
        };
        let onset = num(f[3], "onset")?;
        let dur = num(f[4], "duration")?;
        if dur == 0.0 {
            return Err(err(n, "zero-length segment".to_string()));
        }
        out.push(SegmentAnnotation::new(f[1], f[7], onset, onset + dur));
    }
    Ok(out)
}

pub fn read_rttm(path: impl AsRef<Path>) -> Result<Vec<SegmentAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rttm(&path.display().to_string(), &text)
}

/// Sets `overlapped` on every segment that shares time with a segment of a
/// different speaker in the same session. Returns how many were marked.
pub fn mark_overlaps(segments: &mut [SegmentAnnotation]) -> usize {
    let mut by_session: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        by_session.entry(s.session_id.as_str()).or_default().push(i);
    }
    let mut flags = vec![false; segments.len()];
    for idx in by_session.into_values() {
        let mut idx = idx;
        idx.sort_by(|&a, &b| segments[a].start.total_cmp(&segments[b].start));
        for (k, &a) in idx.iter().enumerate() {
            for &b in &idx[k + 1..] {
                if segments[b].start >= segments[a].end {
                    break;
                }
                if segments[a].speaker_id != segments[b].speaker_id {
                    flags[a] = true;
                    flags[b] = true;
                }
            }
        }
    }
    for (s, f) in segments.iter_mut().zip(&flags) {
        s.overlapped = *f;
    }
    flags.iter().filter(|f| **f).count()
}

/// Sidecar listing each segment id with 1 if overlapped, else 0.
pub fn write_overlap_mask(path: impl AsRef<Path>, segments: &[SegmentAnnotation]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for seg in segments {
        let _ = writeln!(s, "{} {}", seg.id(), u8::from(seg.overlapped));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialGenConfig {
    /// Pair segments only within a session.
    pub session_local: bool,
    /// Uniformly subsample pairs when a session yields more than this.
    pub max_pairs_per_session: Option<usize>,
}

impl Default for TrialGenConfig {
    fn default() -> Self {
        Self {
            session_local: true,
            max_pairs_per_session: None,
        }
    }
}

/// Every unordered pair of non-overlapped segments, target when the speakers
/// match. Output order is deterministic for a given seed.
pub fn generate_trials(segments: &[SegmentAnnotation], cfg: &TrialGenConfig, seed: u64) -> Vec<Trial> {
    let mut groups: BTreeMap<&str, Vec<&SegmentAnnotation>> = BTreeMap::new();
    for s in segments.iter().filter(|s| !s.overlapped) {
        let key = if cfg.session_local { s.session_id.as_str() } else { "" };
        groups.entry(key).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for segs in groups.values() {
        let mut pairs = Vec::new();
        for i in 0..segs.len() {
            for j in i + 1..segs.len() {
                let (a, b) = (segs[i], segs[j]);
                if a.id() == b.id() {
                    continue;
                }
                let target = a.session_id == b.session_id && a.speaker_id == b.speaker_id;
                pairs.push(Trial::new(a.id(), b.id(), target));
            }
        }
        match cfg.max_pairs_per_session {
            Some(cap) if pairs.len() > cap => {
                let mut keep = sample(&mut rng, pairs.len(), cap).into_vec();
                keep.sort_unstable();
                out.extend(keep.into_iter().map(|k| pairs[k].clone()));
            }
            _ => out.extend(pairs),
        }
    }
    out
}
