//! Manifest and stub files.
//!
//! Manifest: one tab-separated line per utterance,
//! `utterance_id speaker_id duration_sec language dataset sample_rate [path]`
//! (`-` for no path). Lines starting with `#` are comments; a `#resample`
//! line marks every dataset in the file for resampling.
//!
//! Stub: first line `#stub`, then
//! `dataset n_speakers n_utterances total_hours [sample_rate [resample]]`
//! with hours either plain or in thousands (`2.69k`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Corpus, DatasetContent, DatasetDescriptor, UtteranceRecord};
use crate::error::{Error, Result};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Reads an utterance manifest.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    Ok(parse_manifest(path, &read_text(path)?)?.0)
}

fn parse_manifest(path: &Path, text: &str) -> Result<(Vec<UtteranceRecord>, bool)> {
    let mut records = Vec::new();
    let mut resample = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if rest.trim() == "resample" {
                resample = true;
            } else if rest.trim() == "stub" {
                return Err(parse_err(path, n, "stub header inside a manifest"));
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 && fields.len() != 7 {
            return Err(parse_err(
                path,
                n,
                format!("expected 6 or 7 tab-separated fields, found {}", fields.len()),
            ));
        }
        let duration: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(path, n, format!("bad duration `{}`", fields[2])))?;
        let sample_rate: u32 = fields[5]
            .parse()
            .map_err(|_| parse_err(path, n, format!("bad sample rate `{}`", fields[5])))?;
        let rec = UtteranceRecord {
            utterance_id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            duration,
            language: fields[3].to_string(),
            dataset: fields[4].to_string(),
            sample_rate,
            path: fields
                .get(6)
                .filter(|p| **p != "-" && !p.is_empty())
                .map(|p| p.to_string()),
        };
        rec.validate().map_err(|e| parse_err(path, n, e.to_string()))?;
        records.push(rec);
    }
    Ok((records, resample))
}

fn parse_count(s: &str) -> Option<u64> {
    s.replace(',', "").parse().ok()
}

fn parse_hours(s: &str) -> Option<f64> {
    let s = s.trim();
    let v = match s.strip_suffix(['k', 'K']) {
        Some(k) => k.parse::<f64>().ok()? * 1000.0,
        None => s.parse().ok()?,
    };
    (v.is_finite() && v >= 0.0).then_some(v)
}

fn parse_stub(path: &Path, text: &str) -> Result<Vec<DatasetDescriptor>> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !header_seen {
            if line != "#stub" {
                return Err(parse_err(path, n, "stub file must start with `#stub`"));
            }
            header_seen = true;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if !(4..=6).contains(&f.len()) {
            return Err(parse_err(
                path,
                n,
                format!(
                    "expected `dataset n_speakers n_utterances total_hours`, found {} fields",
                    f.len()
                ),
            ));
        }
        let spk = parse_count(f[1]).ok_or_else(|| parse_err(path, n, format!("bad speaker count `{}`", f[1])))?;
        let utt = parse_count(f[2]).ok_or_else(|| parse_err(path, n, format!("bad utterance count `{}`", f[2])))?;
        let hours = parse_hours(f[3]).ok_or_else(|| parse_err(path, n, format!("bad hours `{}`", f[3])))?;
        let default_rate = Corpus::from_name(f[0]).map_or(16_000, Corpus::sample_rate);
        let rate = match f.get(4) {
            Some(r) => r
                .parse()
                .map_err(|_| parse_err(path, n, format!("bad sample rate `{r}`")))?,
            None => default_rate,
        };
        let mut d = DatasetDescriptor::stub(f[0], spk, utt, hours, rate);
        if let Some(flag) = f.get(5) {
            d.resample = match *flag {
                "resample" | "yes" | "true" => true,
                "no" | "false" => false,
                other => return Err(parse_err(path, n, format!("bad resample flag `{other}`"))),
            };
        }
        out.push(d);
    }
    if !header_seen {
        return Err(parse_err(path, 1, "empty stub file"));
    }
    Ok(out)
}

/// Reads a stub or manifest file into descriptors, one per dataset named in
/// it, in order of first appearance.
pub fn read_descriptors(path: impl AsRef<Path>) -> Result<Vec<DatasetDescriptor>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let first = text.lines().map(str::trim).find(|l| !l.is_empty());
    if first == Some("#stub") {
        return parse_stub(path, &text);
    }
    let (records, resample) = parse_manifest(path, &text)?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<UtteranceRecord>> = BTreeMap::new();
    for r in records {
        if !groups.contains_key(&r.dataset) {
            order.push(r.dataset.clone());
        }
        groups.entry(r.dataset.clone()).or_default().push(r);
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let recs = groups.remove(&name).unwrap_or_default();
            let mut d = DatasetDescriptor::from_records(&name, recs);
            d.resample = resample;
            d
        })
        .collect())
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.utterance_id,
            r.speaker_id,
            r.duration,
            r.language,
            r.dataset,
            r.sample_rate,
            r.path.as_deref().unwrap_or("-")
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes stub descriptors; record-backed ones are written as their totals.
pub fn write_stub(path: impl AsRef<Path>, descriptors: &[DatasetDescriptor]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("#stub\n");
    for d in descriptors {
        let t = d.totals();
        let flag = if d.resample { "resample" } else { "no" };
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            d.name, t.n_speakers, t.n_utterances, t.hours, d.sample_rate, flag
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

impl DatasetDescriptor {
    /// Converts a record-backed descriptor to a stub with the same totals.
    pub fn to_stub(&self) -> DatasetDescriptor {
        let t = self.totals();
        DatasetDescriptor {
            content: DatasetContent::Stub {
                n_speakers: t.n_speakers,
                n_utterances: t.n_utterances,
                hours: t.hours,
            },
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataconfig::reference_stubs;

    #[test]
    fn stub_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("all.stub");
        write_stub(&p, &reference_stubs()).unwrap();
        assert_eq!(read_descriptors(&p).unwrap(), reference_stubs());
    }

    #[test]
    fn stub_accepts_table_notation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vox.stub");
        std::fs::write(&p, "#stub\nvoxceleb12-dev 7,205 1,240,651 2.69k\n").unwrap();
        let d = read_descriptors(&p).unwrap();
        assert_eq!(d, vec![reference_stubs()[0].clone()]);
    }

    #[test]
    fn manifest_round_trip_and_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let mk = |u: &str, ds: &str, path: Option<&str>| UtteranceRecord {
            utterance_id: u.into(),
            speaker_id: "s".into(),
            duration: 1.5,
            language: "de".into(),
            dataset: ds.into(),
            sample_rate: 8000,
            path: path.map(str::to_string),
        };
        let recs = vec![
            mk("a", "sre-04-06-08", Some("x.wav")),
            mk("b", "voxceleb12-dev", None),
            mk("c", "sre-04-06-08", None),
        ];
        write_manifest(&p, &recs).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), recs);
        let ds = read_descriptors(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].name, "sre-04-06-08");
        assert_eq!(ds[0].records().unwrap().len(), 2);
        assert!(!ds[0].resample);
        assert_eq!(ds[0].sample_rate, 8000);

        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, format!("#resample\n{text}")).unwrap();
        assert!(read_descriptors(&p).unwrap().iter().all(|d| d.resample));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        std::fs::write(
            &p,
            "u1\ts1\t1.0\ten\tvoxceleb12-dev\t16000\n\nu2\ts1\tabc\ten\tvoxceleb12-dev\t16000\n",
        )
        .unwrap();
        match read_manifest(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "u1\ts1\t-1\ten\tvoxceleb12-dev\t16000\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&p, "#stub\nvox 1 2\n").unwrap();
        assert!(matches!(read_descriptors(&p), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(
            read_descriptors(dir.path().join("nope")),
            Err(Error::Io { .. })
        ));
    }
}
