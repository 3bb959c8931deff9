//! Training data bookkeeping: dataset descriptors, the five data
//! configurations, per-speaker duration capping and validation.

mod io;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use io::{read_descriptors, read_manifest, write_manifest, write_stub};

use crate::error::{Error, Result};

/// Per-speaker limit applied to the multilingual read-speech corpus.
pub const MLS_CAP_SECONDS: f64 = 1500.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub duration: f64,
    pub language: String,
    pub dataset: String,
    pub sample_rate: u32,
    pub path: Option<String>,
}

impl UtteranceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.utterance_id.is_empty() || self.speaker_id.is_empty() {
            return Err(Error::invalid("utterance and speaker ids must be non-empty"));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::invalid(format!(
                "utterance `{}` has non-positive duration",
                self.utterance_id
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid(format!(
                "utterance `{}` has zero sample rate",
                self.utterance_id
            )));
        }
        Ok(())
    }

    /// Speaker identity qualified by its dataset, so equal raw ids from two
    /// corpora never merge.
    pub fn speaker_key(&self) -> String {
        format!("{}/{}", self.dataset, self.speaker_id)
    }
}

/// Speaker, utterance and duration totals.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Totals {
    pub n_speakers: u64,
    pub n_utterances: u64,
    pub hours: f64,
}

impl Totals {
    /// Equality with hours compared to within `tol_khours` thousand hours.
    pub fn matches(&self, other: &Totals, tol_khours: f64) -> bool {
        self.n_speakers == other.n_speakers
            && self.n_utterances == other.n_utterances
            && ((self.hours - other.hours) / 1000.0).abs() <= tol_khours + 1e-9
    }
}

impl std::ops::Add for Totals {
    type Output = Totals;
    fn add(self, o: Totals) -> Totals {
        Totals {
            n_speakers: self.n_speakers + o.n_speakers,
            n_utterances: self.n_utterances + o.n_utterances,
            hours: self.hours + o.hours,
        }
    }
}

impl std::iter::Sum for Totals {
    fn sum<I: Iterator<Item = Totals>>(iter: I) -> Totals {
        iter.fold(Totals::default(), |a, b| a + b)
    }
}

/// Tab-separated, thousands-grouped counts and hours in thousands:
/// `51,178\t3,078,582\t5.18k`.
impl fmt::Display for Totals {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.2}k",
            group_thousands(self.n_speakers),
            group_thousands(self.n_utterances),
            self.hours / 1000.0
        )
    }
}

pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetContent {
    Records(Vec<UtteranceRecord>),
    /// Aggregate statistics only, for corpora not available locally.
    Stub {
        n_speakers: u64,
        n_utterances: u64,
        hours: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetDescriptor {
    pub name: String,
    pub content: DatasetContent,
    /// Native sample rate of the corpus.
    pub sample_rate: u32,
    /// Whether audio is resampled to the model rate before features.
    pub resample: bool,
}

impl DatasetDescriptor {
    pub fn stub(name: &str, n_speakers: u64, n_utterances: u64, hours: f64, sample_rate: u32) -> Self {
        Self {
            name: name.to_string(),
            content: DatasetContent::Stub {
                n_speakers,
                n_utterances,
                hours,
            },
            sample_rate,
            resample: sample_rate != 16_000,
        }
    }

    /// Descriptor over records; the sample rate is the most common one.
    pub fn from_records(name: &str, records: Vec<UtteranceRecord>) -> Self {
        let mut rates: BTreeMap<u32, usize> = BTreeMap::new();
        for r in &records {
            *rates.entry(r.sample_rate).or_default() += 1;
        }
        let sample_rate = rates
            .iter()
            .max_by_key(|(rate, n)| (**n, std::cmp::Reverse(**rate)))
            .map_or(16_000, |(r, _)| *r);
        Self {
            name: name.to_string(),
            content: DatasetContent::Records(records),
            sample_rate,
            resample: false,
        }
    }

    pub fn records(&self) -> Option<&[UtteranceRecord]> {
        match &self.content {
            DatasetContent::Records(r) => Some(r),
            DatasetContent::Stub { .. } => None,
        }
    }

    pub fn is_stub(&self) -> bool {
        matches!(self.content, DatasetContent::Stub { .. })
    }

    pub fn totals(&self) -> Totals {
        match &self.content {
            DatasetContent::Stub {
                n_speakers,
                n_utterances,
                hours,
            } => Totals {
                n_speakers: *n_speakers,
                n_utterances: *n_utterances,
                hours: *hours,
            },
            DatasetContent::Records(records) => {
                let speakers: HashSet<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect();
                Totals {
                    n_speakers: speakers.len() as u64,
                    n_utterances: records.len() as u64,
                    hours: records.iter().map(|r| r.duration).sum::<f64>() / 3600.0,
                }
            }
        }
    }
}

/// The corpora the configurations are built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Corpus {
    VoxCeleb,
    Sre,
    CommonVoiceMajor,
    CommonVoiceExtra,
    Mls,
}

impl Corpus {
    pub const ALL: [Corpus; 5] = [
        Corpus::VoxCeleb,
        Corpus::Sre,
        Corpus::CommonVoiceMajor,
        Corpus::CommonVoiceExtra,
        Corpus::Mls,
    ];

    /// Descriptor name used in manifests and stub files.
    pub fn name(self) -> &'static str {
        match self {
            Corpus::VoxCeleb => "voxceleb12-dev",
            Corpus::Sre => "sre-04-06-08",
            Corpus::CommonVoiceMajor => "cv-de-es-fr-it",
            Corpus::CommonVoiceExtra => "cv-kab-lg-ru-be-ca",
            Corpus::Mls => "mls-refined",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Native sample rate.
    pub fn sample_rate(self) -> u32 {
        match self {
            Corpus::Sre => 8_000,
            _ => 16_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Version {
    V0,
    V1,
    V2,
    V3,
    V4,
}

impl Version {
    pub const ALL: [Version; 5] = [Version::V0, Version::V1, Version::V2, Version::V3, Version::V4];

    pub fn members(self) -> &'static [Corpus] {
        use Corpus::*;
        match self {
            Version::V0 => &[VoxCeleb],
            Version::V1 => &[VoxCeleb, Sre, CommonVoiceMajor],
            Version::V2 => &[VoxCeleb, Sre, CommonVoiceMajor, CommonVoiceExtra],
            Version::V3 => &[VoxCeleb, Sre, CommonVoiceMajor, Mls],
            Version::V4 => &[VoxCeleb, Sre, CommonVoiceMajor, CommonVoiceExtra, Mls],
        }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = Version::ALL.iter().position(|v| v == self).unwrap_or(0);
        write!(f, "v{i}")
    }
}

impl FromStr for Version {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Version::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown data configuration `{s}` (expected v0..v4)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub version: Version,
    /// Members in canonical corpus order.
    pub members: Vec<DatasetDescriptor>,
    pub totals: Totals,
}

impl DataConfig {
    /// All records of record-backed members, in member order.
    pub fn records(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.members.iter().filter_map(|m| m.records()).flatten()
    }
}

/// Checks membership against the version and sums the totals.
pub fn compose(version: Version, descriptors: &[DatasetDescriptor]) -> Result<DataConfig> {
    let fail = |message: String| Error::Composition {
        version: version.to_string(),
        message,
    };
    let mut by_corpus: BTreeMap<Corpus, &DatasetDescriptor> = BTreeMap::new();
    for d in descriptors {
        let corpus = Corpus::from_name(&d.name).ok_or_else(|| fail(format!("unknown dataset `{}`", d.name)))?;
        if by_corpus.insert(corpus, d).is_some() {
            return Err(fail(format!("dataset `{}` given more than once", d.name)));
        }
    }
    let expected: BTreeSet<Corpus> = version.members().iter().copied().collect();
    let given: BTreeSet<Corpus> = by_corpus.keys().copied().collect();
    let missing: Vec<&str> = expected.difference(&given).map(|c| c.name()).collect();
    let extra: Vec<&str> = given.difference(&expected).map(|c| c.name()).collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing {}", missing.join(", ")));
        }
        if !extra.is_empty() {
            parts.push(format!("unexpected {}", extra.join(", ")));
        }
        return Err(fail(parts.join("; ")));
    }
    let members: Vec<DatasetDescriptor> = by_corpus.into_values().cloned().collect();
    let totals = members.iter().map(DatasetDescriptor::totals).sum();
    Ok(DataConfig {
        version,
        members,
        totals,
    })
}

/// Keeps, per speaker, utterances in ascending id order as long as they fit
/// within `limit_seconds`; an utterance that would overflow is skipped and
/// later (shorter) ones may still be taken. Stubs cannot be capped.
pub fn cap_speaker_duration(desc: &DatasetDescriptor, limit_seconds: f64) -> Result<DatasetDescriptor> {
    let records = desc.records().ok_or_else(|| {
        Error::invalid(format!(
            "dataset `{}` is a stub without per-utterance durations",
            desc.name
        ))
    })?;
    let mut by_speaker: BTreeMap<&str, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in records {
        by_speaker.entry(&r.speaker_id).or_default().push(r);
    }
    let mut keep: HashSet<&str> = HashSet::new();
    for utts in by_speaker.values_mut() {
        utts.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        let mut total = 0.0;
        for r in utts.iter() {
            if total + r.duration <= limit_seconds {
                total += r.duration;
                keep.insert(&r.utterance_id);
            }
        }
    }
    let kept: Vec<UtteranceRecord> = records
        .iter()
        .filter(|r| keep.contains(r.utterance_id.as_str()))
        .cloned()
        .collect();
    Ok(DatasetDescriptor {
        content: DatasetContent::Records(kept),
        ..desc.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    Violation,
    Warning,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Issue {
    pub severity: Severity,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn violations(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Violation)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }

    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Model input rate; corpora at other rates need resampling.
const TARGET_RATE: u32 = 16_000;

/// Re-derives totals and checks ids, dataset tags and sample rates.
pub fn validate(config: &DataConfig) -> ValidationReport {
    let mut issues = Vec::new();
    let mut violation = |m: String| {
        issues.push(Issue {
            severity: Severity::Violation,
            message: m,
        })
    };
    let recomputed: Totals = config.members.iter().map(DatasetDescriptor::totals).sum();
    if !recomputed.matches(&config.totals, 0.01) {
        violation(format!(
            "stored totals ({}) differ from member sums ({})",
            config.totals, recomputed
        ));
    }
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    for m in &config.members {
        let Some(records) = m.records() else { continue };
        for r in records {
            if r.dataset != m.name {
                violation(format!(
                    "utterance `{}` is tagged `{}` but listed under `{}`",
                    r.utterance_id, r.dataset, m.name
                ));
            }
            if let Err(e) = r.validate() {
                violation(e.to_string());
            }
            if !seen.insert((m.name.as_str(), r.utterance_id.as_str())) {
                violation(format!("duplicate utterance id `{}` in `{}`", r.utterance_id, m.name));
            }
        }
    }
    for m in &config.members {
        let mut rates: BTreeSet<u32> = BTreeSet::from([m.sample_rate]);
        if let Some(records) = m.records() {
            rates.extend(records.iter().map(|r| r.sample_rate));
        }
        for rate in rates {
            if rate != TARGET_RATE && !m.resample {
                issues.push(Issue {
                    severity: Severity::Warning,
                    message: format!(
                        "`{}` has {rate} Hz audio but is not marked for resampling to {TARGET_RATE} Hz",
                        m.name
                    ),
                });
            }
        }
    }
    ValidationReport { issues }
}

/// Aggregate statistics of each corpus as used for the data configurations.
pub fn reference_stubs() -> Vec<DatasetDescriptor> {
    let row = |c: Corpus, spk, utt, hours| DatasetDescriptor::stub(c.name(), spk, utt, hours, c.sample_rate());
    vec![
        row(Corpus::VoxCeleb, 7_205, 1_240_651, 2_690.0),
        row(Corpus::Sre, 3_461, 496_310, 460.0),
        row(Corpus::CommonVoiceMajor, 40_512, 1_341_621, 2_030.0),
        row(Corpus::CommonVoiceExtra, 30_555, 2_538_723, 3_370.0),
        row(Corpus::Mls, 5_490, 403_584, 1_670.0),
    ]
}

/// Expected totals per version.
pub fn reference_totals(version: Version) -> Totals {
    let (n_speakers, n_utterances, hours) = match version {
        Version::V0 => (7_205, 1_240_651, 2_690.0),
        Version::V1 => (51_178, 3_078_582, 5_180.0),
        Version::V2 => (81_733, 5_617_305, 8_550.0),
        Version::V3 => (56_668, 3_482_166, 6_850.0),
        Version::V4 => (87_223, 6_020_889, 10_220.0),
    };
    Totals {
        n_speakers,
        n_utterances,
        hours,
    }
}
