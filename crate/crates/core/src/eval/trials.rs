//! Trial lists and the evaluation protocols' fixed sizes.
//!
//! Format A (VoxCeleb style): `label enrol test` with label 1 for target.
//! Format B (SRE style): `enrol test target|nontarget`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::Trial;
use crate::dataconfig::group_thousands;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TrialFormat {
    /// Decided from the first non-empty line.
    #[default]
    Auto,
    VoxCeleb,
    Sre,
}

impl FromStr for TrialFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(TrialFormat::Auto),
            "voxceleb" | "a" => Ok(TrialFormat::VoxCeleb),
            "sre" | "b" => Ok(TrialFormat::Sre),
            other => Err(Error::invalid(format!("unknown trial format `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Vox1O,
    Dihard3,
    VoxConverse,
    Sre10,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::Vox1O,
        Protocol::Dihard3,
        Protocol::VoxConverse,
        Protocol::Sre10,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Vox1O => "vox1-o",
            Protocol::Dihard3 => "dihard3",
            Protocol::VoxConverse => "voxconverse",
            Protocol::Sre10 => "sre10",
        }
    }

    /// `(targets, non-targets)` where the split is fixed, otherwise `None`.
    pub fn split(self) -> Option<(usize, usize)> {
        match self {
            Protocol::Vox1O => None,
            Protocol::Dihard3 => Some((243_738, 182_460)),
            Protocol::VoxConverse => Some((85_452, 140_734)),
            Protocol::Sre10 => Some((540, 54_180)),
        }
    }

    pub fn total(self) -> usize {
        match self {
            Protocol::Vox1O => 37_611,
            p => p.split().map_or(0, |(t, n)| t + n),
        }
    }

    /// Errors unless `trials` has the protocol's exact size.
    pub fn check(self, trials: &[Trial]) -> Result<()> {
        let n_t = trials.iter().filter(|t| t.target).count();
        let n_n = trials.len() - n_t;
        let fail = |message: String| Error::ProtocolCount {
            protocol: self.name().to_string(),
            message,
        };
        if trials.len() != self.total() {
            return Err(fail(format!(
                "expected {} trials, found {}",
                group_thousands(self.total() as u64),
                group_thousands(trials.len() as u64)
            )));
        }
        if let Some((t, n)) = self.split() {
            if (n_t, n_n) != (t, n) {
                return Err(fail(format!(
                    "expected {} target + {} non-target trials, found {} + {}",
                    group_thousands(t as u64),
                    group_thousands(n as u64),
                    group_thousands(n_t as u64),
                    group_thousands(n_n as u64)
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown protocol `{s}`")))
    }
}

fn detect(line: &str) -> Option<TrialFormat> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 3 {
        return None;
    }
    if matches!(f[0], "0" | "1") {
        Some(TrialFormat::VoxCeleb)
    } else if matches!(f[2], "target" | "nontarget") {
        Some(TrialFormat::Sre)
    } else {
        None
    }
}

/// Parses trial-list text; `origin` names the source in errors.
pub fn parse_trial_list(origin: &str, text: &str, format: TrialFormat) -> Result<Vec<Trial>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut format = format;
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if format == TrialFormat::Auto {
            format = detect(line).ok_or_else(|| err(n, format!("cannot tell the trial format from `{line}`")))?;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(err(n, format!("expected 3 fields, found {}", f.len())));
        }
        let trial = match format {
            TrialFormat::VoxCeleb => {
                let target = match f[0] {
                    "1" => true,
                    "0" => false,
                    other => return Err(err(n, format!("label must be 0 or 1, found `{other}`"))),
                };
                Trial::new(f[1], f[2], target)
            }
            TrialFormat::Sre => {
                let target = match f[2] {
                    "target" => true,
                    "nontarget" => false,
                    other => return Err(err(n, format!("label must be target or nontarget, found `{other}`"))),
                };
                Trial::new(f[0], f[1], target)
            }
            TrialFormat::Auto => unreachable!(),
        };
        trials.push(trial);
    }
    Ok(trials)
}

/// Reads a trial list; with a protocol, its size is enforced.
pub fn load_trial_list(path: impl AsRef<Path>, format: TrialFormat, protocol: Option<Protocol>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trials = parse_trial_list(&path.display().to_string(), &text, format)?;
    if let Some(p) = protocol {
        p.check(&trials)?;
    }
    Ok(trials)
}
